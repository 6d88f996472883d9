#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "asgk/ops.hpp"
#include "asgk/optim.hpp"
#include "asgk/rng.hpp"
#include "asgk/tensor.hpp"

using namespace asgk;

TEST_CASE("tensor construction and shape contracts") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rank() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.at(4) == 5.0);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0}), ShapeError);
    CHECK_THROWS_AS(t.value(), ContractError);
    CHECK(Tensor::scalar(3.5).value() == 3.5);
}

TEST_CASE("backward: leaf identity") {
    Tensor x = Tensor::scalar(4.0);
    x.set_requires_grad(true);
    // loss is x itself
    Tensor loss = scale(x, 1.0);
    backward(loss);
    CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("backward: sum of squares") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    CHECK(x.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward: diamond graph accumulates both paths") {
    // y = x*x + 3x  => dy/dx = 2x + 3
    Tensor x = Tensor::scalar(5.0);
    x.set_requires_grad(true);
    Tensor loss = add(mul(x, x), scale(x, 3.0));
    backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(13.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("NoGradGuard suppresses tape construction") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.raw()->parents.empty());
}

TEST_CASE("non-finite op output raises NumericError") {
    Tensor big = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("adam: zero gradient leaves parameter unchanged") {
    Tensor p = Tensor::scalar(2.5);
    p.set_requires_grad(true);
    Adam opt({p}, 0.1);
    opt.zero_grad();
    opt.step();
    CHECK(p.value() == 2.5);
}

TEST_CASE("adam: hand-computed first step") {
    // g=1, lr=0.1 -> update = 0.1 * 1/(1 + eps) after bias correction
    Tensor p = Tensor::scalar(1.0);
    p.set_requires_grad(true);
    Adam opt({p}, 0.1);
    opt.zero_grad();
    p.mutable_grad()[0] = 1.0;
    opt.step();
    const double expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(p.value() == Catch::Approx(expected).epsilon(1e-12));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam: identical runs are bitwise identical") {
    auto run = [] {
        SeededRng rng(77);
        Tensor w = Tensor::glorot({3, 3}, rng);
        Tensor x = Tensor::from({3, 1}, {0.3, -0.2, 0.9});
        Adam opt({w}, 1e-2);
        for (int i = 0; i < 25; ++i) {
            opt.zero_grad();
            Tensor loss = sum(mul(matmul(w, x), matmul(w, x)));
            backward(loss);
            opt.step();
        }
        return std::vector<double>(w.values().begin(), w.values().end());
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("rng: identical seeds give identical draws") {
    SeededRng a(123), b(123);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    SeededRng c(123), d(124);
    bool all_same = true;
    for (int i = 0; i < 10; ++i) all_same = all_same && (c.next_u64() == d.next_u64());
    CHECK_FALSE(all_same);
}

TEST_CASE("rng: uniform bounds and below()") {
    SeededRng r(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const std::uint64_t k = r.below(7);
        CHECK(k < 7);
    }
}

TEST_CASE("rng: fork produces independent reproducible streams") {
    SeededRng a(5), b(5);
    SeededRng fa = a.fork(1), fb = b.fork(1);
    CHECK(fa.next_u64() == fb.next_u64());
    SeededRng fc = SeededRng(5).fork(2);
    CHECK(fa.next_u64() != fc.next_u64());
}

TEST_CASE("rng: shuffle is a permutation and seed-stable") {
    SeededRng r(11);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    r.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    SeededRng r2(11);
    std::vector<int> w{0, 1, 2, 3, 4, 5, 6, 7};
    r2.shuffle(w);
    CHECK(v == w);
}

TEST_CASE("glorot init stays within the fan limit") {
    SeededRng r(3);
    Tensor w = Tensor::glorot({4, 8}, r);
    const double limit = std::sqrt(6.0 / (4.0 + 8.0));
    for (double v : w.values()) {
        CHECK(std::fabs(v) <= limit);
    }
    CHECK(w.requires_grad());
}
