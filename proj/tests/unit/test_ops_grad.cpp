#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "asgk/grad_check.hpp"
#include "asgk/ops.hpp"
#include "asgk/rng.hpp"

using namespace asgk;

namespace {

Tensor random_tensor(Shape dims, SeededRng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(dims));
    for (double& v : t.mutable_values()) v = rng.normal(0.0, scale);
    t.set_requires_grad(true);
    return t;
}

// Keeps every entry away from zero so kinked ops (relu, emax) stay smooth
// around the finite-difference probe.
Tensor random_tensor_off_kink(Shape dims, SeededRng& rng, double min_abs = 0.2) {
    Tensor t = random_tensor(std::move(dims), rng);
    for (double& v : t.mutable_values())
        if (std::fabs(v) < min_abs) v += (v >= 0.0 ? min_abs : -min_abs);
    return t;
}

} // namespace

TEST_CASE("matmul oracles") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    CHECK(r.at(0) == 1.0);
    CHECK(r.at(1) == 2.0);
    CHECK(r.at(2) == 3.0);
    CHECK(r.at(3) == 4.0);

    Tensor x = Tensor::from({2, 1}, {5, 6});
    Tensor y = matmul(a, x);
    CHECK(y.at(0) == 17.0);
    CHECK(y.at(1) == 39.0);

    Tensor bad = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(bad, bad), ShapeError);
}

TEST_CASE("matmul_nt equals matmul against explicit transpose") {
    SeededRng rng(21);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({5, 4}, rng);
    Tensor bt = Tensor::zeros({4, 5});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) bt.mutable_values()[j * 5 + i] = b.at(i * 4 + j);
    Tensor r1 = matmul_nt(a, b);
    Tensor r2 = matmul(a, bt);
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1.at(i) == Catch::Approx(r2.at(i)));
}

TEST_CASE("softmax oracles") {
    Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(u.at(i) == Catch::Approx(1.0 / 3.0));

    Tensor v = softmax(Tensor::from({2}, {std::log(2.0), 0.0}), 0);
    CHECK(v.at(0) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(v.at(1) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor w = softmax(Tensor::from({2}, {1000.0, 0.0}), 0);
    CHECK(w.at(0) == Catch::Approx(1.0));
    CHECK(w.at(1) >= 0.0);
    CHECK(std::isfinite(w.at(1)));
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    SeededRng rng(31);
    Tensor m = random_tensor({6, 9}, rng, 5.0);
    Tensor s = softmax(m, 1);
    for (std::size_t i = 0; i < 6; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 9; ++j) acc += s.at(i * 9 + j);
        CHECK(std::fabs(acc - 1.0) < 1e-12);
    }
}

TEST_CASE("sigmoid oracles") {
    CHECK(sigmoid(Tensor::scalar(0.0)).value() == Catch::Approx(0.5));
    CHECK(sigmoid(Tensor::scalar(std::log(9.0))).value() == Catch::Approx(0.9).epsilon(1e-12));
    const double sat = sigmoid(Tensor::scalar(-1000.0)).value();
    CHECK(sat > 0.0);
    const double hi = sigmoid(Tensor::scalar(1000.0)).value();
    CHECK(hi < 1.0);
}

TEST_CASE("layer_norm oracles") {
    Tensor gain = Tensor::from({2}, {1, 1});
    Tensor bias = Tensor::from({2}, {0.25, -0.75});
    Tensor c = layer_norm(Tensor::from({2}, {3.0, 3.0}), gain, bias);
    CHECK(c.at(0) == Catch::Approx(0.25));
    CHECK(c.at(1) == Catch::Approx(-0.75));

    Tensor zb = Tensor::from({2}, {0, 0});
    Tensor n = layer_norm(Tensor::from({2}, {1.0, -1.0}), gain, zb);
    // variance eps keeps the magnitude fractionally below 1
    CHECK(n.at(0) == Catch::Approx(1.0).margin(1e-4));
    CHECK(n.at(1) == Catch::Approx(-1.0).margin(1e-4));
}

TEST_CASE("embedding oracles") {
    Tensor table = Tensor::from({2, 3}, {10, 11, 12, 20, 21, 22});
    Tensor g = embedding_lookup(table, {1, 0, 1});
    CHECK(g.at(0) == 20.0);
    CHECK(g.at(3) == 10.0);
    CHECK(g.at(6) == 20.0);
    CHECK_THROWS_AS(embedding_lookup(table, {2}), IndexError);
}

TEST_CASE("embedding repeated id accumulates gradient twice") {
    Tensor table = Tensor::from({2, 2}, {1, 2, 3, 4});
    table.set_requires_grad(true);
    Tensor g = embedding_lookup(table, {1, 1});
    backward(sum(g));
    CHECK(table.grad()[0] == 0.0);
    CHECK(table.grad()[2] == 2.0);
    CHECK(table.grad()[3] == 2.0);
}

TEST_CASE("attention: single key returns v row") {
    Tensor q = Tensor::from({3, 2}, {5, -1, 0.5, 2, 0, 0});
    Tensor k = Tensor::from({1, 2}, {1, 1});
    Tensor v = Tensor::from({1, 4}, {9, 8, 7, 6});
    Tensor o = scaled_dot_attention(q, k, v);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(o.at(i * 4 + j) == Catch::Approx(v.at(j)));
}

TEST_CASE("attention: one-hot selection at large scale") {
    const double big = 50.0;
    Tensor q = Tensor::from({2, 2}, {big, 0, 0, big});
    Tensor k = Tensor::from({2, 2}, {big, 0, 0, big});
    Tensor v = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor o = scaled_dot_attention(q, k, v);
    CHECK(o.at(0) == Catch::Approx(1.0).epsilon(1e-9));
    CHECK(o.at(3) == Catch::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("attention: causal mask gives exact invariance to future keys") {
    SeededRng rng(41);
    const std::size_t L = 5, d = 4;
    std::vector<std::uint8_t> mask(L * L, 0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask[i * L + j] = 1;

    Tensor q = random_tensor({L, d}, rng);
    Tensor k = random_tensor({L, d}, rng);
    Tensor v = random_tensor({L, d}, rng);
    Tensor o1 = scaled_dot_attention(q, k, v, &mask);

    // perturb the last key/value rows; rows 0..L-2 must be bitwise unchanged
    Tensor k2 = Tensor::from(k.dims(), {k.values().begin(), k.values().end()});
    Tensor v2 = Tensor::from(v.dims(), {v.values().begin(), v.values().end()});
    for (std::size_t j = 0; j < d; ++j) {
        k2.mutable_values()[(L - 1) * d + j] += 3.7;
        v2.mutable_values()[(L - 1) * d + j] -= 2.1;
    }
    Tensor o2 = scaled_dot_attention(q, k2, v2, &mask);
    for (std::size_t i = 0; i + 1 < L; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(o1.at(i * d + j) == o2.at(i * d + j));
}

TEST_CASE("attention: fully masked row is rejected") {
    Tensor q = Tensor::zeros({2, 2});
    Tensor k = Tensor::zeros({2, 2});
    Tensor v = Tensor::zeros({2, 2});
    std::vector<std::uint8_t> mask{1, 1, 0, 0};
    CHECK_THROWS_AS(scaled_dot_attention(q, k, v, &mask), ContractError);
}

TEST_CASE("reductions and reshapes") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(sum(x).value() == 10.0);
    CHECK(mean(x).value() == 2.5);
    Tensor r = reshape(x, {4});
    CHECK(r.rank() == 1);
    CHECK_THROWS_AS(reshape(x, {3}), ShapeError);
    Tensor rw = row(x, 1);
    CHECK(rw.at(0) == 3.0);
    CHECK_THROWS_AS(row(x, 2), IndexError);
    Tensor sc = slice_cols(x, 1, 2);
    CHECK(sc.at(0) == 2.0);
    CHECK(sc.at(1) == 4.0);
    Tensor cc = concat_cols({x, x});
    CHECK(cc.dim(1) == 4);
    CHECK(cc.at(2) == 1.0);
}

TEST_CASE("pick and masked_mean") {
    Tensor p = Tensor::from({2, 3}, {0.1, 0.7, 0.2, 0.5, 0.3, 0.2});
    Tensor picked = pick(p, {1, 0});
    CHECK(picked.at(0) == Catch::Approx(0.7));
    CHECK(picked.at(1) == Catch::Approx(0.5));
    CHECK_THROWS_AS(pick(p, {3, 0}), IndexError);

    Tensor v = Tensor::from({3}, {1.0, 100.0, 3.0});
    CHECK(masked_mean(v, {1, 0, 1}).value() == Catch::Approx(2.0));
    CHECK_THROWS_AS(masked_mean(v, {0, 0, 0}), ContractError);
}

TEST_CASE("finite differences: dense op sweep") {
    SeededRng rng(1001);
    const double tol = 1e-5;

    SECTION("matmul") {
        for (int t = 0; t < 5; ++t) {
            Tensor a = random_tensor({3, 3}, rng);
            Tensor b = random_tensor({3, 3}, rng);
            auto res = finite_diff_check([&] { return sum(mul(matmul(a, b), matmul(a, b))); },
                                         {a, b}, 1e-5, tol);
            INFO(res.worst);
            CHECK(res.ok);
        }
    }
    SECTION("matmul_nt") {
        Tensor a = random_tensor({2, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        auto res = finite_diff_check([&] { return sum(mul(matmul_nt(a, b), matmul_nt(a, b))); },
                                     {a, b}, 1e-5, tol);
        INFO(res.worst);
        CHECK(res.ok);
    }
    SECTION("softmax cross-entropy composite") {
        for (int t = 0; t < 5; ++t) {
            Tensor z = random_tensor({4, 6}, rng, 2.0);
            std::vector<std::size_t> targets{1, 5, 0, 3};
            auto res = finite_diff_check(
                [&] { return neg(sum(log_prob(pick(softmax(z, 1), targets)))); }, {z}, 1e-5, 1e-6);
            INFO(res.worst);
            CHECK(res.ok);
        }
    }
    SECTION("sigmoid at zero") {
        Tensor z = Tensor::zeros({3});
        z.set_requires_grad(true);
        auto res = finite_diff_check([&] { return sum(mul(sigmoid(z), sigmoid(z))); }, {z}, 1e-6,
                                     1e-8);
        INFO(res.worst);
        CHECK(res.ok);
    }
    SECTION("tanh relu emax chain") {
        Tensor a = random_tensor_off_kink({3, 3}, rng);
        Tensor b = random_tensor_off_kink({3, 3}, rng);
        auto res = finite_diff_check(
            [&] { return sum(mul(relu(a), tanh_op(emax(a, b)))); }, {a, b}, 1e-6, tol);
        INFO(res.worst);
        CHECK(res.ok);
    }
    SECTION("layer_norm") {
        for (int t = 0; t < 5; ++t) {
            Tensor x = random_tensor({2, 5}, rng);
            Tensor g = random_tensor({5}, rng);
            Tensor b = random_tensor({5}, rng);
            auto res = finite_diff_check([&] { return sum(mul(layer_norm(x, g, b), layer_norm(x, g, b))); },
                                         {x, g, b}, 1e-6, 1e-6);
            INFO(res.worst);
            CHECK(res.ok);
        }
    }
    SECTION("attention with causal mask") {
        const std::size_t L = 4, d = 3;
        std::vector<std::uint8_t> mask(L * L, 0);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j <= i; ++j) mask[i * L + j] = 1;
        Tensor q = random_tensor({L, d}, rng);
        Tensor k = random_tensor({L, d}, rng);
        Tensor v = random_tensor({L, d}, rng);
        auto res = finite_diff_check(
            [&] {
                Tensor o = scaled_dot_attention(q, k, v, &mask);
                return sum(mul(o, o));
            },
            {q, k, v}, 1e-5, tol);
        INFO(res.worst);
        CHECK(res.ok);
    }
    SECTION("affine add_bias scale_rows rowwise_dot") {
        Tensor w = random_tensor({4, 3}, rng);
        Tensor x = random_tensor({3}, rng);
        Tensor b = random_tensor({4}, rng);
        auto res1 = finite_diff_check([&] { return sum(mul(affine(w, x, &b), affine(w, x, &b))); },
                                      {w, x, b}, 1e-5, tol);
        INFO(res1.worst);
        CHECK(res1.ok);

        Tensor m = random_tensor({3, 4}, rng);
        Tensor bias = random_tensor({4}, rng);
        Tensor s = random_tensor({3}, rng);
        auto res2 = finite_diff_check(
            [&] {
                Tensor y = scale_rows(add_bias(m, bias), s);
                return sum(mul(y, y));
            },
            {m, bias, s}, 1e-5, tol);
        INFO(res2.worst);
        CHECK(res2.ok);

        Tensor p = random_tensor({3, 4}, rng);
        Tensor q2 = random_tensor({3, 4}, rng);
        auto res3 = finite_diff_check(
            [&] {
                Tensor y = rowwise_dot(p, q2);
                return sum(mul(y, y));
            },
            {p, q2}, 1e-5, tol);
        INFO(res3.worst);
        CHECK(res3.ok);
    }
    SECTION("embedding and slice paths") {
        Tensor table = random_tensor({5, 3}, rng);
        std::vector<std::size_t> ids{2, 2, 4, 0};
        auto res = finite_diff_check(
            [&] {
                Tensor e = embedding_lookup(table, ids);
                return sum(mul(e, e));
            },
            {table}, 1e-5, tol);
        INFO(res.worst);
        CHECK(res.ok);

        Tensor m = random_tensor({3, 6}, rng);
        auto res2 = finite_diff_check(
            [&] {
                Tensor parts = concat_cols({slice_cols(m, 0, 2), slice_cols(m, 2, 6)});
                return sum(mul(parts, parts));
            },
            {m}, 1e-5, tol);
        INFO(res2.worst);
        CHECK(res2.ok);
    }
    SECTION("log powc clamp composite") {
        Tensor raw = random_tensor({6}, rng, 0.5);
        auto res = finite_diff_check(
            [&] {
                Tensor p = sigmoid(raw); // safely inside (0,1)
                Tensor mod = powc(const_minus(1.0, clamp_prob(p)), 2.0);
                return neg(sum(mul(mod, log_prob(clamp_prob(p)))));
            },
            {raw}, 1e-6, 1e-6);
        INFO(res.worst);
        CHECK(res.ok);
    }
}
