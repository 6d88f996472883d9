#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "asgk/decoder.hpp"
#include "asgk/grad_check.hpp"

using namespace asgk;

namespace {

DecoderConfig small_cfg() {
    DecoderConfig cfg;
    cfg.d_model = 16;
    cfg.ffn_dim = 32;
    cfg.heads = 4;
    cfg.blocks = 3;
    cfg.max_len = 24;
    cfg.d_graph = 8;
    return cfg;
}

TagGraph random_graph(std::size_t n_tags, std::size_t d, SeededRng& rng) {
    TagGraph g;
    g.node_probs = Tensor::zeros({n_tags});
    g.node_feats = Tensor::zeros({n_tags, d});
    g.edges = Tensor::full({n_tags, n_tags}, 1.0 / static_cast<double>(n_tags));
    for (double& v : g.node_probs.mutable_values()) v = rng.uniform();
    for (double& v : g.node_feats.mutable_values()) v = rng.normal(0.0, 1.0);
    return g;
}

} // namespace

TEST_CASE("tokenize and detokenize") {
    auto toks = tokenize("Left lung shadow.");
    REQUIRE(toks == std::vector<std::string>{"left", "lung", "shadow", "."});
    CHECK(tokenize("").empty());
    CHECK(detokenize(toks) == "left lung shadow.");
    auto round = tokenize("the heart, and 2 lungs!");
    CHECK(detokenize(round) == "the heart, and 2 lungs!");
}

TEST_CASE("vocabulary: reserved ids, min_freq, unknown fallback") {
    std::vector<std::string> lines{"a b b c c c", "c b a a", "d"};
    // freq: a=3, b=3, c=4, d=1
    Vocabulary v = Vocabulary::build(lines, 3);
    CHECK(v.size() == 7);
    CHECK(v.id("<pad>") == kPadId);
    CHECK(v.id("<bos>") == kBosId);
    CHECK(v.id("<eos>") == kEosId);
    CHECK(v.id("a") == 4);
    CHECK(v.id("b") == 5);
    CHECK(v.id("c") == 6);
    CHECK(v.id("d") == kUnkId);
    CHECK_FALSE(v.contains("d"));

    auto ids = v.encode("a b d", 16);
    REQUIRE(ids == std::vector<std::size_t>{kBosId, 4, 5, kUnkId, kEosId});
    CHECK(v.decode(ids) == "a b <unk>");

    auto trunc = v.encode("a a a a a a", 4);
    CHECK(trunc.size() == 4);
    CHECK(trunc.back() == kEosId);

    Vocabulary re = Vocabulary::from_tokens(v.tokens());
    CHECK(re.id("c") == 6);
    CHECK_THROWS_AS(Vocabulary::from_tokens({"x"}), DataError);
}

TEST_CASE("embed: position table adds on top of token rows") {
    SeededRng rng(151);
    Decoder dec(small_cfg(), 10, rng);

    // zero position table -> embeddings only
    Decoder dec2(small_cfg(), 10, rng);
    Tensor& wp = const_cast<Tensor&>(dec2.position_embedding());
    for (double& v : wp.mutable_values()) v = 0.0;
    Tensor h0 = dec2.embed({4, 4});
    const Tensor& we = dec2.token_embedding();
    for (std::size_t j = 0; j < 16; ++j) {
        CHECK(h0.at(j) == we.at(4 * 16 + j));
        CHECK(h0.at(16 + j) == we.at(4 * 16 + j));
    }

    // same token at two positions differs exactly by the position rows
    Tensor h1 = dec.embed({7, 7});
    const Tensor& wp1 = dec.position_embedding();
    for (std::size_t j = 0; j < 16; ++j)
        CHECK(h1.at(j) - h1.at(16 + j) ==
              Catch::Approx(wp1.at(j) - wp1.at(16 + j)).margin(1e-12));

    CHECK_THROWS_AS(dec.embed({10}), IndexError);
    CHECK_THROWS_AS(dec.embed(std::vector<std::size_t>(25, 1)), ContractError);
}

TEST_CASE("embed: gradient scatters into both tables") {
    SeededRng rng(157);
    DecoderConfig cfg = small_cfg();
    Decoder dec(cfg, 6, rng);
    SeededRng grng(158);
    auto res = finite_diff_check(
        [&] {
            Tensor h = dec.embed({3, 1, 3});
            return sum(mul(h, h));
        },
        {dec.token_embedding(), const_cast<Tensor&>(dec.position_embedding())}, 1e-5, 1e-5);
    INFO(res.worst);
    CHECK(res.ok);
}

TEST_CASE("decoder: causality is exact over the stacked blocks") {
    SeededRng rng(163);
    Decoder dec(small_cfg(), 12, rng);
    TagGraph g = random_graph(4, 8, rng);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::size_t> ids(6);
        for (std::size_t& id : ids) id = rng.below(12);
        Tensor p1 = dec.forward(ids, g);
        const std::size_t flip = 3 + rng.below(3); // positions 3..5
        std::vector<std::size_t> ids2 = ids;
        ids2[flip] = (ids2[flip] + 1 + rng.below(10)) % 12;
        Tensor p2 = dec.forward(ids2, g);
        for (std::size_t i = 0; i < flip; ++i)
            for (std::size_t j = 0; j < 12; ++j)
                REQUIRE(p1.at(i * 12 + j) == p2.at(i * 12 + j));
    }
}

TEST_CASE("decoder: zero cross-attention projection ignores the graph") {
    SeededRng rng(167);
    Decoder dec(small_cfg(), 12, rng);
    for (DecoderBlockParams& blk : dec.blocks())
        for (double& v : blk.cross_attn.wo.mutable_values()) v = 0.0;
    TagGraph g1 = random_graph(4, 8, rng);
    TagGraph g2 = random_graph(4, 8, rng);
    std::vector<std::size_t> ids{1, 4, 7, 2};
    Tensor p1 = dec.forward(ids, g1);
    Tensor p2 = dec.forward(ids, g2);
    for (std::size_t i = 0; i < p1.numel(); ++i) CHECK(p1.at(i) == p2.at(i));
}

TEST_CASE("output_distribution: uniform from zeros, rows sum to one, sharpening") {
    SeededRng rng(173);
    Decoder dec(small_cfg(), 9, rng);
    Tensor h = Tensor::zeros({2, 16});
    Tensor p = dec.output_distribution(h);
    for (std::size_t i = 0; i < p.numel(); ++i)
        CHECK(p.at(i) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));

    Tensor hr = Tensor::zeros({3, 16});
    for (double& v : hr.mutable_values()) v = rng.normal(0.0, 1.0);
    Tensor pr = dec.output_distribution(hr);
    for (std::size_t i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 9; ++j) acc += pr.at(i * 9 + j);
        CHECK(std::fabs(acc - 1.0) < 1e-12);
    }

    // scaling a hidden row concentrates mass on its argmax token
    Tensor sharp = dec.output_distribution(scale(hr, 8.0));
    for (std::size_t i = 0; i < 3; ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < 9; ++j)
            if (pr.at(i * 9 + j) > pr.at(i * 9 + arg)) arg = j;
        CHECK(sharp.at(i * 9 + arg) > pr.at(i * 9 + arg));
    }
}

TEST_CASE("lm_loss oracles") {
    // certain prediction -> zero loss
    Tensor certain = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    CHECK(lm_loss(certain, {0, 1}, {1, 1}).value() == Catch::Approx(0.0).margin(1e-9));

    Tensor uniform = Tensor::full({2, 5}, 0.2);
    CHECK(lm_loss(uniform, {3, 4}, {1, 1}).value() == Catch::Approx(std::log(5.0)).epsilon(1e-12));

    Tensor quarter = Tensor::full({2, 4}, 0.25);
    CHECK(lm_loss(quarter, {0, 2}, {1, 1}).value() ==
          Catch::Approx(-std::log(0.25)).epsilon(1e-12));

    // masked positions do not contribute
    Tensor mixed = Tensor::from({2, 2}, {0.5, 0.5, 1.0, 0.0});
    CHECK(lm_loss(mixed, {0, 0}, {0, 1}).value() == Catch::Approx(0.0).margin(1e-9));
    CHECK_THROWS_AS(lm_loss(mixed, {0, 0}, {0, 0}), ContractError);
}

TEST_CASE("generate: forced EOS on a one-token budget and determinism") {
    SeededRng rng(179);
    Decoder dec(small_cfg(), 10, rng);
    TagGraph g = random_graph(4, 8, rng);
    GenerationConfig gc;
    gc.max_len = 1;
    auto seq = generate(dec, g, gc);
    REQUIRE(seq == std::vector<std::size_t>{kBosId, kEosId});

    gc.max_len = 12;
    auto a = generate(dec, g, gc);
    auto b = generate(dec, g, gc);
    CHECK(a == b);
    CHECK(a.front() == kBosId);
    CHECK(a.back() == kEosId);
    CHECK(a.size() <= 13); // budget + forced EOS
}

TEST_CASE("generate: constructed logits repeat the favored token") {
    SeededRng rng(181);
    DecoderConfig cfg = small_cfg();
    Decoder dec(cfg, 8, rng);
    // kill the data path of the last normalization and pin its bias: every
    // hidden row becomes exactly `v`
    DecoderBlockParams& last = dec.blocks().back();
    for (double& x : last.ln3_g.mutable_values()) x = 0.0;
    std::vector<double> v(cfg.d_model);
    for (double& x : v) x = rng.normal(0.0, 1.0);
    for (std::size_t j = 0; j < cfg.d_model; ++j) last.ln3_b.mutable_values()[j] = v[j];
    // token 5 aligns with v, everything else is orthogonal-by-zero
    Tensor& we = dec.token_embedding();
    for (double& x : we.mutable_values()) x = 0.0;
    for (std::size_t j = 0; j < cfg.d_model; ++j) we.mutable_values()[5 * cfg.d_model + j] = v[j];

    TagGraph g = random_graph(4, 8, rng);
    GenerationConfig gc;
    gc.max_len = 6;
    auto seq = generate(dec, g, gc);
    REQUIRE(seq.size() == 7);
    CHECK(seq[0] == kBosId);
    for (std::size_t i = 1; i + 1 < seq.size(); ++i) CHECK(seq[i] == 5);
    CHECK(seq.back() == kEosId);
}

TEST_CASE("generate: argmax ties resolve to the lowest token id") {
    SeededRng rng(191);
    Decoder dec(small_cfg(), 7, rng);
    // zero hidden rows (gain 0, bias 0 in the last norm) -> all logits equal
    DecoderBlockParams& last = dec.blocks().back();
    for (double& x : last.ln3_g.mutable_values()) x = 0.0;
    for (double& x : last.ln3_b.mutable_values()) x = 0.0;
    TagGraph g = random_graph(4, 8, rng);
    GenerationConfig gc;
    gc.max_len = 4;
    auto seq = generate(dec, g, gc);
    REQUIRE(seq.size() >= 2);
    CHECK(seq[0] == kBosId);
    CHECK(seq[1] == 0); // PAD is the lowest id
}

TEST_CASE("sequence_loss: teacher forcing shapes") {
    SeededRng rng(193);
    Decoder dec(small_cfg(), 10, rng);
    TagGraph g = random_graph(4, 8, rng);
    std::vector<std::size_t> ids{kBosId, 4, 5, kEosId};
    Tensor loss = sequence_loss(dec, ids, g);
    CHECK(loss.numel() == 1);
    CHECK(loss.value() > 0.0);
    CHECK_THROWS_AS(sequence_loss(dec, {kBosId}, g), ContractError);
}

TEST_CASE("encode_external_signal: dimension contract and gradient flow") {
    SeededRng rng(197);
    const std::size_t hidden = 6, d_model = 5;
    Tensor we = Tensor::glorot({9, d_model}, rng);
    GruParams gru = GruParams::init(d_model, hidden, rng);
    Tensor sig = encode_external_signal({1, 4, 2}, we, gru);
    CHECK(sig.dims() == Shape{hidden});
    CHECK_THROWS_AS(encode_external_signal({}, we, gru), ContractError);

    auto res = finite_diff_check(
        [&] {
            Tensor s = encode_external_signal({1, 4, 2}, we, gru);
            return sum(mul(s, s));
        },
        {we}, 1e-5, 1e-5);
    INFO(res.worst);
    CHECK(res.ok);
}

TEST_CASE("import_embeddings applies matching rows only") {
    namespace fs = std::filesystem;
    fs::create_directories(ASGK_TEST_TMPDIR);
    const std::string path = std::string(ASGK_TEST_TMPDIR) + "/vectors.txt";

    Vocabulary v = Vocabulary::build({"alpha alpha alpha beta beta beta"}, 3);
    SeededRng rng(199);
    Tensor we = Tensor::glorot({v.size(), 3}, rng);
    {
        std::ofstream os(path);
        os << "alpha 1 2 3\n";
        os << "missingword 9 9 9\n";
    }
    CHECK(import_embeddings(we, v, path) == 1);
    const std::size_t r = v.id("alpha");
    CHECK(we.at(r * 3 + 0) == 1.0);
    CHECK(we.at(r * 3 + 2) == 3.0);

    {
        std::ofstream os(path);
        os << "beta 1 2\n";
    }
    CHECK_THROWS_AS(import_embeddings(we, v, path), DataError);
}
