#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "asgk/attention.hpp"
#include "asgk/graph.hpp"
#include "asgk/gru.hpp"
#include "asgk/ops.hpp"
#include "asgk/vocab.hpp"

namespace asgk {

struct DecoderConfig {
    std::size_t d_model = 64;
    std::size_t ffn_dim = 256;
    std::size_t heads = 4;
    std::size_t blocks = 3;
    std::size_t max_len = 300;
    std::size_t d_graph = 32; // graph node feature width
};

struct DecoderBlockParams {
    MhaParams self_attn;  // masked self-attention
    Tensor ln1_g, ln1_b;
    MhaParams cross_attn; // queries from text, keys/values from graph nodes
    Tensor ln2_g, ln2_b;
    Tensor ff1, ff1_b;    // [ffn x d_model], [ffn]
    Tensor ff2, ff2_b;    // [d_model x ffn], [d_model]
    Tensor ln3_g, ln3_b;

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (const Tensor& t : self_attn.parameters()) ps.push_back(t);
        ps.push_back(ln1_g);
        ps.push_back(ln1_b);
        for (const Tensor& t : cross_attn.parameters()) ps.push_back(t);
        ps.push_back(ln2_g);
        ps.push_back(ln2_b);
        ps.push_back(ff1);
        ps.push_back(ff1_b);
        ps.push_back(ff2);
        ps.push_back(ff2_b);
        ps.push_back(ln3_g);
        ps.push_back(ln3_b);
        return ps;
    }
};

struct GenerationConfig {
    std::size_t max_len = 300;
    double temperature = 1.0;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(DecoderConfig cfg, std::size_t vocab_size, SeededRng& rng) : cfg_(cfg) {
        if (cfg.d_model % cfg.heads != 0)
            throw ConfigError("decoder d_model must be divisible by head count");
        w_e_ = Tensor::glorot({vocab_size, cfg.d_model}, rng);
        w_p_ = Tensor::glorot({cfg.max_len, cfg.d_model}, rng);
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            DecoderBlockParams blk;
            blk.self_attn = MhaParams::init(cfg.d_model, cfg.d_model, cfg.d_model, rng);
            blk.cross_attn = MhaParams::init(cfg.d_model, cfg.d_model, cfg.d_graph, rng);
            blk.ff1 = Tensor::glorot({cfg.ffn_dim, cfg.d_model}, rng);
            blk.ff2 = Tensor::glorot({cfg.d_model, cfg.ffn_dim}, rng);
            blk.ff1_b = Tensor::zeros({cfg.ffn_dim});
            blk.ff2_b = Tensor::zeros({cfg.d_model});
            blk.ff1_b.set_requires_grad(true);
            blk.ff2_b.set_requires_grad(true);
            auto ln = [&](Tensor& g, Tensor& b) {
                g = Tensor::full({cfg.d_model}, 1.0);
                b = Tensor::zeros({cfg.d_model});
                g.set_requires_grad(true);
                b.set_requires_grad(true);
            };
            ln(blk.ln1_g, blk.ln1_b);
            ln(blk.ln2_g, blk.ln2_b);
            ln(blk.ln3_g, blk.ln3_b);
            blocks_.push_back(std::move(blk));
        }
    }

    const DecoderConfig& config() const { return cfg_; }
    const Tensor& token_embedding() const { return w_e_; }
    const Tensor& position_embedding() const { return w_p_; }
    Tensor& token_embedding() { return w_e_; }
    std::vector<DecoderBlockParams>& blocks() { return blocks_; }
    const std::vector<DecoderBlockParams>& blocks() const { return blocks_; }
    std::size_t vocab_size() const { return w_e_.dim(0); }

    Tensor embed(const std::vector<std::size_t>& ids) const {
        if (ids.empty()) throw ContractError("decoder on empty token sequence");
        if (ids.size() > cfg_.max_len)
            throw ContractError("sequence length " + std::to_string(ids.size()) +
                                " exceeds position table " + std::to_string(cfg_.max_len));
        std::vector<std::size_t> positions(ids.size());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
        return add(embedding_lookup(w_e_, ids), embedding_lookup(w_p_, positions));
    }

    // h_N over the whole prefix, conditioned on the graph's node features.
    Tensor forward_hidden(const std::vector<std::size_t>& ids, const TagGraph& graph) const {
        const std::size_t len = ids.size();
        std::vector<std::uint8_t> causal(len * len, 0);
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j <= i; ++j) causal[i * len + j] = 1;

        Tensor h = embed(ids);
        for (const DecoderBlockParams& blk : blocks_) {
            Tensor self_out = multi_head_attention(h, h, blk.self_attn, cfg_.heads, &causal);
            h = layer_norm(add(h, self_out), blk.ln1_g, blk.ln1_b);
            Tensor cross_out =
                multi_head_attention(h, graph.node_feats, blk.cross_attn, cfg_.heads);
            h = layer_norm(add(h, cross_out), blk.ln2_g, blk.ln2_b);
            Tensor ff = add_bias(matmul_nt(relu(add_bias(matmul_nt(h, blk.ff1), blk.ff1_b)),
                                           blk.ff2),
                                 blk.ff2_b);
            h = layer_norm(add(h, ff), blk.ln3_g, blk.ln3_b);
        }
        return h;
    }

    // Tied-embedding softmax over the vocabulary, one row per position.
    Tensor output_distribution(const Tensor& h, double temperature = 1.0) const {
        Tensor logits = matmul_nt(h, w_e_);
        if (temperature != 1.0) logits = scale(logits, 1.0 / temperature);
        return softmax(logits, 1);
    }

    Tensor forward(const std::vector<std::size_t>& ids, const TagGraph& graph) const {
        return output_distribution(forward_hidden(ids, graph));
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps{w_e_, w_p_};
        for (const DecoderBlockParams& blk : blocks_)
            for (const Tensor& t : blk.parameters()) ps.push_back(t);
        return ps;
    }

private:
    DecoderConfig cfg_;
    Tensor w_e_, w_p_;
    std::vector<DecoderBlockParams> blocks_;
};

// Mean negative log-likelihood over positions flagged in `keep`.
inline Tensor lm_loss(const Tensor& probs, const std::vector<std::size_t>& targets,
                      const std::vector<std::uint8_t>& keep) {
    return neg(masked_mean(log_prob(pick(probs, targets)), keep));
}

// Teacher-forced loss for one sequence [BOS, t1, ..., EOS]: predict each
// token from its prefix; every non-PAD target position counts.
inline Tensor sequence_loss(const Decoder& dec, const std::vector<std::size_t>& ids,
                            const TagGraph& graph) {
    if (ids.size() < 2) throw ContractError("sequence_loss needs at least BOS + one target");
    std::vector<std::size_t> input(ids.begin(), ids.end() - 1);
    std::vector<std::size_t> targets(ids.begin() + 1, ids.end());
    std::vector<std::uint8_t> keep;
    keep.reserve(targets.size());
    for (std::size_t t : targets) keep.push_back(t == kPadId ? 0 : 1);
    return lm_loss(dec.forward(input, graph), targets, keep);
}

// Greedy decoding from BOS. Argmax ties resolve to the lowest token id; a
// budget exhausted without EOS is closed with a forced EOS.
inline std::vector<std::size_t> generate(const Decoder& dec, const TagGraph& graph,
                                         const GenerationConfig& cfg) {
    NoGradGuard guard;
    std::vector<std::size_t> ids{kBosId};
    while (ids.size() < cfg.max_len) {
        Tensor h = dec.forward_hidden(ids, graph);
        Tensor p = dec.output_distribution(h, cfg.temperature);
        const std::size_t v = p.dim(1);
        const std::size_t last = (p.dim(0) - 1) * v;
        std::size_t best = 0;
        double best_val = p.at(last);
        for (std::size_t j = 1; j < v; ++j)
            if (p.at(last + j) > best_val) {
                best_val = p.at(last + j);
                best = j;
            }
        ids.push_back(best);
        if (best == kEosId) return ids;
    }
    if (ids.back() != kEosId) ids.push_back(kEosId);
    return ids;
}

// GRU-encoded sentence representation; the external auxiliary signal. Token
// embeddings are shared with the decoder (tied W_e).
inline Tensor encode_external_signal(const std::vector<std::size_t>& ids, const Tensor& w_e,
                                     const GruParams& gru) {
    if (ids.empty()) throw ContractError("encode_external_signal on empty sentence");
    return gru_encode(embedding_lookup(w_e, ids), gru);
}

// Optional plain-text embedding import: each line "word v1 v2 ... vd".
// Unknown words keep their existing rows. Returns the number of rows set.
inline std::size_t import_embeddings(Tensor& w_e, const Vocabulary& vocab,
                                     const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open embedding file " + path);
    const std::size_t d = w_e.dim(1);
    std::string line;
    std::size_t applied = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (!vocab.contains(word)) continue;
        std::vector<double> vals;
        double v;
        while (ls >> v) vals.push_back(v);
        if (vals.size() != d)
            throw DataError("embedding width " + std::to_string(vals.size()) + " for '" + word +
                            "' does not match d_model " + std::to_string(d));
        const std::size_t row = vocab.id(word);
        for (std::size_t j = 0; j < d; ++j) w_e.mutable_values()[row * d + j] = vals[j];
        ++applied;
    }
    return applied;
}

} // namespace asgk
