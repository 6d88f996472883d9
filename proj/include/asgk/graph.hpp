#pragma once

#include <cstdint>
#include <vector>

#include "asgk/attention.hpp"
#include "asgk/ops.hpp"
#include "asgk/rng.hpp"

namespace asgk {

// Which projection maps the input feature vector to tag scores. The external
// (GRU sentence) signal and the internal (visual) signal generally have
// different widths, so each source owns its projection; both are always
// created so checkpoints stay shape-stable across training phases.
enum class SignalSource { external, visual };

struct TagGraph {
    Tensor node_probs; // [N_t]
    Tensor node_feats; // [N_t x d], post prior + self attention
    Tensor edges;      // [N_t x N_t], rows sum to 1
};

struct FocalConfig {
    double alpha = 0.25;
    double gamma = 2.0;
};

// p*_i = p_i when y_i = 1 else 1-p_i; loss = -sum alpha*(1-p*)^gamma*ln(p*).
inline Tensor focal_loss(const Tensor& p, const std::vector<std::uint8_t>& y,
                         const FocalConfig& cfg) {
    if (p.rank() != 1 || y.size() != p.dim(0)) throw ShapeError("focal_loss size mismatch");
    if (cfg.gamma < 0.0 || cfg.alpha <= 0.0 || cfg.alpha > 1.0)
        throw ConfigError("focal_loss needs gamma >= 0 and alpha in (0,1]");
    std::vector<double> ypos(y.size()), yneg(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        ypos[i] = y[i] ? 1.0 : 0.0;
        yneg[i] = y[i] ? 0.0 : 1.0;
    }
    Tensor pc = clamp_prob(p);
    Tensor pstar = add(mul(pc, Tensor::from({y.size()}, std::move(ypos))),
                       mul(const_minus(1.0, pc), Tensor::from({y.size()}, std::move(yneg))));
    Tensor weighted = mul(powc(const_minus(1.0, pstar), cfg.gamma), log_prob(pstar));
    return scale(neg(sum(weighted)), cfg.alpha);
}

inline Tensor tag_bce_loss(const Tensor& v, const std::vector<std::uint8_t>& y) {
    return focal_loss(v, y, FocalConfig{1.0, 0.0});
}

struct GraphEncoderConfig {
    std::size_t n_tags = 12;
    std::size_t feat_dim = 32; // d, divisible by heads
    std::size_t heads = 4;
    std::size_t d_ext_in = 128; // GRU hidden size
    std::size_t d_vis_in = 64;  // backbone channel count
    bool edge_bias = false;     // feed edge weights into self-attention scores
};

struct GraphEncoderParams {
    Tensor w_v_ext;     // [N_t x d_ext_in]
    Tensor w_v_vis;     // [N_t x d_vis_in]
    Tensor tag_embed;   // [N_t x d]
    Tensor edge_q, edge_k; // [d x d]
    Tensor prior_feats; // [N_t x d], learnable
    Tensor prior_edges; // [N_t x N_t], fixed uniform buffer
    MhaParams prior_attn; // nodes query the prior graph
    MhaParams self_attn;  // graph refinement
    Tensor ln_gain, ln_bias; // post-norm after self-attention
    Tensor readout_w;   // [N_t x d], per-node readout direction
    Tensor readout_b;   // [N_t]
};

class GraphEncoder {
public:
    GraphEncoder() = default;
    GraphEncoder(GraphEncoderConfig cfg, SeededRng& rng) : cfg_(cfg) {
        if (cfg.feat_dim % cfg.heads != 0)
            throw ConfigError("graph feat_dim must be divisible by head count");
        p_.w_v_ext = Tensor::glorot({cfg.n_tags, cfg.d_ext_in}, rng);
        p_.w_v_vis = Tensor::glorot({cfg.n_tags, cfg.d_vis_in}, rng);
        p_.tag_embed = Tensor::glorot({cfg.n_tags, cfg.feat_dim}, rng);
        p_.edge_q = Tensor::glorot({cfg.feat_dim, cfg.feat_dim}, rng);
        p_.edge_k = Tensor::glorot({cfg.feat_dim, cfg.feat_dim}, rng);
        p_.prior_feats = Tensor::glorot({cfg.n_tags, cfg.feat_dim}, rng);
        p_.prior_edges =
            Tensor::full({cfg.n_tags, cfg.n_tags}, 1.0 / static_cast<double>(cfg.n_tags));
        p_.prior_attn = MhaParams::init(cfg.feat_dim, cfg.feat_dim, cfg.feat_dim, rng);
        p_.self_attn = MhaParams::init(cfg.feat_dim, cfg.feat_dim, cfg.feat_dim, rng);
        p_.ln_gain = Tensor::full({cfg.feat_dim}, 1.0);
        p_.ln_bias = Tensor::zeros({cfg.feat_dim});
        p_.ln_gain.set_requires_grad(true);
        p_.ln_bias.set_requires_grad(true);
        p_.readout_w = Tensor::glorot({cfg.n_tags, cfg.feat_dim}, rng);
        p_.readout_b = Tensor::zeros({cfg.n_tags});
        p_.readout_b.set_requires_grad(true);
    }

    const GraphEncoderConfig& config() const { return cfg_; }
    GraphEncoderParams& params() { return p_; }
    const GraphEncoderParams& params() const { return p_; }

    Tensor node_scores(const Tensor& f_input, SignalSource src) const {
        const Tensor& w = src == SignalSource::external ? p_.w_v_ext : p_.w_v_vis;
        if (f_input.rank() != 1 || f_input.dim(0) != w.dim(1))
            throw ShapeError("graph input dim " + shape_str(f_input.dims()) + " vs projection " +
                             shape_str(w.dims()));
        return affine(w, f_input);
    }

    // probs = sigmoid(W_v f); feats[i] = probs[i] * tag_embed[i]
    std::pair<Tensor, Tensor> encode_nodes(const Tensor& f_input, SignalSource src) const {
        Tensor probs = sigmoid(node_scores(f_input, src));
        return {probs, scale_rows(p_.tag_embed, probs)};
    }

    Tensor encode_edges(const Tensor& node_feats) const {
        Tensor qf = matmul_nt(node_feats, p_.edge_q);
        Tensor kf = matmul_nt(node_feats, p_.edge_k);
        Tensor scores =
            scale(matmul_nt(qf, kf), 1.0 / std::sqrt(static_cast<double>(cfg_.feat_dim)));
        return softmax(scores, 1);
    }

    Tensor attend_prior(const Tensor& node_feats) const {
        return add(node_feats,
                   multi_head_attention(node_feats, p_.prior_feats, p_.prior_attn, 1));
    }

    Tensor self_attend(const Tensor& node_feats, const Tensor* edges = nullptr) const {
        const Tensor* bias = cfg_.edge_bias && edges ? edges : nullptr;
        Tensor refined = multi_head_attention(node_feats, node_feats, p_.self_attn, cfg_.heads,
                                              nullptr, bias);
        return layer_norm(add(node_feats, refined), p_.ln_gain, p_.ln_bias);
    }

    TagGraph encode(const Tensor& f_input, SignalSource src) const {
        auto [probs, feats] = encode_nodes(f_input, src);
        Tensor edges = encode_edges(feats);
        Tensor refined = self_attend(attend_prior(feats), &edges);
        return {probs, refined, edges};
    }

    // Final per-tag probabilities v_i for the tag-classification loss.
    Tensor readout(const TagGraph& g) const {
        return sigmoid(add(rowwise_dot(p_.readout_w, g.node_feats), p_.readout_b));
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps{p_.w_v_ext, p_.w_v_vis, p_.tag_embed, p_.edge_q, p_.edge_k,
                               p_.prior_feats};
        for (const Tensor& t : p_.prior_attn.parameters()) ps.push_back(t);
        for (const Tensor& t : p_.self_attn.parameters()) ps.push_back(t);
        ps.push_back(p_.ln_gain);
        ps.push_back(p_.ln_bias);
        ps.push_back(p_.readout_w);
        ps.push_back(p_.readout_b);
        return ps;
    }

private:
    GraphEncoderConfig cfg_;
    GraphEncoderParams p_;
};

} // namespace asgk
