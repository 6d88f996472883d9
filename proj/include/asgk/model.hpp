#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "asgk/backbone.hpp"
#include "asgk/checkpoint.hpp"
#include "asgk/config.hpp"
#include "asgk/decoder.hpp"
#include "asgk/graph.hpp"
#include "asgk/region.hpp"

namespace asgk {

// Everything in one place: two conv backbones (whole image + saliency crop)
// with three tag heads, the tag-graph encoder, the masked-attention decoder,
// and the GRU sentence encoder that shares the decoder's token embeddings.
struct AsgkModel {
    TrainConfig cfg;
    Vocabulary vocab;
    ConvBackbone global_bb, region_bb;
    BranchHeads branch_heads;
    GraphEncoder graph;
    Decoder decoder;
    GruParams gru;
    FusionOp fusion_op = FusionOp::add;

    static AsgkModel init(const TrainConfig& cfg, Vocabulary vocab, SeededRng& rng) {
        validate(cfg);
        AsgkModel m;
        m.cfg = cfg;
        m.vocab = std::move(vocab);
        m.fusion_op = fusion_op_from_string(cfg.fusion);
        m.global_bb = ConvBackbone::init(cfg.img_size, cfg.backbone_channels, rng);
        m.region_bb = ConvBackbone::init(cfg.img_size, cfg.backbone_channels, rng);
        m.branch_heads = BranchHeads::init(cfg.n_tags, cfg.backbone_channels.back(), rng);
        GraphEncoderConfig gc;
        gc.n_tags = cfg.n_tags;
        gc.feat_dim = cfg.d_graph;
        gc.heads = cfg.graph_heads;
        gc.d_ext_in = cfg.gru_hidden;
        gc.d_vis_in = cfg.backbone_channels.back();
        m.graph = GraphEncoder(gc, rng);
        DecoderConfig dc;
        dc.d_model = cfg.d_model;
        dc.ffn_dim = cfg.ffn_dim;
        dc.heads = cfg.heads;
        dc.blocks = cfg.blocks;
        dc.max_len = cfg.max_len;
        dc.d_graph = cfg.d_graph;
        m.decoder = Decoder(dc, m.vocab.size(), rng);
        m.gru = GruParams::init(cfg.d_model, cfg.gru_hidden, rng);
        return m;
    }

    // ---- named tensors (checkpoint layout) ----

    std::vector<std::pair<std::string, Tensor>> named_visual() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto backbone = [&](const char* which, const ConvBackbone& bb) {
            for (std::size_t s = 0; s < bb.weights.size(); ++s) {
                const std::string base =
                    std::string("backbone.") + which + ".stage" + std::to_string(s);
                out.emplace_back(base + ".w", bb.weights[s]);
                out.emplace_back(base + ".b", bb.biases[s]);
            }
        };
        backbone("global", global_bb);
        backbone("region", region_bb);
        out.emplace_back("heads.global", branch_heads.global_head);
        out.emplace_back("heads.region", branch_heads.region_head);
        out.emplace_back("heads.fusion", branch_heads.fusion_head);
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_encdec() const {
        std::vector<std::pair<std::string, Tensor>> out;
        const GraphEncoderParams& g = graph.params();
        auto mha = [&](const std::string& base, const MhaParams& p) {
            out.emplace_back(base + ".wq", p.wq);
            out.emplace_back(base + ".wk", p.wk);
            out.emplace_back(base + ".wv", p.wv);
            out.emplace_back(base + ".wo", p.wo);
        };
        out.emplace_back("graph.w_v_ext", g.w_v_ext);
        out.emplace_back("graph.w_v_vis", g.w_v_vis);
        out.emplace_back("graph.tag_embed", g.tag_embed);
        out.emplace_back("graph.edge_q", g.edge_q);
        out.emplace_back("graph.edge_k", g.edge_k);
        out.emplace_back("graph.prior_feats", g.prior_feats);
        out.emplace_back("graph.prior_edges", g.prior_edges);
        mha("graph.prior_attn", g.prior_attn);
        mha("graph.self_attn", g.self_attn);
        out.emplace_back("graph.ln_g", g.ln_gain);
        out.emplace_back("graph.ln_b", g.ln_bias);
        out.emplace_back("graph.readout_w", g.readout_w);
        out.emplace_back("graph.readout_b", g.readout_b);

        out.emplace_back("decoder.w_e", decoder.token_embedding());
        out.emplace_back("decoder.w_p", decoder.position_embedding());
        const auto& blocks = decoder.blocks();
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::string base = "decoder.block" + std::to_string(b);
            mha(base + ".self", blocks[b].self_attn);
            out.emplace_back(base + ".ln1_g", blocks[b].ln1_g);
            out.emplace_back(base + ".ln1_b", blocks[b].ln1_b);
            mha(base + ".cross", blocks[b].cross_attn);
            out.emplace_back(base + ".ln2_g", blocks[b].ln2_g);
            out.emplace_back(base + ".ln2_b", blocks[b].ln2_b);
            out.emplace_back(base + ".ff1", blocks[b].ff1);
            out.emplace_back(base + ".ff1_b", blocks[b].ff1_b);
            out.emplace_back(base + ".ff2", blocks[b].ff2);
            out.emplace_back(base + ".ff2_b", blocks[b].ff2_b);
            out.emplace_back(base + ".ln3_g", blocks[b].ln3_g);
            out.emplace_back(base + ".ln3_b", blocks[b].ln3_b);
        }

        out.emplace_back("gru.wz", gru.wz);
        out.emplace_back("gru.uz", gru.uz);
        out.emplace_back("gru.bz", gru.bz);
        out.emplace_back("gru.wr", gru.wr);
        out.emplace_back("gru.ur", gru.ur);
        out.emplace_back("gru.br", gru.br);
        out.emplace_back("gru.wh", gru.wh);
        out.emplace_back("gru.uh", gru.uh);
        out.emplace_back("gru.bh", gru.bh);
        return out;
    }

    std::map<std::string, Tensor> named_tensors() const {
        std::map<std::string, Tensor> all;
        for (auto& [n, t] : named_visual()) all.emplace(n, t);
        for (auto& [n, t] : named_encdec()) all.emplace(n, t);
        return all;
    }

    // ---- trainable parameter groups (prior_edges buffer excluded) ----

    std::vector<Tensor> visual_parameters() const {
        std::vector<Tensor> ps = global_bb.parameters();
        for (const Tensor& t : region_bb.parameters()) ps.push_back(t);
        for (const Tensor& t : branch_heads.parameters()) ps.push_back(t);
        return ps;
    }

    std::vector<Tensor> encdec_parameters() const {
        std::vector<Tensor> ps = graph.parameters();
        for (const Tensor& t : decoder.parameters()) ps.push_back(t);
        for (const Tensor& t : gru.parameters()) ps.push_back(t);
        return ps;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

inline Checkpoint snapshot(const AsgkModel& m, const std::string& phase,
                           nlohmann::json extra = {}) {
    Checkpoint ckpt;
    ckpt.tensors = m.named_tensors();
    ckpt.config["train"] = to_json(m.cfg);
    ckpt.config["vocab"] = m.vocab.tokens();
    ckpt.config["phase"] = phase;
    if (!extra.is_null())
        for (auto& [k, v] : extra.items()) ckpt.config[k] = v;
    return ckpt;
}

inline void restore_group(AsgkModel& m, const Checkpoint& ckpt,
                          const std::vector<std::pair<std::string, Tensor>>& group) {
    for (const auto& [name, tensor] : group) restore_into(ckpt, name, tensor);
}

// Rebuild a full model from a checkpoint written by snapshot().
inline AsgkModel model_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.config.contains("train") || !ckpt.config.contains("vocab"))
        throw DataError("checkpoint lacks the train config or vocabulary snapshot");
    TrainConfig cfg = config_from_json(ckpt.config["train"]);
    Vocabulary vocab =
        Vocabulary::from_tokens(ckpt.config["vocab"].get<std::vector<std::string>>());
    SeededRng rng(cfg.seed);
    AsgkModel m = AsgkModel::init(cfg, std::move(vocab), rng);
    restore_group(m, ckpt, m.named_visual());
    restore_group(m, ckpt, m.named_encdec());
    return m;
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

struct VisualFeatures {
    Tensor f_c; // [C x S x S]
    Tensor f_g; // [C]
    Tensor f_r; // [C] (internal path only)
    Tensor f_f; // [C] (internal path only)
    Region region;
    bool has_region = false;
};

// Global features always; when with_region, saliency -> crop -> region net ->
// fusion. An optional precomputed crop skips the live heat map (frozen mode).
inline VisualFeatures visual_forward(const AsgkModel& m, const Tensor& image,
                                     bool with_region, const Tensor* frozen_crop = nullptr) {
    VisualFeatures vf;
    auto [f_c, f_g] = m.global_bb.forward(image);
    vf.f_c = f_c;
    vf.f_g = f_g;
    if (!with_region) return vf;
    Tensor patch;
    if (frozen_crop) {
        patch = *frozen_crop;
    } else {
        Tensor h = heatmap(vf.f_c);
        vf.region = extract_region(h, m.cfg.tau);
        patch = crop_resize(image, vf.region, m.cfg.img_size);
    }
    auto [r_c, f_r] = m.region_bb.forward(patch);
    vf.f_r = f_r;
    vf.f_f = fuse(vf.f_g, vf.f_r, m.fusion_op);
    vf.has_region = true;
    return vf;
}

inline FocalConfig effective_focal(const TrainConfig& cfg) {
    return cfg.use_focal ? FocalConfig{cfg.focal_alpha, cfg.focal_gamma}
                         : FocalConfig{1.0, 0.0};
}

struct BranchLosses {
    Tensor total;            // sum over the active branches
    std::size_t branches = 0;
};

// Per-branch tag losses over f_g (and f_r, f_f when the region path ran).
inline BranchLosses branch_losses(const AsgkModel& m, const VisualFeatures& vf,
                                  const std::vector<std::uint8_t>& labels) {
    const FocalConfig fc = effective_focal(m.cfg);
    BranchLosses out;
    out.total = focal_loss(sigmoid(affine(m.branch_heads.global_head, vf.f_g)), labels, fc);
    out.branches = 1;
    if (vf.has_region) {
        out.total = add(out.total, focal_loss(
            sigmoid(affine(m.branch_heads.region_head, vf.f_r)), labels, fc));
        out.total = add(out.total, focal_loss(
            sigmoid(affine(m.branch_heads.fusion_head, vf.f_f)), labels, fc));
        out.branches = 3;
    }
    return out;
}

// Phase-1 objective: reconstruct a sentence from its GRU encoding routed
// through the graph encoder.
inline Tensor pretrain_loss(const AsgkModel& m, const std::vector<std::size_t>& ids) {
    Tensor h = encode_external_signal(ids, m.decoder.token_embedding(), m.gru);
    TagGraph g = m.graph.encode(h, SignalSource::external);
    return sequence_loss(m.decoder, ids, g);
}

struct JointLosses {
    Tensor lm, tag, branch, total;
    TagGraph graph;
    VisualFeatures vf;
};

// Phase-3 objective for one sample: LM + tag classification + branch losses,
// each weighted per config. Graph input is f_f (internal on) or f_g.
inline JointLosses joint_forward(const AsgkModel& m, const Tensor& image,
                                 const std::vector<std::size_t>& ids,
                                 const std::vector<std::uint8_t>& labels,
                                 const Tensor* frozen_crop = nullptr) {
    JointLosses out;
    out.vf = visual_forward(m, image, m.cfg.use_internal, frozen_crop);
    const Tensor& f_input = out.vf.has_region ? out.vf.f_f : out.vf.f_g;
    out.graph = m.graph.encode(f_input, SignalSource::visual);
    out.tag = tag_bce_loss(m.graph.readout(out.graph), labels);
    out.lm = sequence_loss(m.decoder, ids, out.graph);
    BranchLosses bl = branch_losses(m, out.vf, labels);
    out.branch = bl.total;
    out.total = add(add(scale(out.lm, m.cfg.w_lm), scale(out.tag, m.cfg.w_tag)),
                    scale(out.branch, m.cfg.w_branch));
    return out;
}

// Greedy report generation for one image, plus the tag probabilities used for
// AUC evaluation.
struct GeneratedReport {
    std::vector<std::size_t> ids;
    std::string text;
    std::vector<double> tag_probs;
};

inline GeneratedReport generate_for_image(const AsgkModel& m, const Tensor& image) {
    NoGradGuard guard;
    VisualFeatures vf = visual_forward(m, image, m.cfg.use_internal);
    const Tensor& f_input = vf.has_region ? vf.f_f : vf.f_g;
    TagGraph g = m.graph.encode(f_input, SignalSource::visual);
    // classification scores come from the focal-trained branch heads (fusion
    // when the region path ran, else global); the graph readout only steers
    // the encoder during training
    Tensor probs = vf.has_region ? sigmoid(affine(m.branch_heads.fusion_head, vf.f_f))
                                 : sigmoid(affine(m.branch_heads.global_head, vf.f_g));
    GeneratedReport rep;
    rep.tag_probs.assign(probs.values().begin(), probs.values().end());
    GenerationConfig gc;
    gc.max_len = m.cfg.max_len;
    rep.ids = generate(m.decoder, g, gc);
    rep.text = m.vocab.decode(rep.ids);
    return rep;
}

} // namespace asgk
