#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asgk/checkpoint.hpp"
#include "asgk/config.hpp"
#include "asgk/metrics.hpp"
#include "asgk/model.hpp"
#include "asgk/optim.hpp"
#include "asgk/synth.hpp"

namespace asgk {

// Artifact names every phase writes under its --out directory.
inline constexpr const char* kPretrainCkpt = "pretrain.ckpt";
inline constexpr const char* kBackboneBestCkpt = "backbone.ckpt";
inline constexpr const char* kBackboneLastCkpt = "backbone_last.ckpt";
inline constexpr const char* kJointCkpt = "joint.ckpt";

// Distinct rng stream per phase; batch order is then a pure function of
// (seed, phase, epoch), which is what makes interrupted runs replayable.
inline constexpr std::uint64_t kPretrainSalt = 0xA1;
inline constexpr std::uint64_t kBackboneSalt = 0xB2;
inline constexpr std::uint64_t kJointSalt = 0xC3;

struct TrainHooks {
    std::ostream* echo = nullptr; // per-epoch progress lines
    std::size_t stop_after = 0;   // finish early after N epochs this run (0 = run out)
};

struct PhaseResult {
    AsgkModel model;                      // state when the runner returned
    std::vector<nlohmann::json> log;      // one entry per epoch of this invocation
    std::filesystem::path checkpoint;     // the phase's main artifact
    double best_val_auc = std::numeric_limits<double>::quiet_NaN();
    nlohmann::json final_metrics;         // joint phase only
};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& split,
                                            std::uint64_t seed, std::uint64_t phase_salt,
                                            std::size_t epoch) {
    std::vector<std::size_t> order = split;
    SeededRng rng = SeededRng(seed).fork(phase_salt).fork(epoch);
    rng.shuffle(order);
    return order;
}

class JsonlLogger {
public:
    JsonlLogger(const std::filesystem::path& path, bool append)
        : os_(path, append ? std::ios::app : std::ios::trunc) {
        if (!os_) throw DataError("cannot open log file " + path.string());
    }
    void write(const nlohmann::json& entry) {
        os_ << entry.dump() << '\n';
        os_.flush();
    }

private:
    std::ofstream os_;
};

inline Vocabulary build_vocab(const LoadedDataset& ds, const TrainConfig& cfg) {
    std::vector<std::string> corpus = ds.textbook;
    for (std::size_t i : ds.train) corpus.push_back(ds.samples[i].report);
    if (corpus.empty()) throw DataError("no text available to build a vocabulary");
    return Vocabulary::build(corpus, cfg.min_freq);
}

inline void check_tags(const LoadedDataset& ds, const TrainConfig& cfg) {
    if (ds.tag_names.size() != cfg.n_tags)
        throw ConfigError("config says n_tags=" + std::to_string(cfg.n_tags) +
                          " but the dataset defines " + std::to_string(ds.tag_names.size()) +
                          " tags");
}

// Adam moments ride along in the checkpoint as flat tensors so a resumed run
// continues the exact trajectory.
inline void store_opt(Checkpoint& ckpt, Adam& opt, const std::string& group) {
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        ckpt.tensors.emplace("opt." + group + ".m." + std::to_string(i),
                             Tensor::from({m[i].size()}, m[i]));
        ckpt.tensors.emplace("opt." + group + ".v." + std::to_string(i),
                             Tensor::from({v[i].size()}, v[i]));
    }
    ckpt.config["opt"][group] = opt.step_count();
}

inline void restore_opt(const Checkpoint& ckpt, Adam& opt, const std::string& group) {
    if (!ckpt.config.contains("opt") || !ckpt.config["opt"].contains(group))
        throw DataError("checkpoint has no optimizer state for group '" + group + "'");
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (auto* slot : {&m[i], &v[i]}) {
            const std::string name = "opt." + group + (slot == &m[i] ? ".m." : ".v.") +
                                     std::to_string(i);
            auto it = ckpt.tensors.find(name);
            if (it == ckpt.tensors.end())
                throw DataError("checkpoint is missing optimizer tensor '" + name + "'");
            if (it->second.numel() != slot->size())
                throw DataError("optimizer tensor '" + name + "' does not match the model");
            auto vals = it->second.values();
            slot->assign(vals.begin(), vals.end());
        }
    }
    opt.set_step_count(ckpt.config["opt"][group].get<std::uint64_t>());
}

// Phase checkpoints also carry the dataset's tag names so downstream tools
// (inspect-graph, evaluate) can label outputs without the dataset directory.
inline Checkpoint phase_snapshot(const AsgkModel& m, const LoadedDataset& ds,
                                 const std::string& phase, nlohmann::json extra = {}) {
    if (extra.is_null()) extra = nlohmann::json::object();
    extra["tags"] = ds.tag_names;
    return snapshot(m, phase, std::move(extra));
}

struct TagAucSummary {
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t usable = 0;
    std::size_t skipped = 0; // single-class tags in this split
};

// scores/labels row-major [n x n_tags]; tags with one class are skipped.
inline TagAucSummary mean_tag_auc(const std::vector<double>& scores,
                                  const std::vector<std::uint8_t>& labels,
                                  std::size_t n_tags) {
    if (n_tags == 0 || scores.size() != labels.size() || scores.size() % n_tags != 0)
        throw ShapeError("mean_tag_auc expects row-major [n x n_tags] inputs");
    const std::size_t n = scores.size() / n_tags;
    TagAucSummary out;
    double acc = 0.0;
    for (std::size_t t = 0; t < n_tags; ++t) {
        std::vector<double> s(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = scores[i * n_tags + t];
            y[i] = labels[i * n_tags + t];
        }
        try {
            acc += auc(s, y);
            ++out.usable;
        } catch (const UndefinedMetricError&) {
            ++out.skipped;
        }
    }
    if (out.usable > 0) out.mean = acc / static_cast<double>(out.usable);
    return out;
}

// Training crops come from heat maps refreshed at epoch boundaries (live
// mode) or pinned to the phase-start net (freeze_heatmap). Epoch-boundary
// refresh keeps resumed runs identical to uninterrupted ones.
inline std::vector<Tensor> refresh_crops(const AsgkModel& m, const LoadedDataset& ds,
                                         const std::vector<std::size_t>& split) {
    NoGradGuard guard;
    std::vector<Tensor> crops(ds.samples.size());
    for (std::size_t i : split) {
        auto [f_c, f_g] = m.global_bb.forward(ds.samples[i].image);
        (void)f_g;
        Region r = extract_region(heatmap(f_c), m.cfg.tau);
        crops[i] = crop_resize(ds.samples[i].image, r, m.cfg.img_size);
    }
    return crops;
}

namespace detail {

inline std::size_t resume_epoch(const Checkpoint& ckpt) {
    if (!ckpt.config.contains("epoch"))
        throw DataError("checkpoint has no epoch marker; it is not resumable");
    return ckpt.config["epoch"].get<std::size_t>() + 1;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Phase 1: sentence autoencoding over the textbook (GRU -> graph -> decoder)
// ---------------------------------------------------------------------------

inline PhaseResult run_pretrain(TrainConfig cfg, const LoadedDataset& ds,
                                const std::filesystem::path& out_dir,
                                const std::string& resume = "", TrainHooks hooks = {}) {
    if (ds.textbook.empty())
        throw DataError("pretraining needs a textbook; the dataset directory has none");
    std::filesystem::create_directories(out_dir);
    PhaseResult res;
    res.checkpoint = out_dir / kPretrainCkpt;

    std::optional<Checkpoint> prev;
    std::size_t start_epoch = 0;
    if (!resume.empty()) {
        prev = load_checkpoint(resume);
        cfg = config_from_json(prev->config.at("train"));
        res.model = model_from_checkpoint(*prev);
        start_epoch = detail::resume_epoch(*prev);
    } else {
        validate(cfg);
        SeededRng rng(cfg.seed);
        res.model = AsgkModel::init(cfg, build_vocab(ds, cfg), rng);
    }

    std::vector<std::vector<std::size_t>> sent_ids;
    for (const std::string& s : ds.textbook)
        sent_ids.push_back(res.model.vocab.encode(s, cfg.max_len));
    std::vector<std::size_t> all(sent_ids.size());
    std::iota(all.begin(), all.end(), 0);

    Adam opt(res.model.encdec_parameters(), cfg.pretrain_lr);
    if (prev) restore_opt(*prev, opt, "encdec");

    JsonlLogger log(out_dir / "pretrain_log.jsonl", !resume.empty());
    std::size_t done = 0;
    for (std::size_t epoch = start_epoch; epoch < cfg.pretrain_epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(all, cfg.seed, kPretrainSalt, epoch);
        double sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            opt.zero_grad();
            Tensor total;
            for (std::size_t k = b; k < e; ++k) {
                Tensor l = pretrain_loss(res.model, sent_ids[order[k]]);
                total = total.defined() ? add(total, l) : l;
            }
            total = scale(total, 1.0 / static_cast<double>(e - b));
            backward(total);
            opt.step();
            sum += total.values()[0] * static_cast<double>(e - b);
        }
        const double mean_loss = sum / static_cast<double>(order.size());

        nlohmann::json entry{{"phase", "pretrain"},
                             {"epoch", epoch},
                             {"lm_loss", mean_loss},
                             {"sentences", order.size()}};
        res.log.push_back(entry);
        log.write(entry);
        if (hooks.echo)
            *hooks.echo << "[pretrain] epoch " << epoch + 1 << "/" << cfg.pretrain_epochs
                        << "  lm " << mean_loss << "\n";

        Checkpoint ck = phase_snapshot(res.model, ds, "pretrain", {{"epoch", epoch}});
        store_opt(ck, opt, "encdec");
        save_checkpoint(ck, res.checkpoint.string());

        if (hooks.stop_after && ++done >= hooks.stop_after) break;
    }
    if (!std::filesystem::exists(res.checkpoint)) {
        Checkpoint ck = phase_snapshot(res.model, ds, "pretrain");
        store_opt(ck, opt, "encdec");
        save_checkpoint(ck, res.checkpoint.string());
    }
    return res;
}

// ---------------------------------------------------------------------------
// Phase 2: tag classification through the saliency-guided branches
// ---------------------------------------------------------------------------

// Validation scores from the strongest available branch: fusion when the
// internal path is on, otherwise the global head.
inline std::pair<std::vector<double>, std::vector<std::uint8_t>> branch_val_scores(
    const AsgkModel& m, const LoadedDataset& ds, const std::vector<std::size_t>& split) {
    NoGradGuard guard;
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (std::size_t i : split) {
        const LoadedSample& s = ds.samples[i];
        VisualFeatures vf = visual_forward(m, s.image, m.cfg.use_internal);
        Tensor p = vf.has_region
                       ? sigmoid(affine(m.branch_heads.fusion_head, vf.f_f))
                       : sigmoid(affine(m.branch_heads.global_head, vf.f_g));
        auto vals = p.values();
        scores.insert(scores.end(), vals.begin(), vals.end());
        labels.insert(labels.end(), s.tags.begin(), s.tags.end());
    }
    return {std::move(scores), std::move(labels)};
}

inline PhaseResult run_backbone(TrainConfig cfg, const LoadedDataset& ds,
                                const std::filesystem::path& out_dir,
                                const std::string& resume = "", TrainHooks hooks = {}) {
    std::filesystem::create_directories(out_dir);
    PhaseResult res;
    res.checkpoint = out_dir / kBackboneBestCkpt;
    const std::filesystem::path last_path = out_dir / kBackboneLastCkpt;

    std::optional<Checkpoint> prev;
    std::size_t start_epoch = 0;
    bool have_best = false;
    double best_auc = 0.0;
    if (!resume.empty()) {
        prev = load_checkpoint(resume);
        cfg = config_from_json(prev->config.at("train"));
        res.model = model_from_checkpoint(*prev);
        start_epoch = detail::resume_epoch(*prev);
        if (prev->config.contains("best_auc")) {
            best_auc = prev->config["best_auc"].get<double>();
            have_best = true;
        }
    } else {
        validate(cfg);
        SeededRng rng(cfg.seed);
        res.model = AsgkModel::init(cfg, build_vocab(ds, cfg), rng);
    }
    check_tags(ds, cfg);

    Adam opt(res.model.visual_parameters(), cfg.backbone_lr(start_epoch));
    if (prev) restore_opt(*prev, opt, "visual");

    const bool internal = cfg.use_internal;
    std::vector<Tensor> crops;
    if (internal && cfg.freeze_heatmap) {
        if (prev) {
            // frozen crops belong to the phase-start net; rebuild it from the
            // seed so the resumed trajectory matches the uninterrupted one
            SeededRng rng(cfg.seed);
            AsgkModel start = AsgkModel::init(cfg, res.model.vocab, rng);
            crops = refresh_crops(start, ds, ds.train);
        } else {
            crops = refresh_crops(res.model, ds, ds.train);
        }
    }

    // Region-call accounting is phase-relative (pinning crops above does not
    // count) so logs are process-independent; the running value rides along in
    // the checkpoint to keep resumed logs exact.
    const std::size_t region_base = region_call_counter();
    std::size_t region_offset = 0;
    if (prev) region_offset = prev->config.value("region_calls", std::size_t{0});
    auto region_count = [&] { return region_offset + (region_call_counter() - region_base); };

    JsonlLogger log(out_dir / "backbone_log.jsonl", !resume.empty());
    std::size_t done = 0;
    for (std::size_t epoch = start_epoch; epoch < cfg.backbone_epochs; ++epoch) {
        opt.set_lr(cfg.backbone_lr(epoch));
        if (internal && !cfg.freeze_heatmap) crops = refresh_crops(res.model, ds, ds.train);

        const std::vector<std::size_t> order =
            epoch_order(ds.train, cfg.seed, kBackboneSalt, epoch);
        double sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            opt.zero_grad();
            Tensor total;
            for (std::size_t k = b; k < e; ++k) {
                const LoadedSample& s = ds.samples[order[k]];
                VisualFeatures vf = visual_forward(res.model, s.image, internal,
                                                   internal ? &crops[order[k]] : nullptr);
                Tensor l = branch_losses(res.model, vf, s.tags).total;
                total = total.defined() ? add(total, l) : l;
            }
            total = scale(total, 1.0 / static_cast<double>(e - b));
            backward(total);
            opt.step();
            sum += total.values()[0] * static_cast<double>(e - b);
        }
        const double mean_loss = sum / static_cast<double>(order.size());

        auto [scores, labels] = branch_val_scores(res.model, ds, ds.val);
        const TagAucSummary val = mean_tag_auc(scores, labels, cfg.n_tags);

        const bool better = !have_best || (std::isfinite(val.mean) && val.mean > best_auc);
        if (better) {
            best_auc = std::isfinite(val.mean) ? val.mean : 0.0;
            have_best = true;
            Checkpoint best = phase_snapshot(res.model, ds, "backbone",
                                             {{"epoch", epoch}, {"val_auc", val.mean}});
            save_checkpoint(best, res.checkpoint.string());
        }

        nlohmann::json entry{{"phase", "backbone"},
                             {"epoch", epoch},
                             {"lr", opt.lr()},
                             {"branch_loss", mean_loss},
                             {"val_auc", val.mean},
                             {"val_tags_skipped", val.skipped},
                             {"best_val_auc", best_auc},
                             {"region_calls", region_count()}};
        res.log.push_back(entry);
        log.write(entry);
        if (hooks.echo)
            *hooks.echo << "[backbone] epoch " << epoch + 1 << "/" << cfg.backbone_epochs
                        << "  loss " << mean_loss << "  val auc " << val.mean << "\n";

        Checkpoint last = phase_snapshot(res.model, ds, "backbone",
                                         {{"epoch", epoch},
                                          {"best_auc", best_auc},
                                          {"region_calls", region_count()}});
        store_opt(last, opt, "visual");
        save_checkpoint(last, last_path.string());

        if (hooks.stop_after && ++done >= hooks.stop_after) break;
    }
    if (!std::filesystem::exists(res.checkpoint))
        save_checkpoint(phase_snapshot(res.model, ds, "backbone"), res.checkpoint.string());
    res.best_val_auc = best_auc;
    return res;
}

// ---------------------------------------------------------------------------
// Phase 3: joint report generation + tag losses on top of the trained parts
// ---------------------------------------------------------------------------

inline PhaseResult run_joint(TrainConfig cfg, const LoadedDataset& ds,
                             const std::filesystem::path& out_dir,
                             const std::string& pretrain_ckpt,
                             const std::string& backbone_ckpt,
                             const std::string& resume = "", TrainHooks hooks = {}) {
    std::filesystem::create_directories(out_dir);
    PhaseResult res;
    res.checkpoint = out_dir / kJointCkpt;

    std::optional<Checkpoint> prev;
    std::size_t start_epoch = 0;
    std::string pre_path = pretrain_ckpt, bb_path = backbone_ckpt;

    auto build_start = [&]() {
        validate(cfg);
        if (cfg.use_external && pre_path.empty())
            throw ConfigError(
                "use_external is on but no pretrain checkpoint was given (pass one or "
                "disable the external signal)");
        Vocabulary vocab;
        std::optional<Checkpoint> pre;
        if (cfg.use_external) {
            pre = load_checkpoint(pre_path);
            if (!pre->config.contains("vocab"))
                throw DataError("pretrain checkpoint carries no vocabulary");
            vocab = Vocabulary::from_tokens(
                pre->config["vocab"].get<std::vector<std::string>>());
        } else {
            vocab = build_vocab(ds, cfg);
        }
        SeededRng rng(cfg.seed);
        AsgkModel m = AsgkModel::init(cfg, std::move(vocab), rng);
        if (pre) restore_group(m, *pre, m.named_encdec());
        if (!bb_path.empty()) {
            Checkpoint bb = load_checkpoint(bb_path);
            restore_group(m, bb, m.named_visual());
        }
        return m;
    };

    if (!resume.empty()) {
        prev = load_checkpoint(resume);
        cfg = config_from_json(prev->config.at("train"));
        res.model = model_from_checkpoint(*prev);
        start_epoch = detail::resume_epoch(*prev);
        // input paths recorded at launch carry over unless overridden
        if (pre_path.empty() && prev->config.contains("pretrain_ckpt"))
            pre_path = prev->config["pretrain_ckpt"].get<std::string>();
        if (bb_path.empty() && prev->config.contains("backbone_ckpt"))
            bb_path = prev->config["backbone_ckpt"].get<std::string>();
    } else {
        res.model = build_start();
    }
    check_tags(ds, cfg);

    std::vector<std::vector<std::size_t>> report_ids(ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        report_ids[i] = res.model.vocab.encode(ds.samples[i].report, cfg.max_len);

    Adam opt_vis(res.model.visual_parameters(), cfg.joint_lr_visual);
    Adam opt_enc(res.model.encdec_parameters(), cfg.joint_lr_encdec);
    if (prev) {
        restore_opt(*prev, opt_vis, "visual");
        restore_opt(*prev, opt_enc, "encdec");
    }

    const bool internal = cfg.use_internal;
    std::vector<Tensor> crops;
    if (internal && cfg.freeze_heatmap)
        crops = prev ? refresh_crops(build_start(), ds, ds.train)
                     : refresh_crops(res.model, ds, ds.train);

    // see run_backbone: phase-relative counts survive interruption
    const std::size_t region_base = region_call_counter();
    std::size_t region_offset = 0;
    if (prev) region_offset = prev->config.value("region_calls", std::size_t{0});
    auto region_count = [&] { return region_offset + (region_call_counter() - region_base); };

    JsonlLogger log(out_dir / "joint_log.jsonl", !resume.empty());
    std::size_t done = 0;
    std::size_t last_epoch = start_epoch;
    bool finished = cfg.joint_epochs > 0 && start_epoch >= cfg.joint_epochs;
    for (std::size_t epoch = start_epoch; epoch < cfg.joint_epochs; ++epoch) {
        last_epoch = epoch;
        if (internal && !cfg.freeze_heatmap) crops = refresh_crops(res.model, ds, ds.train);

        const std::vector<std::size_t> order = epoch_order(ds.train, cfg.seed, kJointSalt, epoch);
        double sum_total = 0.0, sum_lm = 0.0, sum_tag = 0.0, sum_branch = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            opt_vis.zero_grad();
            opt_enc.zero_grad();
            Tensor total;
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t i = order[k];
                JointLosses jl = joint_forward(res.model, ds.samples[i].image, report_ids[i],
                                               ds.samples[i].tags,
                                               internal ? &crops[i] : nullptr);
                sum_lm += jl.lm.values()[0];
                sum_tag += jl.tag.values()[0];
                sum_branch += jl.branch.values()[0];
                total = total.defined() ? add(total, jl.total) : jl.total;
            }
            total = scale(total, 1.0 / static_cast<double>(e - b));
            backward(total);
            opt_vis.step();
            opt_enc.step();
            sum_total += total.values()[0] * static_cast<double>(e - b);
        }
        const double n_train = static_cast<double>(order.size());

        // validation pass: losses plus readout-based tag AUC
        double val_lm = 0.0, val_tag = 0.0;
        std::vector<double> val_scores;
        std::vector<std::uint8_t> val_labels;
        {
            NoGradGuard guard;
            for (std::size_t i : ds.val) {
                JointLosses jl = joint_forward(res.model, ds.samples[i].image, report_ids[i],
                                               ds.samples[i].tags);
                val_lm += jl.lm.values()[0];
                val_tag += jl.tag.values()[0];
                // val AUC tracks the branch heads, same scores generation reports
                Tensor p = jl.vf.has_region
                               ? sigmoid(affine(res.model.branch_heads.fusion_head, jl.vf.f_f))
                               : sigmoid(affine(res.model.branch_heads.global_head, jl.vf.f_g));
                auto probs = p.values();
                val_scores.insert(val_scores.end(), probs.begin(), probs.end());
                val_labels.insert(val_labels.end(), ds.samples[i].tags.begin(),
                                  ds.samples[i].tags.end());
            }
        }
        const double n_val = static_cast<double>(ds.val.size());
        const TagAucSummary val_auc = mean_tag_auc(val_scores, val_labels, cfg.n_tags);

        nlohmann::json entry{{"phase", "joint"},
                             {"epoch", epoch},
                             {"total", sum_total / n_train},
                             {"lm_loss", sum_lm / n_train},
                             {"tag_loss", sum_tag / n_train},
                             {"branch_loss", sum_branch / n_train},
                             {"val_lm", val_lm / n_val},
                             {"val_tag", val_tag / n_val},
                             {"val_auc", val_auc.mean},
                             {"region_calls", region_count()}};
        res.log.push_back(entry);
        log.write(entry);
        if (hooks.echo)
            *hooks.echo << "[joint] epoch " << epoch + 1 << "/" << cfg.joint_epochs
                        << "  total " << sum_total / n_train << "  val lm " << val_lm / n_val
                        << "  val auc " << val_auc.mean << "\n";

        Checkpoint ck = phase_snapshot(res.model, ds, "joint",
                                       {{"epoch", epoch},
                                        {"pretrain_ckpt", pre_path},
                                        {"backbone_ckpt", bb_path},
                                        {"region_calls", region_count()}});
        store_opt(ck, opt_vis, "visual");
        store_opt(ck, opt_enc, "encdec");
        save_checkpoint(ck, res.checkpoint.string());

        if (epoch + 1 == cfg.joint_epochs) finished = true;
        if (hooks.stop_after && ++done >= hooks.stop_after) break;
    }

    if (prev && prev->config.contains("final_metrics")) {
        // resuming a finished run: keep its evaluation instead of redoing it
        res.final_metrics = prev->config["final_metrics"];
        if (res.final_metrics.contains("val_auc_mean") &&
            res.final_metrics["val_auc_mean"].is_number())
            res.best_val_auc = res.final_metrics["val_auc_mean"].get<double>();
        finished = false;
    }
    if (finished && ds.val.size() >= 2) {
        std::vector<std::string> cands;
        std::vector<RefSet> refs;
        std::vector<double> tag_scores;
        std::vector<std::uint8_t> tag_labels;
        for (std::size_t i : ds.val) {
            GeneratedReport g = generate_for_image(res.model, ds.samples[i].image);
            cands.push_back(g.text);
            refs.push_back({ds.samples[i].report});
            tag_scores.insert(tag_scores.end(), g.tag_probs.begin(), g.tag_probs.end());
            tag_labels.insert(tag_labels.end(), ds.samples[i].tags.begin(),
                              ds.samples[i].tags.end());
        }
        EvalReport rep = evaluate_corpus(cands, refs, tag_scores, tag_labels, cfg.n_tags);
        res.final_metrics = {{"val_bleu", rep.bleu},
                             {"val_rouge_l", rep.rouge_l},
                             {"val_cider_d", rep.cider_d},
                             {"val_cider_degenerate", rep.cider_degenerate},
                             {"val_auc_mean", rep.auc_mean},
                             {"val_samples", rep.n_samples}};
        nlohmann::json entry = res.final_metrics;
        entry["phase"] = "joint";
        entry["final"] = true;
        res.log.push_back(entry);
        log.write(entry);

        Checkpoint ck = phase_snapshot(res.model, ds, "joint",
                                       {{"epoch", last_epoch},
                                        {"pretrain_ckpt", pre_path},
                                        {"backbone_ckpt", bb_path},
                                        {"final_metrics", res.final_metrics}});
        store_opt(ck, opt_vis, "visual");
        store_opt(ck, opt_enc, "encdec");
        save_checkpoint(ck, res.checkpoint.string());
        res.best_val_auc = rep.auc_mean;
    }
    if (!std::filesystem::exists(res.checkpoint)) {
        Checkpoint ck = phase_snapshot(res.model, ds, "joint");
        store_opt(ck, opt_vis, "visual");
        store_opt(ck, opt_enc, "encdec");
        save_checkpoint(ck, res.checkpoint.string());
    }
    return res;
}

} // namespace asgk
