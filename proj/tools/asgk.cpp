// asgk: synthetic-report pipeline driver.
//
// Subcommands: synth, pretrain, train-backbone, train, generate, evaluate,
// extract-region, inspect-graph. Exit codes: 0 ok, 2 config error, 3 data
// error, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "asgk/image.hpp"
#include "asgk/train.hpp"

namespace {

using namespace asgk;
namespace fs = std::filesystem;
using nlohmann::json;

enum class Phase { pretrain, backbone, joint };

// Shared options for the three training subcommands. Option pointers let us
// apply CLI values over the config file only when actually given.
struct TrainCli {
    std::string config_path, data, out = "out", resume;
    std::string pretrain_ckpt, backbone_ckpt; // joint phase only
    std::size_t stop_after = 0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0, batch_size = 0;
    double tau = 0.0;
    bool no_internal = false, no_external = false, no_focal = false, freeze = false;
    CLI::Option *o_seed = nullptr, *o_epochs = nullptr, *o_batch = nullptr, *o_tau = nullptr;
};

void add_train_opts(CLI::App* cmd, TrainCli& t) {
    cmd->add_option("--config", t.config_path, "JSON config file (flat TrainConfig keys)");
    cmd->add_option("--data", t.data, "dataset directory")->required();
    cmd->add_option("--out", t.out, "artifact directory");
    t.o_seed = cmd->add_option("--seed", t.seed, "rng seed");
    t.o_epochs = cmd->add_option("--epochs", t.epochs, "epoch count for this phase");
    t.o_batch = cmd->add_option("--batch-size", t.batch_size, "samples per step");
    t.o_tau = cmd->add_option("--tau", t.tau, "saliency threshold");
    cmd->add_flag("--no-internal", t.no_internal, "disable the internal (region) signal");
    cmd->add_flag("--no-external", t.no_external, "disable the external (textbook) signal");
    cmd->add_flag("--no-focal", t.no_focal, "plain BCE instead of focal branch losses");
    cmd->add_flag("--freeze-heatmap", t.freeze,
                  "pin region crops to the phase-start heat maps");
    cmd->add_option("--resume", t.resume, "checkpoint to continue from");
    cmd->add_option("--stop-after", t.stop_after,
                    "stop this invocation after N epochs (resume later)");
}

TrainConfig resolve_config(const TrainCli& t, Phase phase) {
    TrainConfig cfg = t.config_path.empty() ? TrainConfig{} : load_config_file(t.config_path);
    if (t.o_seed->count()) cfg.seed = t.seed;
    if (t.o_batch->count()) cfg.batch_size = t.batch_size;
    if (t.o_tau->count()) cfg.tau = t.tau;
    if (t.o_epochs->count()) {
        if (phase == Phase::pretrain) cfg.pretrain_epochs = t.epochs;
        if (phase == Phase::backbone) cfg.backbone_epochs = t.epochs;
        if (phase == Phase::joint) cfg.joint_epochs = t.epochs;
    }
    if (t.no_internal) cfg.use_internal = false;
    if (t.no_external) cfg.use_external = false;
    if (t.no_focal) cfg.use_focal = false;
    if (t.freeze) cfg.freeze_heatmap = true;
    validate(cfg);
    return cfg;
}

void echo_config(const TrainConfig& cfg, const TrainCli& t) {
    // On resume the stored config wins, so echo that one.
    json j;
    if (!t.resume.empty()) {
        j["effective_config"] = load_checkpoint(t.resume).config.at("train");
        j["resuming"] = t.resume;
    } else {
        j["effective_config"] = to_json(cfg);
    }
    std::cout << j.dump() << "\n";
}

std::vector<std::size_t> split_ids(const LoadedDataset& ds, const std::string& split) {
    if (split == "train") return ds.train;
    if (split == "val") return ds.val;
    if (split == "test") return ds.test;
    if (split == "all") {
        std::vector<std::size_t> all(ds.samples.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    throw ConfigError("split must be one of train|val|test|all, got '" + split + "'");
}

std::map<std::string, std::string> read_tsv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path + " line " + std::to_string(ln) + ": expected id<TAB>text");
        const std::string id = line.substr(0, tab);
        if (!out.emplace(id, line.substr(tab + 1)).second)
            throw DataError(path + " line " + std::to_string(ln) + ": duplicate id '" + id +
                            "'");
    }
    return out;
}

struct RefData {
    std::map<std::string, std::string> text;
    std::map<std::string, std::vector<std::uint8_t>> tags; // empty unless dataset refs
    std::size_t n_tags = 0;
};

RefData load_refs(const std::string& path, const std::string& split) {
    RefData rd;
    if (fs::is_directory(path)) {
        LoadedDataset ds = load_dataset(path);
        rd.n_tags = ds.tag_names.size();
        for (std::size_t i : split_ids(ds, split)) {
            rd.text[ds.samples[i].id] = ds.samples[i].report;
            rd.tags[ds.samples[i].id] = ds.samples[i].tags;
        }
        return rd;
    }
    if (path.ends_with(".jsonl")) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open " + path);
        std::string line;
        std::size_t ln = 0;
        while (std::getline(is, line)) {
            ++ln;
            if (line.empty()) continue;
            json rec = json::parse(line, nullptr, false);
            if (rec.is_discarded() || !rec.is_object() || !rec.contains("id"))
                throw DataError(path + " line " + std::to_string(ln) +
                                ": expected a JSON object with an id");
            const char* key = rec.contains("report") ? "report" : "text";
            if (!rec.contains(key))
                throw DataError(path + " line " + std::to_string(ln) +
                                ": record has neither report nor text");
            rd.text[rec["id"].get<std::string>()] = rec[key].get<std::string>();
        }
        return rd;
    }
    rd.text = read_tsv(path);
    return rd;
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    const std::size_t shown = std::min<std::size_t>(ids.size(), 10);
    for (std::size_t i = 0; i < shown; ++i) out += (i ? ", " : "") + ids[i];
    if (ids.size() > shown) out += ", ... (" + std::to_string(ids.size()) + " total)";
    return out;
}

json report_to_json(const EvalReport& rep) {
    json j;
    j["bleu"] = rep.bleu;
    j["rouge_l"] = rep.rouge_l;
    j["cider_d"] = rep.cider_d;
    j["cider_d_x100"] = rep.cider_d * 100.0; // the scale headline tables use
    j["cider_degenerate"] = rep.cider_degenerate;
    j["n_samples"] = rep.n_samples;
    j["n_references"] = rep.n_references;
    if (!rep.auc_per_tag.empty()) {
        j["auc_mean"] = rep.auc_mean;
        j["auc_per_tag"] = rep.auc_per_tag; // NaN -> null where undefined
        j["skipped_tags"] = rep.skipped_tags;
    }
    return j;
}

void print_table(std::ostream& os, const EvalReport& rep) {
    char buf[128];
    auto row = [&](const char* name, double v) {
        std::snprintf(buf, sizeof buf, "%-14s %8.4f", name, v);
        os << buf << "\n";
    };
    os << "metric              value\n";
    os << "------------------  -----\n";
    row("BLEU-1", rep.bleu[0]);
    row("BLEU-2", rep.bleu[1]);
    row("BLEU-3", rep.bleu[2]);
    row("BLEU-4", rep.bleu[3]);
    row("ROUGE-L", rep.rouge_l);
    std::snprintf(buf, sizeof buf, "%-14s %8.4f  (x100: %.2f)%s", "CIDEr-D", rep.cider_d,
                  rep.cider_d * 100.0,
                  rep.cider_degenerate ? "  [degenerate references]" : "");
    os << buf << "\n";
    if (!rep.auc_per_tag.empty()) {
        row("tag AUC mean", rep.auc_mean);
        if (!rep.skipped_tags.empty()) {
            os << "  (" << rep.skipped_tags.size() << " single-class tags skipped:";
            for (std::size_t t : rep.skipped_tags) os << " " << t;
            os << ")\n";
        }
    }
    os << "samples: " << rep.n_samples << "  references: " << rep.n_references << "\n";
}

std::vector<std::string> tag_names_from(const Checkpoint& ck, std::size_t n_tags) {
    if (ck.config.contains("tags")) {
        auto names = ck.config["tags"].get<std::vector<std::string>>();
        if (names.size() == n_tags) return names;
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n_tags; ++i) names.push_back("tag" + std::to_string(i));
    return names;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"auxiliary-signal-guided report generation pipeline"};
    app.require_subcommand(1);

    // ---- synth ----
    SynthConfig scfg;
    std::string synth_out = "data";
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    synth->add_option("--n", scfg.count, "sample count (7:1:2 split)");
    synth->add_option("--img-size", scfg.img_size, "square image side");
    synth->add_option("--n-tags", scfg.n_tags, "tag vocabulary size");
    synth->add_option("--abnormal-rate", scfg.abnormal_rate, "fraction with a planted glyph");
    synth->add_option("--second-glyph-rate", scfg.second_glyph_rate,
                      "chance an abnormal sample gets two glyphs");
    synth->add_option("--contrast", scfg.contrast, "guaranteed disk mean-contrast margin");
    synth->add_option("--seed", scfg.seed, "rng seed");
    synth->add_option("--out", synth_out, "output directory");
    synth->callback([&]() {
        validate(scfg);
        SynthDataset ds = make_dataset(scfg);
        write_dataset(ds, synth_out);
        json echo{{"command", "synth"},
                  {"out", synth_out},
                  {"count", scfg.count},
                  {"seed", scfg.seed},
                  {"img_size", scfg.img_size},
                  {"n_tags", scfg.n_tags},
                  {"splits",
                   {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}}};
        std::cout << echo.dump() << "\n";
    });

    // ---- pretrain ----
    TrainCli pre;
    auto* pretrain = app.add_subcommand("pretrain", "phase 1: textbook sentence autoencoding");
    add_train_opts(pretrain, pre);
    pretrain->callback([&]() {
        LoadedDataset ds = load_dataset(pre.data);
        TrainConfig cfg = resolve_config(pre, Phase::pretrain);
        echo_config(cfg, pre);
        TrainHooks hooks{&std::cout, pre.stop_after};
        PhaseResult r = run_pretrain(cfg, ds, pre.out, pre.resume, hooks);
        std::cout << json{{"checkpoint", r.checkpoint.string()}}.dump() << "\n";
    });

    // ---- train-backbone ----
    TrainCli bb;
    auto* backbone =
        app.add_subcommand("train-backbone", "phase 2: branch tag classification");
    add_train_opts(backbone, bb);
    backbone->callback([&]() {
        LoadedDataset ds = load_dataset(bb.data);
        TrainConfig cfg = resolve_config(bb, Phase::backbone);
        echo_config(cfg, bb);
        TrainHooks hooks{&std::cout, bb.stop_after};
        PhaseResult r = run_backbone(cfg, ds, bb.out, bb.resume, hooks);
        std::cout << json{{"checkpoint", r.checkpoint.string()},
                          {"best_val_auc", r.best_val_auc}}
                         .dump()
                  << "\n";
    });

    // ---- train (joint) ----
    TrainCli jt;
    auto* train = app.add_subcommand("train", "phase 3: joint report + tag training");
    add_train_opts(train, jt);
    train->add_option("--pretrain", jt.pretrain_ckpt, "phase-1 checkpoint");
    train->add_option("--backbone", jt.backbone_ckpt, "phase-2 checkpoint");
    train->callback([&]() {
        LoadedDataset ds = load_dataset(jt.data);
        TrainConfig cfg = resolve_config(jt, Phase::joint);
        echo_config(cfg, jt);
        TrainHooks hooks{&std::cout, jt.stop_after};
        PhaseResult r = run_joint(cfg, ds, jt.out, jt.pretrain_ckpt, jt.backbone_ckpt,
                                  jt.resume, hooks);
        json done{{"checkpoint", r.checkpoint.string()}};
        if (!r.final_metrics.is_null()) done["final_metrics"] = r.final_metrics;
        std::cout << done.dump() << "\n";
    });

    // ---- generate ----
    std::string gen_ckpt, gen_data, gen_split = "test", gen_out = "out", gen_ids;
    auto* gen = app.add_subcommand("generate", "greedy report generation for a split");
    gen->add_option("--ckpt", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--data", gen_data, "dataset directory")->required();
    gen->add_option("--split", gen_split, "train|val|test|all");
    gen->add_option("--ids", gen_ids, "comma-separated sample ids instead of a split");
    gen->add_option("--out", gen_out, "output directory");
    gen->callback([&]() {
        Checkpoint ck = load_checkpoint(gen_ckpt);
        AsgkModel m = model_from_checkpoint(ck);
        LoadedDataset ds = load_dataset(gen_data);
        std::vector<std::size_t> ids;
        if (!gen_ids.empty()) {
            std::map<std::string, std::size_t> by_id;
            for (std::size_t i = 0; i < ds.samples.size(); ++i)
                by_id[ds.samples[i].id] = i;
            std::vector<std::string> missing;
            for (std::size_t p = 0; p < gen_ids.size();) {
                std::size_t q = gen_ids.find(',', p);
                if (q == std::string::npos) q = gen_ids.size();
                const std::string id = gen_ids.substr(p, q - p);
                auto it = by_id.find(id);
                if (it == by_id.end()) missing.push_back(id);
                else ids.push_back(it->second);
                p = q + 1;
            }
            if (!missing.empty())
                throw DataError("ids not in dataset: " + join_ids(missing));
        } else {
            ids = split_ids(ds, gen_split);
        }
        fs::create_directories(gen_out);
        const fs::path tsv_path = fs::path(gen_out) / "generated.tsv";
        const fs::path score_path = fs::path(gen_out) / "tag_scores.jsonl";
        std::ofstream tsv(tsv_path);
        std::ofstream sc(score_path);
        if (!tsv || !sc) throw DataError("cannot write under " + gen_out);
        for (std::size_t i : ids) {
            GeneratedReport g = generate_for_image(m, ds.samples[i].image);
            tsv << ds.samples[i].id << '\t' << g.text << '\n';
            sc << json{{"id", ds.samples[i].id}, {"scores", g.tag_probs}}.dump() << '\n';
        }
        json meta{{"checkpoint", gen_ckpt},
                  {"data", gen_data},
                  {"split", gen_ids.empty() ? gen_split : "ids"},
                  {"n", ids.size()},
                  {"phase", ck.config.value("phase", "")},
                  {"effective_config", to_json(m.cfg)}};
        std::ofstream(fs::path(gen_out) / "generate_meta.json") << meta.dump(2) << "\n";
        std::cout << json{{"generated", tsv_path.string()},
                          {"tag_scores", score_path.string()},
                          {"n", ids.size()}}
                         .dump()
                  << "\n";
    });

    // ---- evaluate ----
    std::string ev_cands, ev_refs, ev_scores, ev_split = "test", ev_out = "out";
    auto* ev = app.add_subcommand("evaluate", "score candidates against references");
    ev->add_option("--cands", ev_cands, "candidate TSV (id<TAB>text)")->required();
    ev->add_option("--refs", ev_refs, "reference TSV/JSONL or dataset directory")->required();
    ev->add_option("--tag-scores", ev_scores, "tag-score JSONL from generate");
    ev->add_option("--split", ev_split, "split when --refs is a dataset directory");
    ev->add_option("--out", ev_out, "output directory");
    ev->callback([&]() {
        std::map<std::string, std::string> cands = read_tsv(ev_cands);
        RefData refs = load_refs(ev_refs, ev_split);

        std::vector<std::string> miss_ref, miss_cand;
        for (const auto& [id, _] : cands)
            if (!refs.text.count(id)) miss_ref.push_back(id);
        for (const auto& [id, _] : refs.text)
            if (!cands.count(id)) miss_cand.push_back(id);
        if (!miss_ref.empty() || !miss_cand.empty())
            throw DataError("candidate/reference ids do not align; missing in references: [" +
                            join_ids(miss_ref) + "] missing in candidates: [" +
                            join_ids(miss_cand) + "]");

        std::vector<std::string> order;
        for (const auto& [id, _] : cands) order.push_back(id); // map order: sorted by id
        std::vector<std::string> cand_v;
        std::vector<RefSet> ref_v;
        for (const std::string& id : order) {
            cand_v.push_back(cands.at(id));
            ref_v.push_back({refs.text.at(id)});
        }

        std::vector<double> tag_scores;
        std::vector<std::uint8_t> tag_labels;
        std::size_t n_tags = 0;
        if (!ev_scores.empty()) {
            if (refs.tags.empty())
                throw DataError(
                    "--tag-scores needs dataset references (labels come from the dataset)");
            std::map<std::string, std::vector<double>> scores;
            std::ifstream is(ev_scores);
            if (!is) throw DataError("cannot open " + ev_scores);
            std::string line;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                json rec = json::parse(line, nullptr, false);
                if (rec.is_discarded() || !rec.contains("id") || !rec.contains("scores"))
                    throw DataError(ev_scores + ": each line needs {id, scores}");
                scores[rec["id"].get<std::string>()] =
                    rec["scores"].get<std::vector<double>>();
            }
            std::vector<std::string> missing;
            for (const std::string& id : order)
                if (!scores.count(id)) missing.push_back(id);
            if (!missing.empty())
                throw DataError("tag scores missing for ids: " + join_ids(missing));
            n_tags = refs.n_tags;
            for (const std::string& id : order) {
                const auto& s = scores.at(id);
                if (s.size() != n_tags)
                    throw DataError("tag score row for '" + id + "' has " +
                                    std::to_string(s.size()) + " entries, expected " +
                                    std::to_string(n_tags));
                tag_scores.insert(tag_scores.end(), s.begin(), s.end());
                const auto& y = refs.tags.at(id);
                tag_labels.insert(tag_labels.end(), y.begin(), y.end());
            }
        }

        EvalReport rep = evaluate_corpus(cand_v, ref_v, tag_scores, tag_labels, n_tags);
        json out = report_to_json(rep);
        out["inputs"] = {{"candidates", ev_cands},
                         {"references", ev_refs},
                         {"tag_scores", ev_scores},
                         {"split", ev_split}};
        fs::create_directories(ev_out);
        std::ofstream(fs::path(ev_out) / "eval.json") << out.dump(2) << "\n";
        std::ofstream table(fs::path(ev_out) / "eval.txt");
        print_table(table, rep);
        print_table(std::cout, rep);
        std::cout << json{{"report", (fs::path(ev_out) / "eval.json").string()}}.dump()
                  << "\n";
    });

    // ---- extract-region ----
    std::string xr_image, xr_ckpt, xr_config;
    std::uint64_t xr_seed = 0;
    double xr_tau = -1.0;
    auto* xr = app.add_subcommand("extract-region", "saliency bbox + mask for one image");
    xr->add_option("--image", xr_image, "PGM image")->required();
    xr->add_option("--ckpt", xr_ckpt, "backbone checkpoint (omit for an untrained net)");
    xr->add_option("--config", xr_config, "config for the untrained net");
    xr->add_option("--seed", xr_seed, "seed for the untrained net");
    xr->add_option("--tau", xr_tau, "saliency threshold override");
    xr->callback([&]() {
        Tensor img = load_pgm(xr_image);
        if (img.dim(0) != img.dim(1))
            throw DataError("extract-region needs a square image, got " +
                            std::to_string(img.dim(0)) + "x" + std::to_string(img.dim(1)));
        AsgkModel m;
        if (!xr_ckpt.empty()) {
            m = model_from_checkpoint(load_checkpoint(xr_ckpt));
        } else {
            TrainConfig cfg =
                xr_config.empty() ? TrainConfig{} : load_config_file(xr_config);
            cfg.seed = xr_seed;
            cfg.img_size = img.dim(0);
            validate(cfg);
            SeededRng rng(cfg.seed);
            m = AsgkModel::init(cfg, Vocabulary{}, rng);
        }
        if (img.dim(0) != m.cfg.img_size)
            throw DataError("image is " + std::to_string(img.dim(0)) +
                            "px but the checkpoint expects " +
                            std::to_string(m.cfg.img_size) + "px");
        const double tau = xr_tau >= 0.0 ? xr_tau : m.cfg.tau;
        if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");

        NoGradGuard guard;
        auto [f_c, f_g] = m.global_bb.forward(img);
        (void)f_g;
        Tensor h = heatmap(f_c);
        Region r = extract_region(h, tau);
        const std::size_t stride = m.cfg.img_size / r.grid;
        json out{{"bbox",
                  {r.r0 * stride, r.c0 * stride, (r.r1 + 1) * stride - 1,
                   (r.c1 + 1) * stride - 1}},
                 {"mask_rle", mask_rle(r.mask)},
                 {"fallback", r.fallback},
                 {"area", r.area},
                 {"grid", r.grid},
                 {"tau", tau}};
        std::cout << out.dump() << "\n";
    });

    // ---- inspect-graph ----
    std::string ig_ckpt, ig_image, ig_text;
    double ig_node_thr = 0.5, ig_edge_thr = 0.3;
    auto* ig = app.add_subcommand("inspect-graph", "tag-graph nodes and edges for one input");
    ig->add_option("--ckpt", ig_ckpt, "model checkpoint")->required();
    ig->add_option("--image", ig_image, "PGM image (visual signal)");
    ig->add_option("--text", ig_text, "sentence (external signal)");
    ig->add_option("--node-threshold", ig_node_thr, "display-only node cutoff");
    ig->add_option("--edge-threshold", ig_edge_thr, "display-only edge cutoff");
    ig->callback([&]() {
        if (ig_image.empty() == ig_text.empty())
            throw ConfigError("inspect-graph needs exactly one of --image or --text");
        Checkpoint ck = load_checkpoint(ig_ckpt);
        AsgkModel m = model_from_checkpoint(ck);
        NoGradGuard guard;
        TagGraph g;
        if (!ig_image.empty()) {
            Tensor img = load_pgm(ig_image);
            if (img.dim(0) != m.cfg.img_size || img.dim(1) != m.cfg.img_size)
                throw DataError("image size does not match the checkpoint");
            VisualFeatures vf = visual_forward(m, img, m.cfg.use_internal);
            g = m.graph.encode(vf.has_region ? vf.f_f : vf.f_g, SignalSource::visual);
        } else {
            std::vector<std::size_t> ids = m.vocab.encode(ig_text, m.cfg.max_len);
            Tensor h = encode_external_signal(ids, m.decoder.token_embedding(), m.gru);
            g = m.graph.encode(h, SignalSource::external);
        }
        const std::vector<std::string> names = tag_names_from(ck, m.cfg.n_tags);
        json tags = json::array();
        auto probs = g.node_probs.values();
        for (std::size_t i = 0; i < probs.size(); ++i)
            if (probs[i] > ig_node_thr) tags.push_back({{"name", names[i]}, {"prob", probs[i]}});
        json edges = json::array();
        auto ev_ = g.edges.values();
        const std::size_t n = g.edges.dim(0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (ev_[i * n + j] > ig_edge_thr) edges.push_back({i, j, ev_[i * n + j]});
        std::cout << json{{"tags", tags}, {"edges", edges}}.dump() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
