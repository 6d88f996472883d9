#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asgk/train.hpp"

namespace fs = std::filesystem;
using namespace asgk;
using Catch::Approx;
using nlohmann::json;

namespace {

fs::path tmp_root() {
    const char* env = std::getenv("ASGK_TEST_TMPDIR");
    fs::path p = env ? fs::path(env) : fs::temp_directory_path();
    p /= "train";
    fs::create_directories(p);
    return p;
}

fs::path fresh_dir(const std::string& name) {
    fs::path d = tmp_root() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

TrainConfig small_cfg() {
    TrainConfig cfg;
    cfg.seed = 11;
    cfg.img_size = 32;
    cfg.n_tags = 4;
    cfg.batch_size = 8;
    cfg.max_len = 48;
    cfg.min_freq = 1;
    cfg.d_model = 32;
    cfg.ffn_dim = 64;
    cfg.heads = 4;
    cfg.blocks = 3;
    cfg.d_graph = 16;
    cfg.graph_heads = 4;
    cfg.gru_hidden = 24;
    cfg.backbone_channels = {4, 8, 16};
    cfg.pretrain_epochs = 2;
    cfg.backbone_epochs = 2;
    cfg.joint_epochs = 2;
    return cfg;
}

const LoadedDataset& dataset() {
    static LoadedDataset ds = [] {
        SynthConfig sc;
        sc.count = 40;
        sc.img_size = 32;
        sc.n_tags = 4;
        sc.seed = 5;
        const fs::path dir = tmp_root() / "data";
        fs::remove_all(dir);
        write_dataset(make_dataset(sc), dir);
        return load_dataset(dir);
    }();
    return ds;
}

// 1-epoch phase-1/2 checkpoints shared by the joint-phase tests.
struct Stage {
    std::string pre, bb;
};
const Stage& stage() {
    static Stage st = [] {
        TrainConfig cfg = small_cfg();
        cfg.pretrain_epochs = 1;
        cfg.backbone_epochs = 1;
        const fs::path d = fresh_dir("stage");
        Stage s;
        s.pre = run_pretrain(cfg, dataset(), d).checkpoint.string();
        s.bb = run_backbone(cfg, dataset(), d).checkpoint.string();
        return s;
    }();
    return st;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<json> read_log(const fs::path& p) {
    std::ifstream is(p);
    REQUIRE(is.good());
    std::vector<json> out;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

} // namespace

TEST_CASE("epoch order is a pure function of seed, phase, and epoch") {
    std::vector<std::size_t> split;
    for (std::size_t i = 0; i < 16; ++i) split.push_back(i * 3);
    auto a = epoch_order(split, 7, kPretrainSalt, 3);
    REQUIRE(a == epoch_order(split, 7, kPretrainSalt, 3));
    REQUIRE(a != epoch_order(split, 7, kPretrainSalt, 4));
    REQUIRE(a != epoch_order(split, 8, kPretrainSalt, 3));
    REQUIRE(a != epoch_order(split, 7, kBackboneSalt, 3));
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(sorted == split);
}

TEST_CASE("mean_tag_auc averages defined tags and reports skips") {
    // 2 samples x 3 tags; tag 2 is single-class and must be skipped
    std::vector<double> scores{0.9, 0.2, 0.5, 0.1, 0.8, 0.6};
    std::vector<std::uint8_t> labels{1, 0, 0, 0, 1, 0};
    TagAucSummary s = mean_tag_auc(scores, labels, 3);
    REQUIRE(s.usable == 2);
    REQUIRE(s.skipped == 1);
    REQUIRE(s.mean == Approx(1.0));
    TagAucSummary empty = mean_tag_auc({0.5, 0.5}, {1, 1}, 1);
    REQUIRE(empty.usable == 0);
    REQUIRE_FALSE(std::isfinite(empty.mean));
}

TEST_CASE("pretraining reduces the sentence loss and is reproducible") {
    TrainConfig cfg = small_cfg();
    cfg.pretrain_epochs = 3;
    const fs::path d1 = fresh_dir("pre_a");
    PhaseResult r = run_pretrain(cfg, dataset(), d1);
    REQUIRE(fs::exists(r.checkpoint));
    REQUIRE(r.log.size() == 3);
    const double first = r.log.front().at("lm_loss").get<double>();
    const double last = r.log.back().at("lm_loss").get<double>();
    REQUIRE(last < first);
    REQUIRE(r.log.front().at("phase") == "pretrain");
    REQUIRE(r.log.front().at("sentences").get<std::size_t>() > 0);

    const fs::path d2 = fresh_dir("pre_b");
    run_pretrain(cfg, dataset(), d2);
    REQUIRE(slurp(d1 / "pretrain.ckpt") == slurp(d2 / "pretrain.ckpt"));
    REQUIRE(slurp(d1 / "pretrain_log.jsonl") == slurp(d2 / "pretrain_log.jsonl"));
}

TEST_CASE("pretraining rejects a dataset without a textbook") {
    LoadedDataset ds = dataset();
    ds.textbook.clear();
    REQUIRE_THROWS_AS(run_pretrain(small_cfg(), ds, fresh_dir("pre_empty")), DataError);
}

TEST_CASE("interrupted pretraining resumes to the bitwise-identical result") {
    TrainConfig cfg = small_cfg();
    const fs::path full = fresh_dir("pre_full");
    run_pretrain(cfg, dataset(), full);

    const fs::path split = fresh_dir("pre_split");
    TrainHooks stop;
    stop.stop_after = 1;
    run_pretrain(cfg, dataset(), split, "", stop);
    run_pretrain(cfg, dataset(), split, (split / "pretrain.ckpt").string());

    REQUIRE(slurp(full / "pretrain.ckpt") == slurp(split / "pretrain.ckpt"));
    REQUIRE(slurp(full / "pretrain_log.jsonl") == slurp(split / "pretrain_log.jsonl"));
}

TEST_CASE("a stale resume checkpoint without an epoch marker is refused") {
    const fs::path d = fresh_dir("pre_stale");
    TrainConfig cfg = small_cfg();
    SeededRng rng(cfg.seed);
    AsgkModel m = AsgkModel::init(cfg, build_vocab(dataset(), cfg), rng);
    Checkpoint ck = phase_snapshot(m, dataset(), "pretrain");
    save_checkpoint(ck, (d / "bare.ckpt").string());
    REQUIRE_THROWS_AS(run_pretrain(cfg, dataset(), d, (d / "bare.ckpt").string()),
                      DataError);
}

TEST_CASE("backbone training tracks the best validation auc") {
    TrainConfig cfg = small_cfg();
    const fs::path d = fresh_dir("bb_basic");
    PhaseResult r = run_backbone(cfg, dataset(), d);
    REQUIRE(fs::exists(d / "backbone.ckpt"));
    REQUIRE(fs::exists(d / "backbone_last.ckpt"));
    REQUIRE(r.log.size() == 2);
    REQUIRE(r.log.front().at("lr").get<double>() == Approx(cfg.backbone_lr_start));
    REQUIRE(std::isfinite(r.best_val_auc));
    REQUIRE(r.best_val_auc >= 0.0);
    REQUIRE(r.best_val_auc <= 1.0);

    Checkpoint best = load_checkpoint((d / "backbone.ckpt").string());
    REQUIRE(best.config.at("phase") == "backbone");
    REQUIRE(best.config.at("val_auc").get<double>() == Approx(r.best_val_auc));
    // best-checkpoint val_auc must equal the running max over the log
    double run_max = -1.0;
    for (const json& e : r.log) {
        const double v = e.at("val_auc").is_null() ? -1.0 : e.at("val_auc").get<double>();
        run_max = std::max(run_max, v);
    }
    REQUIRE(r.best_val_auc == Approx(run_max));
}

TEST_CASE("interrupted backbone training resumes bitwise") {
    TrainConfig cfg = small_cfg();
    const fs::path full = fresh_dir("bb_full");
    run_backbone(cfg, dataset(), full);

    const fs::path split = fresh_dir("bb_split");
    TrainHooks stop;
    stop.stop_after = 1;
    run_backbone(cfg, dataset(), split, "", stop);
    run_backbone(cfg, dataset(), split, (split / "backbone_last.ckpt").string());

    REQUIRE(slurp(full / "backbone_last.ckpt") == slurp(split / "backbone_last.ckpt"));
    REQUIRE(slurp(full / "backbone.ckpt") == slurp(split / "backbone.ckpt"));
    REQUIRE(slurp(full / "backbone_log.jsonl") == slurp(split / "backbone_log.jsonl"));
}

TEST_CASE("frozen heat maps skip the per-epoch crop refresh") {
    const std::size_t n_train = dataset().train.size();
    const std::size_t n_val = dataset().val.size();

    TrainConfig live_cfg = small_cfg();
    PhaseResult live = run_backbone(live_cfg, dataset(), fresh_dir("bb_live"));
    TrainConfig frozen_cfg = small_cfg();
    frozen_cfg.freeze_heatmap = true;
    PhaseResult froz = run_backbone(frozen_cfg, dataset(), fresh_dir("bb_frozen"));

    auto delta = [](const PhaseResult& r) {
        return r.log[1].at("region_calls").get<std::size_t>() -
               r.log[0].at("region_calls").get<std::size_t>();
    };
    // live: fresh crops for the train split + live extraction on the val pass
    REQUIRE(delta(live) == n_train + n_val);
    // frozen: crops were pinned before epoch 0, only the val pass extracts
    REQUIRE(delta(froz) == n_val);
    // different crops feed different gradients, so weights must diverge
    REQUIRE(slurp(tmp_root() / "bb_live" / "backbone_last.ckpt") !=
            slurp(tmp_root() / "bb_frozen" / "backbone_last.ckpt"));
}

TEST_CASE("frozen backbone training reconstructs phase-start crops on resume") {
    TrainConfig cfg = small_cfg();
    cfg.freeze_heatmap = true;
    const fs::path full = fresh_dir("bbf_full");
    run_backbone(cfg, dataset(), full);

    const fs::path split = fresh_dir("bbf_split");
    TrainHooks stop;
    stop.stop_after = 1;
    run_backbone(cfg, dataset(), split, "", stop);
    run_backbone(cfg, dataset(), split, (split / "backbone_last.ckpt").string());

    REQUIRE(slurp(full / "backbone_last.ckpt") == slurp(split / "backbone_last.ckpt"));
    REQUIRE(slurp(full / "backbone_log.jsonl") == slurp(split / "backbone_log.jsonl"));
}

TEST_CASE("joint training runs both signals and reports final metrics") {
    TrainConfig cfg = small_cfg();
    const fs::path d = fresh_dir("joint_basic");
    PhaseResult r = run_joint(cfg, dataset(), d, stage().pre, stage().bb);
    REQUIRE(fs::exists(d / "joint.ckpt"));
    // two epoch lines plus the final-evaluation line
    REQUIRE(r.log.size() == 3);
    REQUIRE(r.log.back().value("final", false));
    for (const char* k : {"total", "lm_loss", "tag_loss", "branch_loss", "val_lm"})
        REQUIRE(std::isfinite(r.log[0].at(k).get<double>()));

    REQUIRE_FALSE(r.final_metrics.is_null());
    REQUIRE(r.final_metrics.at("val_samples").get<std::size_t>() == dataset().val.size());
    REQUIRE(r.final_metrics.at("val_bleu").size() == 4);
    REQUIRE(r.final_metrics.contains("val_rouge_l"));
    REQUIRE(r.final_metrics.contains("val_cider_d"));

    Checkpoint ck = load_checkpoint((d / "joint.ckpt").string());
    REQUIRE(ck.config.at("phase") == "joint");
    REQUIRE(ck.config.at("pretrain_ckpt") == stage().pre);
    REQUIRE(ck.config.at("final_metrics").contains("val_bleu"));
}

TEST_CASE("joint training without a pretrain checkpoint needs the external signal off") {
    TrainConfig cfg = small_cfg();
    cfg.joint_epochs = 1;
    REQUIRE_THROWS_AS(run_joint(cfg, dataset(), fresh_dir("joint_nopre"), "", ""),
                      ConfigError);
    cfg.use_external = false;
    PhaseResult r = run_joint(cfg, dataset(), fresh_dir("joint_noext"), "", stage().bb);
    REQUIRE(r.log.size() == 2); // one epoch + final line
    REQUIRE(std::isfinite(r.log[0].at("total").get<double>()));
}

TEST_CASE("joint training without the internal signal never extracts regions") {
    TrainConfig cfg = small_cfg();
    cfg.joint_epochs = 1;
    cfg.use_internal = false;
    const std::size_t global_before = region_call_counter();
    PhaseResult r = run_joint(cfg, dataset(), fresh_dir("joint_noint"), stage().pre, "");
    REQUIRE(r.log[0].at("region_calls").get<std::size_t>() == 0);
    // the final generation pass runs with the model's own config, still no regions
    REQUIRE(region_call_counter() == global_before);
}

TEST_CASE("interrupted joint training resumes bitwise") {
    TrainConfig cfg = small_cfg();
    const fs::path full = fresh_dir("joint_full");
    run_joint(cfg, dataset(), full, stage().pre, stage().bb);

    const fs::path split = fresh_dir("joint_split");
    TrainHooks stop;
    stop.stop_after = 1;
    run_joint(cfg, dataset(), split, stage().pre, stage().bb, "", stop);
    // resume with empty phase-checkpoint args: the stored paths must be used
    run_joint(cfg, dataset(), split, "", "", (split / "joint.ckpt").string());

    REQUIRE(slurp(full / "joint.ckpt") == slurp(split / "joint.ckpt"));
    REQUIRE(slurp(full / "joint_log.jsonl") == slurp(split / "joint_log.jsonl"));
}

TEST_CASE("frozen joint training resumes bitwise via the stored start net") {
    TrainConfig cfg = small_cfg();
    cfg.freeze_heatmap = true;
    const fs::path full = fresh_dir("jf_full");
    run_joint(cfg, dataset(), full, stage().pre, stage().bb);

    const fs::path split = fresh_dir("jf_split");
    TrainHooks stop;
    stop.stop_after = 1;
    run_joint(cfg, dataset(), split, stage().pre, stage().bb, "", stop);
    run_joint(cfg, dataset(), split, "", "", (split / "joint.ckpt").string());

    REQUIRE(slurp(full / "joint.ckpt") == slurp(split / "joint.ckpt"));
    REQUIRE(slurp(full / "joint_log.jsonl") == slurp(split / "joint_log.jsonl"));
}

TEST_CASE("trainer rejects a dataset whose tag count disagrees with the config") {
    TrainConfig cfg = small_cfg();
    cfg.n_tags = 7;
    REQUIRE_THROWS_AS(run_backbone(cfg, dataset(), fresh_dir("bb_badtags")), ConfigError);
}
