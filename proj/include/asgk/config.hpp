#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asgk/errors.hpp"

namespace asgk {

// Flat-key configuration covering all three training phases, the model
// dimensions, and the ablation flags. File values are overridden by CLI
// flags; the effective config travels inside every checkpoint and output.
struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t img_size = 64;
    std::size_t n_tags = 12;
    std::size_t batch_size = 32;
    std::size_t max_len = 300;
    std::size_t min_freq = 3;

    double pretrain_lr = 5e-4;
    std::size_t pretrain_epochs = 30;

    double backbone_lr_start = 1e-2;
    double backbone_lr_decay = 0.1;
    std::size_t backbone_lr_every = 10;
    double backbone_lr_floor = 1e-5;
    std::size_t backbone_epochs = 50;

    double joint_lr_visual = 1e-5;
    double joint_lr_encdec = 5e-4;
    std::size_t joint_epochs = 30;

    std::size_t d_model = 64;
    std::size_t ffn_dim = 256;
    std::size_t heads = 4;
    std::size_t blocks = 3;
    std::size_t d_graph = 32;
    std::size_t graph_heads = 4;
    std::size_t gru_hidden = 128;
    std::vector<std::size_t> backbone_channels{8, 16, 32, 64};
    std::string fusion = "add";

    double tau = 0.7;
    double w_lm = 1.0;
    double w_tag = 1.0;
    double w_branch = 1.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    bool use_internal = true;
    bool use_external = true;
    bool use_focal = true;
    bool freeze_heatmap = false;

    // Step-decay schedule for the backbone phase.
    double backbone_lr(std::size_t epoch) const {
        const double lr =
            backbone_lr_start * std::pow(backbone_lr_decay,
                                         static_cast<double>(epoch / backbone_lr_every));
        return std::max(lr, backbone_lr_floor);
    }
};

inline void validate(const TrainConfig& cfg) {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(cfg.pretrain_lr, "pretrain_lr");
    positive(cfg.backbone_lr_start, "backbone_lr_start");
    positive(cfg.backbone_lr_floor, "backbone_lr_floor");
    positive(cfg.joint_lr_visual, "joint_lr_visual");
    positive(cfg.joint_lr_encdec, "joint_lr_encdec");
    if (!(cfg.backbone_lr_decay > 0.0 && cfg.backbone_lr_decay <= 1.0))
        throw ConfigError("backbone_lr_decay must lie in (0, 1]");
    if (cfg.backbone_lr_every == 0) throw ConfigError("backbone_lr_every must be >= 1");
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
    if (cfg.n_tags < 2) throw ConfigError("n_tags must be >= 2");
    if (cfg.max_len < 4) throw ConfigError("max_len must be >= 4");
    if (cfg.backbone_channels.empty())
        throw ConfigError("backbone_channels must list at least one stage");
    if (cfg.img_size >> cfg.backbone_channels.size() == 0)
        throw ConfigError("too many backbone stages for img_size");
    if (cfg.d_model % cfg.heads != 0)
        throw ConfigError("d_model must be divisible by heads");
    if (cfg.d_graph % cfg.graph_heads != 0)
        throw ConfigError("d_graph must be divisible by graph_heads");
    if (!(cfg.focal_gamma >= 0.0) || !(cfg.focal_alpha > 0.0 && cfg.focal_alpha <= 1.0))
        throw ConfigError("focal parameters out of range");
    if (cfg.min_freq == 0) throw ConfigError("min_freq must be >= 1");
    if (cfg.fusion != "add" && cfg.fusion != "mul" && cfg.fusion != "max")
        throw ConfigError("fusion must be add|mul|max");
}

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["img_size"] = c.img_size;
    j["n_tags"] = c.n_tags;
    j["batch_size"] = c.batch_size;
    j["max_len"] = c.max_len;
    j["min_freq"] = c.min_freq;
    j["pretrain_lr"] = c.pretrain_lr;
    j["pretrain_epochs"] = c.pretrain_epochs;
    j["backbone_lr_start"] = c.backbone_lr_start;
    j["backbone_lr_decay"] = c.backbone_lr_decay;
    j["backbone_lr_every"] = c.backbone_lr_every;
    j["backbone_lr_floor"] = c.backbone_lr_floor;
    j["backbone_epochs"] = c.backbone_epochs;
    j["joint_lr_visual"] = c.joint_lr_visual;
    j["joint_lr_encdec"] = c.joint_lr_encdec;
    j["joint_epochs"] = c.joint_epochs;
    j["d_model"] = c.d_model;
    j["ffn_dim"] = c.ffn_dim;
    j["heads"] = c.heads;
    j["blocks"] = c.blocks;
    j["d_graph"] = c.d_graph;
    j["graph_heads"] = c.graph_heads;
    j["gru_hidden"] = c.gru_hidden;
    j["backbone_channels"] = c.backbone_channels;
    j["fusion"] = c.fusion;
    j["tau"] = c.tau;
    j["w_lm"] = c.w_lm;
    j["w_tag"] = c.w_tag;
    j["w_branch"] = c.w_branch;
    j["focal_alpha"] = c.focal_alpha;
    j["focal_gamma"] = c.focal_gamma;
    j["use_internal"] = c.use_internal;
    j["use_external"] = c.use_external;
    j["use_focal"] = c.use_focal;
    j["freeze_heatmap"] = c.freeze_heatmap;
    return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    auto read = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("config key '") + key + "' has the wrong type");
        }
    };
    static const std::vector<std::string> known{
        "seed", "img_size", "n_tags", "batch_size", "max_len", "min_freq",
        "pretrain_lr", "pretrain_epochs", "backbone_lr_start", "backbone_lr_decay",
        "backbone_lr_every", "backbone_lr_floor", "backbone_epochs", "joint_lr_visual",
        "joint_lr_encdec", "joint_epochs", "d_model", "ffn_dim", "heads", "blocks",
        "d_graph", "graph_heads", "gru_hidden", "backbone_channels", "fusion", "tau",
        "w_lm", "w_tag", "w_branch", "focal_alpha", "focal_gamma", "use_internal",
        "use_external", "use_focal", "freeze_heatmap"};
    for (const auto& [key, val] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown config key '" + key + "'");
    read("seed", c.seed);
    read("img_size", c.img_size);
    read("n_tags", c.n_tags);
    read("batch_size", c.batch_size);
    read("max_len", c.max_len);
    read("min_freq", c.min_freq);
    read("pretrain_lr", c.pretrain_lr);
    read("pretrain_epochs", c.pretrain_epochs);
    read("backbone_lr_start", c.backbone_lr_start);
    read("backbone_lr_decay", c.backbone_lr_decay);
    read("backbone_lr_every", c.backbone_lr_every);
    read("backbone_lr_floor", c.backbone_lr_floor);
    read("backbone_epochs", c.backbone_epochs);
    read("joint_lr_visual", c.joint_lr_visual);
    read("joint_lr_encdec", c.joint_lr_encdec);
    read("joint_epochs", c.joint_epochs);
    read("d_model", c.d_model);
    read("ffn_dim", c.ffn_dim);
    read("heads", c.heads);
    read("blocks", c.blocks);
    read("d_graph", c.d_graph);
    read("graph_heads", c.graph_heads);
    read("gru_hidden", c.gru_hidden);
    read("backbone_channels", c.backbone_channels);
    read("fusion", c.fusion);
    read("tau", c.tau);
    read("w_lm", c.w_lm);
    read("w_tag", c.w_tag);
    read("w_branch", c.w_branch);
    read("focal_alpha", c.focal_alpha);
    read("focal_gamma", c.focal_gamma);
    read("use_internal", c.use_internal);
    read("use_external", c.use_external);
    read("use_focal", c.use_focal);
    read("freeze_heatmap", c.freeze_heatmap);
    return c;
}

inline TrainConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
    return config_from_json(j);
}

// The publication-scale preset (300-dim embeddings, 1024-unit GRU); the desk
// defaults above are what the test suite exercises.
inline TrainConfig paper_scale(TrainConfig c = {}) {
    c.d_model = 300;
    c.ffn_dim = 1024;
    c.gru_hidden = 1024;
    c.img_size = 224;
    c.backbone_channels = {16, 32, 64, 128, 256};
    return c;
}

} // namespace asgk
