#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "asgk/errors.hpp"
#include "asgk/image.hpp"
#include "asgk/rng.hpp"

namespace asgk {

// ---------------------------------------------------------------------------
// Tag bank: 8 localized "abnormal" glyph tags followed by 4 global "normal"
// tags (an exposure pair and a texture pair; exactly one of each pair is
// positive per sample).
// ---------------------------------------------------------------------------

constexpr std::size_t kTagBankSize = 12;
constexpr std::size_t kGlyphBankSize = 8;

inline const std::vector<std::string>& tag_names() {
    static const std::vector<std::string> names{
        "round opacity", "annular shadow", "horizontal band", "vertical band",
        "mosaic patch", "cross marking", "oblique streaks", "border rim",
        "low exposure", "high exposure", "smooth field", "grainy field"};
    return names;
}

// One canonical sentence per tag; reports are the fixed-order concatenation
// of these, so the tag set is recoverable from the text.
inline const std::vector<std::string>& report_templates() {
    static const std::vector<std::string> bank{
        "a round opacity is present in the study.",
        "an annular shadow is present in the study.",
        "a horizontal band crosses the field.",
        "a vertical band crosses the field.",
        "a mosaic patch is present in the study.",
        "a cross marking is present in the study.",
        "oblique streaks are present in the study.",
        "a border rim is present along the edge.",
        "the study shows low exposure.",
        "the study shows high exposure.",
        "the background is a smooth field.",
        "the background is a grainy field."};
    return bank;
}

inline const std::string& negative_sentence() {
    static const std::string s = "no focal abnormality is seen.";
    return s;
}

struct SynthConfig {
    std::size_t count = 200;
    std::size_t img_size = 64;
    std::size_t n_tags = kTagBankSize;
    double abnormal_rate = 0.45;     // keeps every glyph tag learnable at count=200
    double second_glyph_rate = 0.25; // chance an abnormal sample gets 2 glyphs
    double contrast = 0.25;          // guaranteed mean margin for disk samples
    std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& cfg) {
    if (cfg.count < 10) throw ConfigError("need at least 10 samples for a 7:1:2 split");
    if (cfg.n_tags < 2 || cfg.n_tags > kTagBankSize)
        throw ConfigError("n_tags must lie in [2, " + std::to_string(kTagBankSize) + "]");
    if (cfg.abnormal_rate < 0.0 || cfg.abnormal_rate > 1.0)
        throw ConfigError("abnormal_rate must lie in [0, 1]");
    if (cfg.img_size < 16) throw ConfigError("img_size must be at least 16");
    if (cfg.contrast <= 0.0 || cfg.contrast > 0.3)
        throw ConfigError("contrast margin must lie in (0, 0.3]");
}

// How the tag bank is cut down when n_tags < 12: keep at least one glyph tag,
// give the rest to the normal bank (in bank order).
inline std::size_t normal_tag_count(std::size_t n_tags) {
    return std::min<std::size_t>(4, n_tags - 1);
}
inline std::size_t glyph_tag_count(std::size_t n_tags) {
    return n_tags - normal_tag_count(n_tags);
}

struct SynthSample {
    std::string id;
    Tensor image;                   // [img x img], values in [0,1]
    std::vector<std::uint8_t> tags; // n_tags flags
    std::string report;
    // planted glyph box, inclusive; meaningful only when has_region
    std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
    bool has_region = false;
};

struct SynthDataset {
    SynthConfig cfg;
    std::vector<SynthSample> samples;
    std::vector<std::size_t> train, val, test; // indices into samples
};

inline std::string render_report(const std::vector<std::uint8_t>& tags) {
    const std::size_t n_glyph = glyph_tag_count(tags.size());
    std::string out;
    auto append = [&](const std::string& s) {
        if (!out.empty()) out += ' ';
        out += s;
    };
    bool any_glyph = false;
    for (std::size_t i = 0; i < n_glyph; ++i)
        if (tags[i]) {
            append(report_templates()[i]);
            any_glyph = true;
        }
    if (!any_glyph) append(negative_sentence());
    for (std::size_t i = n_glyph; i < tags.size(); ++i) {
        const std::size_t bank = kGlyphBankSize + (i - n_glyph);
        if (tags[i]) append(report_templates()[bank]);
    }
    return out;
}

// Inverse of render_report on exact template text; the hook that makes
// generated reports gradeable against tag ground truth.
inline std::vector<std::uint8_t> tags_from_report(const std::string& report,
                                                  std::size_t n_tags) {
    std::vector<std::uint8_t> tags(n_tags, 0);
    const std::size_t n_glyph = glyph_tag_count(n_tags);
    for (std::size_t i = 0; i < n_tags; ++i) {
        const std::size_t bank = i < n_glyph ? i : kGlyphBankSize + (i - n_glyph);
        if (report.find(report_templates()[bank]) != std::string::npos) tags[i] = 1;
    }
    return tags;
}

namespace detail {

// Glyph stencil inside an s x s box; 1 marks raised-intensity pixels.
inline std::vector<std::uint8_t> glyph_mask(std::size_t type, std::size_t s) {
    std::vector<std::uint8_t> m(s * s, 0);
    const double c = (static_cast<double>(s) - 1.0) / 2.0;
    const double r_out = 0.5 * static_cast<double>(s);
    const double r_in = 0.3 * static_cast<double>(s);
    const std::size_t band = std::max<std::size_t>(2, s / 4);
    const std::size_t thin = std::max<std::size_t>(2, s / 8);
    const std::size_t cell = std::max<std::size_t>(2, s / 6);
    const std::size_t b0 = (s - band) / 2;
    const std::size_t t0 = (s - thin) / 2;
    for (std::size_t r = 0; r < s; ++r)
        for (std::size_t col = 0; col < s; ++col) {
            const double dr = static_cast<double>(r) - c;
            const double dc = static_cast<double>(col) - c;
            const double rad = std::sqrt(dr * dr + dc * dc);
            bool on = false;
            switch (type) {
            case 0: on = rad <= r_out; break;                       // disk
            case 1: on = rad <= r_out && rad >= r_in; break;        // ring
            case 2: on = r >= b0 && r < b0 + band; break;           // horizontal band
            case 3: on = col >= b0 && col < b0 + band; break;       // vertical band
            case 4: on = ((r / cell) + (col / cell)) % 2 == 0; break; // mosaic
            case 5:                                                  // cross
                on = (r >= t0 && r < t0 + thin) || (col >= t0 && col < t0 + thin);
                break;
            case 6: {                                                // oblique streaks
                const double d1 = std::fabs(dr - dc);
                const double d2 = std::fabs(dr + dc);
                on = d1 <= static_cast<double>(thin) / 2.0 ||
                     d2 <= static_cast<double>(thin) / 2.0;
                break;
            }
            case 7:                                                  // border rim
                on = r < thin || col < thin || r + thin >= s || col + thin >= s;
                break;
            default: throw IndexError("glyph type out of range");
            }
            if (on) m[r * s + col] = 1;
        }
    return m;
}

} // namespace detail

inline SynthSample make_sample(const SynthConfig& cfg, std::size_t index, SeededRng& rng) {
    const std::size_t n = cfg.img_size;
    const std::size_t n_glyph = glyph_tag_count(cfg.n_tags);
    const std::size_t n_normal = cfg.n_tags - n_glyph;

    SynthSample smp;
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "s%06zu", index);
    smp.id = idbuf;
    smp.tags.assign(cfg.n_tags, 0);

    // normal tags: one exposure level, one texture level
    const bool have_high = n_normal >= 2;
    const bool have_texture_pair = n_normal >= 4;
    const bool low = rng.uniform() < 0.5;
    if (low) smp.tags[n_glyph] = 1;
    else if (have_high) smp.tags[n_glyph + 1] = 1;

    bool smooth = rng.uniform() < 0.5;
    if (n_normal >= 3) {
        if (smooth) smp.tags[n_glyph + 2] = 1;
        else if (have_texture_pair) smp.tags[n_glyph + 3] = 1;
    }

    double base;
    if (low) base = 0.25 + 0.13 * rng.uniform();
    else if (have_high) base = 0.52 + 0.08 * rng.uniform();
    else base = 0.42 + 0.06 * rng.uniform(); // untagged mid band
    const double noise_amp =
        smooth ? 0.02 * rng.uniform() : 0.05 + 0.05 * rng.uniform();

    smp.image = Tensor::zeros({n, n});
    auto px = smp.image.mutable_values();
    for (double& v : px) v = base;

    if (rng.uniform() < cfg.abnormal_rate) {
        std::size_t k = 1;
        if (n_glyph >= 2 && rng.uniform() < cfg.second_glyph_rate) k = 2;
        std::vector<std::size_t> pool(n_glyph);
        for (std::size_t i = 0; i < n_glyph; ++i) pool[i] = i;
        rng.shuffle(pool);
        pool.resize(k);

        const std::size_t s = n / 4 + rng.below(n / 4 + 1); // side in [n/4, n/2]
        smp.r0 = rng.below(n - s + 1);
        smp.c0 = rng.below(n - s + 1);
        smp.r1 = smp.r0 + s - 1;
        smp.c1 = smp.c0 + s - 1;
        smp.has_region = true;

        for (std::size_t g : pool) {
            smp.tags[g] = 1;
            const auto mask = detail::glyph_mask(g, s);
            const double coverage =
                static_cast<double>(std::count(mask.begin(), mask.end(), 1)) /
                static_cast<double>(s * s);
            // amplitude sized so the box-mean margin clears cfg.contrast for
            // dense glyphs; thin glyphs are capped but stay far above noise
            const double amp = std::min(0.6, (cfg.contrast + 0.06) / coverage);
            for (std::size_t r = 0; r < s; ++r)
                for (std::size_t col = 0; col < s; ++col)
                    if (mask[r * s + col]) {
                        double& v = px[(smp.r0 + r) * n + (smp.c0 + col)];
                        v = std::max(v, base + amp);
                    }
        }
    }

    for (double& v : px) {
        v += noise_amp * (2.0 * rng.uniform() - 1.0);
        v = std::min(1.0, std::max(0.0, v));
    }
    smp.report = render_report(smp.tags);
    return smp;
}

inline SynthDataset make_dataset(const SynthConfig& cfg) {
    validate(cfg);
    SynthDataset ds;
    ds.cfg = cfg;
    SeededRng master(cfg.seed);
    ds.samples.reserve(cfg.count);
    for (std::size_t i = 0; i < cfg.count; ++i) {
        SeededRng sample_rng = master.fork(i);
        ds.samples.push_back(make_sample(cfg, i, sample_rng));
    }
    const std::size_t n_train = cfg.count * 7 / 10;
    const std::size_t n_val = std::max<std::size_t>(1, cfg.count / 10);
    for (std::size_t i = 0; i < cfg.count; ++i) {
        if (i < n_train) ds.train.push_back(i);
        else if (i < n_train + n_val) ds.val.push_back(i);
        else ds.test.push_back(i);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Textbook: >=5 sentences per tag (each containing the tag name verbatim)
// plus synonym and filler sentences; the pretraining corpus. Word coverage
// is a superset of the report templates.
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& textbook_bank() {
    static const std::vector<std::string> bank{
        // round opacity
        "a round opacity is present in the study.",
        "a round opacity often appears as a filled disk.",
        "the filled disk of a round opacity has raised intensity.",
        "a circular nodule is another word for a round opacity.",
        "a round opacity keeps a compact circular outline.",
        "a circular nodule reads brighter than the field.",
        "suspect a nodule when a bright disk stands out.",
        // annular shadow
        "an annular shadow is present in the study.",
        "an annular shadow forms a ring with a clear center.",
        "the ring of an annular shadow spares the center.",
        "an annular shadow keeps its center near the background level.",
        "a thin ring suggests an annular shadow rather than a filled disk.",
        // horizontal band
        "a horizontal band crosses the field.",
        "a horizontal band runs from side to side.",
        "a horizontal band is a stripe that follows the rows.",
        "the stripe of a horizontal band keeps an even height.",
        "a horizontal band crosses the image at one height.",
        // vertical band
        "a vertical band crosses the field.",
        "a vertical band runs from top to bottom.",
        "a vertical band is a stripe that follows the columns.",
        "the stripe of a vertical band keeps an even width.",
        "a vertical band crosses the image at one width.",
        // mosaic patch
        "a mosaic patch is present in the study.",
        "a mosaic patch alternates light and dark squares.",
        "the squares of a mosaic patch tile the region evenly.",
        "a mosaic patch shows a checker layout.",
        "a checker layout of squares marks a mosaic patch.",
        "a checker pattern repeats light and dark cells.",
        // cross marking
        "a cross marking is present in the study.",
        "a cross marking joins a level arm and an upright arm.",
        "the arms of a cross marking meet at right angles.",
        "a plus figure is a cross marking with even arms.",
        "a cross marking centers its arms on one point.",
        "each arm reaches the patch border.",
        // oblique streaks
        "oblique streaks are present in the study.",
        "oblique streaks cross each other near the patch center.",
        "two diagonal strokes form oblique streaks.",
        "diagonal strokes that intersect read as oblique streaks.",
        "oblique streaks lean against the rows and columns.",
        "diagonal strokes lean at a steady angle.",
        // border rim
        "a border rim is present along the edge.",
        "a border rim traces the outer edge of the image.",
        "the thin frame of a border rim keeps a constant thickness.",
        "a border rim reads as an outer frame around the field.",
        "a thin frame along the border rim spares the interior.",
        "the outer line hugs the image edge.",
        // low exposure
        "the study shows low exposure.",
        "low exposure makes the whole image dark.",
        "a dark image points to low exposure.",
        "with low exposure the field reads dark.",
        "low exposure lowers every pixel value.",
        // high exposure
        "the study shows high exposure.",
        "high exposure makes the whole image bright.",
        "a bright image points to high exposure.",
        "with high exposure the field reads bright.",
        "high exposure raises every pixel value.",
        // smooth field
        "the background is a smooth field.",
        "a smooth field shows little pixel noise.",
        "noise stays low across a smooth field.",
        "a smooth field keeps the background quiet.",
        "expect a flat quiet texture across a smooth field.",
        // grainy field
        "the background is a grainy field.",
        "a grainy field shows strong pixel noise.",
        "noise rises across a grainy field.",
        "heavy noise gives a grainy field its texture.",
        "a grainy field speckles the background.",
        // general
        "no focal abnormality is seen.",
        "a normal study shows no focal abnormality.",
        "when no focal abnormality is seen the study is normal.",
        "a report lists one sentence for each finding.",
        "each finding maps to a fixed sentence in the report.",
        "findings follow a fixed order in every report.",
        "a band runs straight across the field.",
        "the center of a ring stays quiet.",
        "little noise keeps the texture flat.",
        "a quiet field carries little noise.",
    };
    return bank;
}

inline std::vector<std::string> synth_textbook(const SynthConfig& cfg) {
    std::vector<std::string> sentences = textbook_bank();
    SeededRng rng = SeededRng(cfg.seed).fork(0x7e87b00cULL);
    rng.shuffle(sentences);
    return sentences;
}

// ---------------------------------------------------------------------------
// On-disk layout and loader
// ---------------------------------------------------------------------------

inline void write_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    using json = nlohmann::ordered_json;
    fs::create_directories(dir / "images");

    std::ofstream jsonl(dir / "data.jsonl");
    if (!jsonl) throw DataError("cannot write " + (dir / "data.jsonl").string());
    for (const SynthSample& s : ds.samples) {
        const std::string rel = "images/" + s.id + ".pgm";
        save_pgm((dir / rel).string(), s.image);
        json rec;
        rec["id"] = s.id;
        rec["image"] = rel;
        std::vector<int> idx;
        for (std::size_t i = 0; i < s.tags.size(); ++i)
            if (s.tags[i]) idx.push_back(static_cast<int>(i));
        rec["tags"] = idx;
        rec["report"] = s.report;
        jsonl << rec.dump() << '\n';
    }

    std::ofstream tb(dir / "textbook.txt");
    for (const std::string& line : synth_textbook(ds.cfg)) tb << line << '\n';

    json tags = json::array();
    const std::size_t n_glyph = glyph_tag_count(ds.cfg.n_tags);
    for (std::size_t i = 0; i < ds.cfg.n_tags; ++i) {
        const std::size_t bank = i < n_glyph ? i : kGlyphBankSize + (i - n_glyph);
        tags.push_back(tag_names()[bank]);
    }
    std::ofstream(dir / "tags.json") << tags.dump(2) << '\n';

    json manifest;
    manifest["seed"] = ds.cfg.seed;
    manifest["count"] = ds.cfg.count;
    manifest["img_size"] = ds.cfg.img_size;
    manifest["n_tags"] = ds.cfg.n_tags;
    manifest["abnormal_rate"] = ds.cfg.abnormal_rate;
    manifest["contrast"] = ds.cfg.contrast;
    std::vector<std::size_t> histogram(ds.cfg.n_tags, 0);
    for (const SynthSample& s : ds.samples)
        for (std::size_t i = 0; i < s.tags.size(); ++i) histogram[i] += s.tags[i];
    manifest["tag_histogram"] = histogram;
    auto ids_of = [&](const std::vector<std::size_t>& part) {
        std::vector<std::string> ids;
        for (std::size_t i : part) ids.push_back(ds.samples[i].id);
        return ids;
    };
    manifest["splits"] = {{"train", ids_of(ds.train)},
                          {"val", ids_of(ds.val)},
                          {"test", ids_of(ds.test)}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

struct LoadedSample {
    std::string id;
    Tensor image;
    std::vector<std::uint8_t> tags;
    std::string report;
};

struct LoadedDataset {
    std::size_t img_size = 0;
    std::vector<std::string> tag_names;
    std::vector<LoadedSample> samples;
    std::vector<std::size_t> train, val, test;
    std::vector<std::string> textbook;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    using json = nlohmann::json;
    LoadedDataset ds;

    std::ifstream tf(dir / "tags.json");
    if (!tf) throw DataError("missing " + (dir / "tags.json").string());
    json tags = json::parse(tf, nullptr, false);
    if (tags.is_discarded() || !tags.is_array())
        throw DataError("tags.json is not a JSON array");
    for (const auto& t : tags) ds.tag_names.push_back(t.get<std::string>());
    if (ds.tag_names.empty()) throw DataError("tags.json lists no tags");

    std::ifstream df(dir / "data.jsonl");
    if (!df) throw DataError("missing " + (dir / "data.jsonl").string());
    std::unordered_map<std::string, std::size_t> by_id;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(df, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded())
            throw DataError("data.jsonl line " + std::to_string(lineno) + ": bad JSON");
        for (const char* key : {"id", "image", "tags", "report"})
            if (!rec.contains(key))
                throw DataError("data.jsonl line " + std::to_string(lineno) +
                                ": missing key '" + key + "'");
        LoadedSample s;
        s.id = rec["id"].get<std::string>();
        s.image = load_pgm((dir / rec["image"].get<std::string>()).string());
        if (ds.img_size == 0) ds.img_size = s.image.dim(0);
        if (s.image.dim(0) != ds.img_size || s.image.dim(1) != ds.img_size)
            throw DataError(s.id + ": image size differs from the rest of the set");
        s.tags.assign(ds.tag_names.size(), 0);
        for (const auto& t : rec["tags"]) {
            const auto i = t.get<std::size_t>();
            if (i >= s.tags.size())
                throw DataError(s.id + ": tag index " + std::to_string(i) + " out of range");
            s.tags[i] = 1;
        }
        s.report = rec["report"].get<std::string>();
        by_id[s.id] = ds.samples.size();
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError("data.jsonl holds no records");

    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw DataError("missing " + (dir / "manifest.json").string());
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("splits"))
        throw DataError("manifest.json is missing the splits table");
    auto read_split = [&](const char* name, std::vector<std::size_t>& out) {
        for (const auto& id : manifest["splits"][name]) {
            auto it = by_id.find(id.get<std::string>());
            if (it == by_id.end())
                throw DataError("split '" + std::string(name) + "' names unknown id " +
                                id.get<std::string>());
            out.push_back(it->second);
        }
    };
    read_split("train", ds.train);
    read_split("val", ds.val);
    read_split("test", ds.test);

    std::ifstream xb(dir / "textbook.txt");
    if (xb)
        while (std::getline(xb, line))
            if (!line.empty()) ds.textbook.push_back(line);
    return ds;
}

} // namespace asgk
