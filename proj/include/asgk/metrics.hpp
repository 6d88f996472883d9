#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "asgk/errors.hpp"
#include "asgk/vocab.hpp"

namespace asgk {

using TokenList = std::vector<std::string>;
using RefSet = std::vector<std::string>; // alternative references for one sample

namespace detail {

// n-grams keyed as separator-joined strings; values are occurrence counts
inline std::unordered_map<std::string, double> ngram_counts(const TokenList& toks,
                                                            std::size_t n) {
    std::unordered_map<std::string, double> counts;
    if (toks.size() < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key = toks[i];
        for (std::size_t j = 1; j < n; ++j) {
            key += '\x1f';
            key += toks[i + j];
        }
        counts[key] += 1.0;
    }
    return counts;
}

// candidate n-gram matches clipped at the per-reference maximum
inline double clipped_matches(const TokenList& cand, const std::vector<TokenList>& refs,
                              std::size_t n) {
    auto cc = ngram_counts(cand, n);
    std::unordered_map<std::string, double> best;
    for (const TokenList& r : refs)
        for (const auto& [key, cnt] : ngram_counts(r, n)) {
            auto it = best.find(key);
            if (it == best.end() || it->second < cnt) best[key] = cnt;
        }
    double m = 0.0;
    for (const auto& [key, cnt] : cc) {
        auto it = best.find(key);
        if (it != best.end()) m += std::min(cnt, it->second);
    }
    return m;
}

// reference length closest to the candidate length; ties go to the shorter
inline std::size_t best_match_length(std::size_t c, const std::vector<TokenList>& refs) {
    std::size_t best = refs.front().size();
    for (const TokenList& r : refs) {
        const auto d = [&](std::size_t L) {
            return L > c ? L - c : c - L;
        };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best))
            best = r.size();
    }
    return best;
}

inline std::size_t lcs_length(const TokenList& a, const TokenList& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[m];
}

inline double gaussian_length_penalty(double delta, double sigma = 6.0) {
    return std::exp(-(delta * delta) / (2.0 * sigma * sigma));
}

inline void check_corpus(const std::vector<std::string>& cands,
                         const std::vector<RefSet>& refs) {
    if (cands.empty()) throw ContractError("empty evaluation corpus");
    if (cands.size() != refs.size())
        throw ContractError("candidate/reference corpus size mismatch");
    for (const RefSet& r : refs)
        if (r.empty()) throw ContractError("candidate without references");
}

inline std::vector<TokenList> tokenize_all(const std::vector<std::string>& lines) {
    std::vector<TokenList> out;
    out.reserve(lines.size());
    for (const std::string& s : lines) out.push_back(tokenize(s));
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

// Corpus-level BLEU-n: uniform weights over orders 1..n, clipped modified
// precision pooled over the corpus, brevity penalty exp(1 - r/c) when c < r.
inline double bleu_n(const std::vector<std::string>& cands,
                     const std::vector<RefSet>& refs, std::size_t n) {
    if (n < 1 || n > 9) throw ContractError("bleu order out of range");
    detail::check_corpus(cands, refs);
    const auto ct = detail::tokenize_all(cands);
    std::vector<std::vector<TokenList>> rt(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) rt[i] = detail::tokenize_all(refs[i]);

    double c_len = 0.0, r_len = 0.0;
    for (std::size_t i = 0; i < ct.size(); ++i) {
        c_len += static_cast<double>(ct[i].size());
        r_len += static_cast<double>(detail::best_match_length(ct[i].size(), rt[i]));
    }
    double log_p_sum = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        double matches = 0.0, total = 0.0;
        for (std::size_t i = 0; i < ct.size(); ++i) {
            matches += detail::clipped_matches(ct[i], rt[i], k);
            if (ct[i].size() >= k) total += static_cast<double>(ct[i].size() - k + 1);
        }
        if (matches == 0.0 || total == 0.0) return 0.0;
        log_p_sum += std::log(matches / total);
    }
    const double bp = c_len < r_len ? std::exp(1.0 - r_len / c_len) : 1.0;
    return bp * std::exp(log_p_sum / static_cast<double>(n));
}

inline std::array<double, 4> bleu_1_4(const std::vector<std::string>& cands,
                                      const std::vector<RefSet>& refs) {
    return {bleu_n(cands, refs, 1), bleu_n(cands, refs, 2), bleu_n(cands, refs, 3),
            bleu_n(cands, refs, 4)};
}

// Single-sentence diagnostic with +1 smoothing on orders above 1.
inline double sentence_bleu(const std::string& cand, const RefSet& refs, std::size_t n) {
    if (refs.empty()) throw ContractError("candidate without references");
    const TokenList ct = tokenize(cand);
    std::vector<TokenList> rt = detail::tokenize_all(refs);
    double log_p_sum = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        double matches = detail::clipped_matches(ct, rt, k);
        double total = ct.size() >= k ? static_cast<double>(ct.size() - k + 1) : 0.0;
        if (k > 1) {
            matches += 1.0;
            total += 1.0;
        }
        if (matches == 0.0 || total == 0.0) return 0.0;
        log_p_sum += std::log(matches / total);
    }
    const double c = static_cast<double>(ct.size());
    const double r = static_cast<double>(detail::best_match_length(ct.size(), rt));
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(log_p_sum / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

// LCS F-measure with beta = 1.2; the best reference counts.
inline double rouge_l(const std::string& cand, const RefSet& refs, double beta = 1.2) {
    if (refs.empty()) throw ContractError("candidate without references");
    const TokenList ct = tokenize(cand);
    double best = 0.0;
    for (const std::string& ref : refs) {
        const TokenList rt = tokenize(ref);
        if (ct.empty() || rt.empty()) continue;
        const double lcs = static_cast<double>(detail::lcs_length(ct, rt));
        if (lcs == 0.0) continue;
        const double p = lcs / static_cast<double>(ct.size());
        const double r = lcs / static_cast<double>(rt.size());
        const double b2 = beta * beta;
        best = std::max(best, (1.0 + b2) * p * r / (r + b2 * p));
    }
    return best;
}

inline double rouge_l_corpus(const std::vector<std::string>& cands,
                             const std::vector<RefSet>& refs) {
    detail::check_corpus(cands, refs);
    double acc = 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) acc += rouge_l(cands[i], refs[i]);
    return acc / static_cast<double>(cands.size());
}

// ---------------------------------------------------------------------------
// CIDEr-D
// ---------------------------------------------------------------------------

struct CiderResult {
    double score = 0.0;              // corpus mean, x10 scale
    std::vector<double> per_sample;  // one entry per candidate
    bool degenerate = false;         // all reference sets identical
};

// TF-IDF cosine over n = 1..4 with candidate-count clipping and a Gaussian
// length penalty (sigma 6); per-n scores averaged and scaled by 10.
inline CiderResult cider_d(const std::vector<std::string>& cands,
                           const std::vector<RefSet>& refs) {
    detail::check_corpus(cands, refs);
    if (cands.size() < 2)
        throw ContractError("cider_d needs at least two samples for document frequency");
    constexpr std::size_t kMaxN = 4;
    const double ref_len = std::log(static_cast<double>(refs.size()));

    // document frequency: images whose reference set mentions the n-gram
    std::array<std::unordered_map<std::string, double>, kMaxN> df;
    std::vector<std::vector<TokenList>> rt(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        rt[i] = detail::tokenize_all(refs[i]);
        for (std::size_t n = 0; n < kMaxN; ++n) {
            std::unordered_map<std::string, double> uniq;
            for (const TokenList& r : rt[i])
                for (const auto& [key, cnt] : detail::ngram_counts(r, n + 1)) uniq[key] = 1.0;
            for (const auto& [key, one] : uniq) df[n][key] += 1.0;
        }
    }

    CiderResult res;
    {
        RefSet first = refs.front();
        std::sort(first.begin(), first.end());
        res.degenerate = true;
        for (const RefSet& r : refs) {
            RefSet sorted = r;
            std::sort(sorted.begin(), sorted.end());
            if (sorted != first) {
                res.degenerate = false;
                break;
            }
        }
    }

    struct Profile {
        std::array<std::unordered_map<std::string, double>, kMaxN> vec;
        std::array<double, kMaxN> norm{};
        double length = 0.0;
    };
    auto profile_of = [&](const TokenList& toks) {
        Profile p;
        p.length = static_cast<double>(toks.size());
        for (std::size_t n = 0; n < kMaxN; ++n) {
            for (const auto& [key, cnt] : detail::ngram_counts(toks, n + 1)) {
                auto it = df[n].find(key);
                const double d = std::log(std::max(1.0, it == df[n].end() ? 0.0 : it->second));
                const double w = cnt * std::max(0.0, ref_len - d);
                p.vec[n][key] = w;
                p.norm[n] += w * w;
            }
            p.norm[n] = std::sqrt(p.norm[n]);
        }
        return p;
    };

    for (std::size_t i = 0; i < cands.size(); ++i) {
        const Profile hyp = profile_of(tokenize(cands[i]));
        std::array<double, kMaxN> acc{};
        for (const TokenList& r : rt[i]) {
            const Profile ref = profile_of(r);
            const double pen = detail::gaussian_length_penalty(hyp.length - ref.length);
            for (std::size_t n = 0; n < kMaxN; ++n) {
                double dot = 0.0;
                for (const auto& [key, w] : hyp.vec[n]) {
                    auto it = ref.vec[n].find(key);
                    if (it != ref.vec[n].end()) dot += std::min(w, it->second) * it->second;
                }
                if (hyp.norm[n] > 0.0 && ref.norm[n] > 0.0) dot /= hyp.norm[n] * ref.norm[n];
                acc[n] += dot * pen;
            }
        }
        double score = 0.0;
        for (std::size_t n = 0; n < kMaxN; ++n) score += acc[n];
        score /= static_cast<double>(kMaxN) * static_cast<double>(rt[i].size());
        res.per_sample.push_back(10.0 * score);
    }
    res.score = std::accumulate(res.per_sample.begin(), res.per_sample.end(), 0.0) /
                static_cast<double>(res.per_sample.size());
    return res;
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

// Mann-Whitney statistic with mid-ranks for ties.
inline double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc score/label length mismatch");
    if (scores.empty()) throw ContractError("auc on empty input");
    std::size_t pos = 0;
    for (std::uint8_t l : labels) pos += l ? 1 : 0;
    const std::size_t neg = scores.size() - pos;
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError("auc undefined without both classes");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]]) rank_sum_pos += mid;
        i = j + 1;
    }
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
}

// ---------------------------------------------------------------------------
// Corpus report
// ---------------------------------------------------------------------------

struct EvalReport {
    std::array<double, 4> bleu{};
    double rouge_l = 0.0;
    double cider_d = 0.0;
    bool cider_degenerate = false;
    std::vector<double> auc_per_tag;  // NaN where undefined
    std::vector<std::size_t> skipped_tags;
    double auc_mean = 0.0;
    std::size_t n_samples = 0;
    std::size_t n_references = 0;
};

// tag_scores/tag_labels: row-major [n_samples x n_tags]; pass empty to skip
// the classification block.
inline EvalReport evaluate_corpus(const std::vector<std::string>& cands,
                                  const std::vector<RefSet>& refs,
                                  const std::vector<double>& tag_scores = {},
                                  const std::vector<std::uint8_t>& tag_labels = {},
                                  std::size_t n_tags = 0) {
    detail::check_corpus(cands, refs);
    EvalReport rep;
    rep.n_samples = cands.size();
    for (const RefSet& r : refs) rep.n_references += r.size();
    rep.bleu = bleu_1_4(cands, refs);
    rep.rouge_l = rouge_l_corpus(cands, refs);
    if (cands.size() >= 2) {
        CiderResult cr = cider_d(cands, refs);
        rep.cider_d = cr.score;
        rep.cider_degenerate = cr.degenerate;
    }
    if (n_tags > 0) {
        if (tag_scores.size() != cands.size() * n_tags ||
            tag_labels.size() != tag_scores.size())
            throw ShapeError("tag score/label matrix shape mismatch");
        double acc = 0.0;
        std::size_t used = 0;
        for (std::size_t t = 0; t < n_tags; ++t) {
            std::vector<double> s(cands.size());
            std::vector<std::uint8_t> l(cands.size());
            for (std::size_t i = 0; i < cands.size(); ++i) {
                s[i] = tag_scores[i * n_tags + t];
                l[i] = tag_labels[i * n_tags + t];
            }
            try {
                const double a = auc(s, l);
                rep.auc_per_tag.push_back(a);
                acc += a;
                ++used;
            } catch (const UndefinedMetricError&) {
                rep.auc_per_tag.push_back(std::numeric_limits<double>::quiet_NaN());
                rep.skipped_tags.push_back(t);
            }
        }
        rep.auc_mean = used ? acc / static_cast<double>(used) : 0.0;
    }
    return rep;
}

} // namespace asgk
