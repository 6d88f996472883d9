#pragma once

#include <cstdint>
#include <vector>

#include "asgk/ops.hpp"
#include "asgk/rng.hpp"

namespace asgk {

// Packed multi-head attention projections. wq projects the query stream, wk
// and wv the key/value stream (whose feature dim may differ), wo the output.
struct MhaParams {
    Tensor wq; // [d_model x d_q_in]
    Tensor wk; // [d_model x d_kv_in]
    Tensor wv; // [d_model x d_kv_in]
    Tensor wo; // [d_model x d_model]

    static MhaParams init(std::size_t d_model, std::size_t d_q_in, std::size_t d_kv_in,
                          SeededRng& rng) {
        return {Tensor::glorot({d_model, d_q_in}, rng), Tensor::glorot({d_model, d_kv_in}, rng),
                Tensor::glorot({d_model, d_kv_in}, rng), Tensor::glorot({d_model, d_model}, rng)};
    }

    std::vector<Tensor> parameters() const { return {wq, wk, wv, wo}; }
};

// q_in [Lq x d_q_in], kv_in [Lk x d_kv_in] -> [Lq x d_model]. The optional
// mask [Lq x Lk] (1 = attendable) and additive score bias are shared by all
// heads.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, const MhaParams& p,
                                   std::size_t heads,
                                   const std::vector<std::uint8_t>* mask = nullptr,
                                   const Tensor* score_bias = nullptr) {
    const std::size_t d_model = p.wq.dim(0);
    if (heads == 0 || d_model % heads != 0)
        throw ContractError("attention width " + std::to_string(d_model) +
                            " not divisible by head count " + std::to_string(heads));
    const std::size_t dh = d_model / heads;
    const std::size_t lq = q_in.dim(0), lk = kv_in.dim(0);
    if (mask) {
        if (mask->size() != lq * lk) throw ShapeError("attention mask size mismatch");
        for (std::size_t i = 0; i < lq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < lk; ++j) any = any || (*mask)[i * lk + j];
            if (!any)
                throw ContractError("attention row " + std::to_string(i) + " has no valid key");
        }
    }

    Tensor q = matmul_nt(q_in, p.wq);  // [Lq x d_model]
    Tensor k = matmul_nt(kv_in, p.wk); // [Lk x d_model]
    Tensor v = matmul_nt(kv_in, p.wv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t hidx = 0; hidx < heads; ++hidx) {
        Tensor qh = slice_cols(q, hidx * dh, (hidx + 1) * dh);
        Tensor kh = slice_cols(k, hidx * dh, (hidx + 1) * dh);
        Tensor vh = slice_cols(v, hidx * dh, (hidx + 1) * dh);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (score_bias) scores = add(scores, *score_bias);
        if (mask) scores = mask_fill(scores, *mask, detail::kMaskedScore);
        head_outs.push_back(matmul(softmax(scores, 1), vh));
    }
    return matmul_nt(heads == 1 ? head_outs[0] : concat_cols(head_outs), p.wo);
}

} // namespace asgk
