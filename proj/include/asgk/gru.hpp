#pragma once

#include <vector>

#include "asgk/ops.hpp"
#include "asgk/rng.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

// Gate convention: z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
// cand = tanh(Wh x + Uh (r*h) + bh), h' = (1-z)*h + z*cand.
struct GruParams {
    Tensor wz, uz, bz;
    Tensor wr, ur, br;
    Tensor wh, uh, bh;

    static GruParams init(std::size_t d_in, std::size_t hidden, SeededRng& rng) {
        GruParams p;
        p.wz = Tensor::glorot({hidden, d_in}, rng);
        p.uz = Tensor::glorot({hidden, hidden}, rng);
        p.wr = Tensor::glorot({hidden, d_in}, rng);
        p.ur = Tensor::glorot({hidden, hidden}, rng);
        p.wh = Tensor::glorot({hidden, d_in}, rng);
        p.uh = Tensor::glorot({hidden, hidden}, rng);
        p.bz = Tensor::zeros({hidden});
        p.br = Tensor::zeros({hidden});
        p.bh = Tensor::zeros({hidden});
        p.bz.set_requires_grad(true);
        p.br.set_requires_grad(true);
        p.bh.set_requires_grad(true);
        return p;
    }

    std::size_t hidden() const { return wz.dim(0); }
    std::size_t d_in() const { return wz.dim(1); }

    std::vector<Tensor> parameters() const { return {wz, uz, bz, wr, ur, br, wh, uh, bh}; }
};

inline Tensor gru_cell(const Tensor& x, const Tensor& h, const GruParams& p) {
    Tensor z = sigmoid(add(affine(p.wz, x, &p.bz), affine(p.uz, h)));
    Tensor r = sigmoid(add(affine(p.wr, x, &p.br), affine(p.ur, h)));
    Tensor cand = tanh_op(add(affine(p.wh, x, &p.bh), affine(p.uh, mul(r, h))));
    return add(mul(const_minus(1.0, z), h), mul(z, cand));
}

// Final hidden state over the rows of `embeddings` [L x d], starting from h0.
inline Tensor gru_encode(const Tensor& embeddings, const GruParams& p, const Tensor& h0) {
    if (embeddings.rank() != 2) throw ShapeError("gru_encode expects [L x d] embeddings");
    const std::size_t len = embeddings.dim(0);
    if (len == 0) throw ContractError("gru_encode on empty sequence");
    if (embeddings.dim(1) != p.d_in())
        throw ShapeError("gru_encode input dim " + std::to_string(embeddings.dim(1)) +
                         " vs params " + std::to_string(p.d_in()));
    Tensor h = h0;
    for (std::size_t t = 0; t < len; ++t) h = gru_cell(row(embeddings, t), h, p);
    return h;
}

inline Tensor gru_encode(const Tensor& embeddings, const GruParams& p) {
    return gru_encode(embeddings, p, Tensor::zeros({p.hidden()}));
}

} // namespace asgk
