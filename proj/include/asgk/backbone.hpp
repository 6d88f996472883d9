#pragma once

#include <string>
#include <utility>
#include <vector>

#include "asgk/conv.hpp"
#include "asgk/ops.hpp"
#include "asgk/rng.hpp"

namespace asgk {

enum class FusionOp { add, mul, max };

inline FusionOp fusion_op_from_string(const std::string& s) {
    if (s == "add") return FusionOp::add;
    if (s == "mul") return FusionOp::mul;
    if (s == "max") return FusionOp::max;
    throw ConfigError("unknown fusion op '" + s + "' (expected add|mul|max)");
}

// Strided 3x3 conv stack: each stage halves the spatial extent. The final
// feature stack f_c keeps its spatial layout; f_g is its per-channel mean.
struct ConvBackbone {
    std::vector<Tensor> weights; // [C_out x C_in*9] per stage
    std::vector<Tensor> biases;  // [C_out] per stage
    std::size_t input_size = 0;

    static ConvBackbone init(std::size_t input_size, const std::vector<std::size_t>& channels,
                             SeededRng& rng) {
        ConvBackbone bb;
        bb.input_size = input_size;
        std::size_t c_in = 1;
        for (std::size_t c_out : channels) {
            bb.weights.push_back(Tensor::glorot({c_out, c_in * 9}, rng));
            Tensor b = Tensor::zeros({c_out});
            b.set_requires_grad(true);
            bb.biases.push_back(b);
            c_in = c_out;
        }
        return bb;
    }

    std::size_t spatial_out() const { return input_size >> weights.size(); }
    std::size_t channels_out() const { return weights.back().dim(0); }

    // image [H x W] -> (f_c [C x S x S], f_g [C])
    std::pair<Tensor, Tensor> forward(const Tensor& image) const {
        if (image.rank() != 2 || image.dim(0) != input_size || image.dim(1) != input_size)
            throw ShapeError("backbone expects [" + std::to_string(input_size) + " x " +
                             std::to_string(input_size) + "] input, got " + shape_str(image.dims()));
        Tensor x = reshape(image, {1, input_size, input_size});
        for (std::size_t s = 0; s < weights.size(); ++s)
            x = relu(conv2d(x, weights[s], biases[s], 3, 3, 2, 1));
        return {x, spatial_mean(x)};
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> ps;
        for (std::size_t s = 0; s < weights.size(); ++s) {
            ps.push_back(weights[s]);
            ps.push_back(biases[s]);
        }
        return ps;
    }
};

// Three independent bias-free linear heads over f_g / f_l / f_f.
struct BranchHeads {
    Tensor global_head, region_head, fusion_head; // each [N_t x C_g]

    static BranchHeads init(std::size_t n_tags, std::size_t c_g, SeededRng& rng) {
        return {Tensor::glorot({n_tags, c_g}, rng), Tensor::glorot({n_tags, c_g}, rng),
                Tensor::glorot({n_tags, c_g}, rng)};
    }

    std::vector<Tensor> parameters() const { return {global_head, region_head, fusion_head}; }
};

inline Tensor fuse(const Tensor& f_g, const Tensor& f_l, FusionOp op) {
    switch (op) {
    case FusionOp::add: return add(f_g, f_l);
    case FusionOp::mul: return mul(f_g, f_l);
    case FusionOp::max: return emax(f_g, f_l);
    }
    throw ContractError("unreachable fusion op");
}

} // namespace asgk
