#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "asgk/blas.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

namespace detail {
constexpr double kProbEps = 1e-12;    // clamp before any logarithm
constexpr double kMaskedScore = -1e30; // attention score for masked keys
constexpr double kLnEps = 1e-5;        // layer-norm variance epsilon

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dims() != b.dims())
        throw ShapeError(std::string(op) + ": " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
}
} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return detail::make_op(a.dims(), std::move(out), "add", {a, b}, [a, b](TensorNode& self) {
        if (a.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i) a.raw()->grad[i] += self.grad[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i) b.raw()->grad[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return detail::make_op(a.dims(), std::move(out), "sub", {a, b}, [a, b](TensorNode& self) {
        if (a.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i) a.raw()->grad[i] += self.grad[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i) b.raw()->grad[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return detail::make_op(a.dims(), std::move(out), "mul", {a, b}, [a, b](TensorNode& self) {
        if (a.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                a.raw()->grad[i] += self.grad[i] * b.at(i);
        if (b.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                b.raw()->grad[i] += self.grad[i] * a.at(i);
    });
}

// Elementwise max; ties resolve to the first operand.
inline Tensor emax(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "emax");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) >= b.at(i) ? a.at(i) : b.at(i);
    return detail::make_op(a.dims(), std::move(out), "emax", {a, b}, [a, b](TensorNode& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (a.at(i) >= b.at(i)) {
                if (a.requires_grad()) a.raw()->grad[i] += self.grad[i];
            } else if (b.requires_grad()) {
                b.raw()->grad[i] += self.grad[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    return detail::make_op(a.dims(), std::move(out), "scale", {a}, [a, c](TensorNode& self) {
        if (a.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                a.raw()->grad[i] += self.grad[i] * c;
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// c - x elementwise.
inline Tensor const_minus(double c, const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c - a.at(i);
    return detail::make_op(a.dims(), std::move(out), "const_minus", {a}, [a](TensorNode& self) {
        if (a.requires_grad())
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                a.raw()->grad[i] -= self.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.at(i);
        double y;
        if (x >= 0.0) {
            y = 1.0 / (1.0 + std::exp(-x));
        } else {
            const double e = std::exp(x);
            y = e / (1.0 + e);
        }
        // keep the output strictly inside (0,1) even at extreme saturation
        out[i] = std::min(std::max(y, 1e-300), 1.0 - 1.1e-16);
    }
    return detail::make_op(a.dims(), std::move(out), "sigmoid", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.data[i];
            a.raw()->grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

inline Tensor tanh_op(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
    return detail::make_op(a.dims(), std::move(out), "tanh", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.data[i];
            a.raw()->grad[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    return detail::make_op(a.dims(), std::move(out), "relu", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (a.at(i) > 0.0) a.raw()->grad[i] += self.grad[i];
    });
}

// ln(clamp(x, eps, 1)); intended for probabilities. Outside the clamp window
// the true derivative is zero and that is what the tape records.
inline Tensor log_prob(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = std::min(std::max(a.at(i), detail::kProbEps), 1.0);
        out[i] = std::log(x);
    }
    return detail::make_op(a.dims(), std::move(out), "log_prob", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = a.at(i);
            if (x > detail::kProbEps && x < 1.0)
                a.raw()->grad[i] += self.grad[i] / x;
        }
    });
}

// clamp(x, eps, 1-eps) with pass-through gradient inside the window.
inline Tensor clamp_prob(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(std::max(a.at(i), detail::kProbEps), 1.0 - detail::kProbEps);
    return detail::make_op(a.dims(), std::move(out), "clamp_prob", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = a.at(i);
            if (x > detail::kProbEps && x < 1.0 - detail::kProbEps)
                a.raw()->grad[i] += self.grad[i];
        }
    });
}

// x^p for x >= 0 (modulating factors); p is a constant.
inline Tensor powc(const Tensor& a, double p) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(a.at(i), p);
    return detail::make_op(a.dims(), std::move(out), "powc", {a}, [a, p](TensorNode& self) {
        if (!a.requires_grad() || p == 0.0) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            a.raw()->grad[i] += self.grad[i] * p * std::pow(a.at(i), p - 1.0);
    });
}

// ---------------------------------------------------------------------------
// reductions and reshapes
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a.at(i);
    return detail::make_op({1}, {acc}, "sum", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        const double g = self.grad[0];
        for (double& v : a.raw()->grad) v += g;
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape dims) {
    if (shape_numel(dims) != a.numel())
        throw ShapeError("reshape " + shape_str(a.dims()) + " -> " + shape_str(dims));
    std::vector<double> out(a.values().begin(), a.values().end());
    return detail::make_op(std::move(dims), std::move(out), "reshape", {a}, [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.raw()->grad[i] += self.grad[i];
    });
}

// Row r of a matrix as a rank-1 tensor.
inline Tensor row(const Tensor& a, std::size_t r) {
    if (a.rank() != 2) throw ShapeError("row expects rank-2, got " + shape_str(a.dims()));
    if (r >= a.dim(0)) throw IndexError("row " + std::to_string(r) + " out of range");
    const std::size_t c = a.dim(1);
    std::vector<double> out(a.values().begin() + r * c, a.values().begin() + (r + 1) * c);
    return detail::make_op({c}, std::move(out), "row", {a}, [a, r, c](TensorNode& self) {
        if (!a.requires_grad()) return;
        for (std::size_t j = 0; j < c; ++j) a.raw()->grad[r * c + j] += self.grad[j];
    });
}

// Column slice [c0, c1) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    if (a.rank() != 2) throw ShapeError("slice_cols expects rank-2");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (c1 > cols || c0 >= c1) throw IndexError("slice_cols bad range");
    const std::size_t w = c1 - c0;
    std::vector<double> out(rows * w);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i * cols + c0 + j);
    return detail::make_op({rows, w}, std::move(out), "slice_cols", {a},
                           [a, c0, w, rows, cols](TensorNode& self) {
                               if (!a.requires_grad()) return;
                               for (std::size_t i = 0; i < rows; ++i)
                                   for (std::size_t j = 0; j < w; ++j)
                                       a.raw()->grad[i * cols + c0 + j] += self.grad[i * w + j];
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols on empty list");
    const std::size_t rows = parts[0].dim(0);
    std::size_t cols = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols row mismatch");
        cols += p.dim(1);
    }
    std::vector<double> out(rows * cols);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * cols + off + j] = p.at(i * w + j);
        off += w;
    }
    std::vector<Tensor> captured = parts;
    return detail::make_op({rows, cols}, std::move(out), "concat_cols", parts,
                           [captured, rows, cols](TensorNode& self) {
                               std::size_t o = 0;
                               for (const Tensor& p : captured) {
                                   const std::size_t w = p.dim(1);
                                   if (p.requires_grad())
                                       for (std::size_t i = 0; i < rows; ++i)
                                           for (std::size_t j = 0; j < w; ++j)
                                               p.raw()->grad[i * w + j] +=
                                                   self.grad[i * cols + o + j];
                                   o += w;
                               }
                           });
}

// Concatenate rank-1 tensors into one long vector.
inline Tensor concat_vec(const std::vector<Tensor>& parts) {
    std::size_t n_total = 0;
    for (const Tensor& p : parts) n_total += p.numel();
    std::vector<double> out;
    out.reserve(n_total);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<Tensor> captured = parts;
    return detail::make_op({n_total}, std::move(out), "concat_vec", parts,
                           [captured](TensorNode& self) {
                               std::size_t o = 0;
                               for (const Tensor& p : captured) {
                                   if (p.requires_grad())
                                       for (std::size_t i = 0; i < p.numel(); ++i)
                                           p.raw()->grad[i] += self.grad[o + i];
                                   o += p.numel();
                               }
                           });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.dims()) + " and " +
                         shape_str(b.dims()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner dims: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    blas::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
    return detail::make_op({m, n}, std::move(out), "matmul", {a, b},
                           [a, b, m, k, n](TensorNode& self) {
                               if (a.requires_grad())
                                   blas::gemm_nt(m, n, k, self.grad.data(), b.values().data(),
                                                 a.raw()->grad.data());
                               if (b.requires_grad())
                                   blas::gemm_tn(k, m, n, a.values().data(), self.grad.data(),
                                                 b.raw()->grad.data());
                           });
}

// a * b^T without materializing the transpose (tied embeddings, attention scores).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_nt expects rank-2 operands");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt inner dims: " + shape_str(a.dims()) + " x " +
                         shape_str(b.dims()) + "^T");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> out(m * n, 0.0);
    blas::gemm_nt(m, k, n, a.values().data(), b.values().data(), out.data());
    return detail::make_op({m, n}, std::move(out), "matmul_nt", {a, b},
                           [a, b, m, k, n](TensorNode& self) {
                               if (a.requires_grad())
                                   blas::gemm_nn(m, n, k, self.grad.data(), b.values().data(),
                                                 a.raw()->grad.data());
                               if (b.requires_grad())
                                   blas::gemm_tn(n, m, k, self.grad.data(), a.values().data(),
                                                 b.raw()->grad.data());
                           });
}

// W[m x n] * x[n] (+ optional bias[m]) as a rank-1 affine map.
inline Tensor affine(const Tensor& w, const Tensor& x, const Tensor* bias = nullptr) {
    if (w.rank() != 2 || x.rank() != 1)
        throw ShapeError("affine expects W rank-2 and x rank-1");
    if (w.dim(1) != x.dim(0))
        throw ShapeError("affine dims: " + shape_str(w.dims()) + " x " + shape_str(x.dims()));
    const std::size_t m = w.dim(0), n = w.dim(1);
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* wr = w.values().data() + i * n;
        double acc = bias ? bias->at(i) : 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += wr[j] * x.at(j);
        out[i] = acc;
    }
    std::vector<Tensor> inputs{w, x};
    if (bias) inputs.push_back(*bias);
    Tensor bcopy = bias ? *bias : Tensor();
    return detail::make_op({m}, std::move(out), "affine", inputs,
                           [w, x, bcopy, m, n](TensorNode& self) {
                               if (w.requires_grad())
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const double g = self.grad[i];
                                       if (g == 0.0) continue;
                                       double* wg = w.raw()->grad.data() + i * n;
                                       for (std::size_t j = 0; j < n; ++j) wg[j] += g * x.at(j);
                                   }
                               if (x.requires_grad())
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const double g = self.grad[i];
                                       if (g == 0.0) continue;
                                       const double* wr = w.values().data() + i * n;
                                       for (std::size_t j = 0; j < n; ++j)
                                           x.raw()->grad[j] += g * wr[j];
                                   }
                               if (bcopy.defined() && bcopy.requires_grad())
                                   for (std::size_t i = 0; i < m; ++i)
                                       bcopy.raw()->grad[i] += self.grad[i];
                           });
}

// mat[R x C] + bias[C] broadcast over rows.
inline Tensor add_bias(const Tensor& mat, const Tensor& bias) {
    if (mat.rank() != 2 || bias.rank() != 1 || mat.dim(1) != bias.dim(0))
        throw ShapeError("add_bias dims: " + shape_str(mat.dims()) + " + " +
                         shape_str(bias.dims()));
    const std::size_t r = mat.dim(0), c = mat.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mat.at(i * c + j) + bias.at(j);
    return detail::make_op({r, c}, std::move(out), "add_bias", {mat, bias},
                           [mat, bias, r, c](TensorNode& self) {
                               if (mat.requires_grad())
                                   for (std::size_t i = 0; i < r * c; ++i)
                                       mat.raw()->grad[i] += self.grad[i];
                               if (bias.requires_grad())
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           bias.raw()->grad[j] += self.grad[i * c + j];
                           });
}

// Scale row i of a matrix by s[i].
inline Tensor scale_rows(const Tensor& mat, const Tensor& s) {
    if (mat.rank() != 2 || s.rank() != 1 || mat.dim(0) != s.dim(0))
        throw ShapeError("scale_rows dims: " + shape_str(mat.dims()) + " by " +
                         shape_str(s.dims()));
    const std::size_t r = mat.dim(0), c = mat.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mat.at(i * c + j) * s.at(i);
    return detail::make_op({r, c}, std::move(out), "scale_rows", {mat, s},
                           [mat, s, r, c](TensorNode& self) {
                               if (mat.requires_grad())
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           mat.raw()->grad[i * c + j] += self.grad[i * c + j] * s.at(i);
                               if (s.requires_grad())
                                   for (std::size_t i = 0; i < r; ++i) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < c; ++j)
                                           acc += self.grad[i * c + j] * mat.at(i * c + j);
                                       s.raw()->grad[i] += acc;
                                   }
                           });
}

// Per-row dot product of two equal-shape matrices -> rank-1.
inline Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "rowwise_dot");
    if (a.rank() != 2) throw ShapeError("rowwise_dot expects rank-2");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += a.at(i * c + j) * b.at(i * c + j);
    return detail::make_op({r}, std::move(out), "rowwise_dot", {a, b},
                           [a, b, r, c](TensorNode& self) {
                               for (std::size_t i = 0; i < r; ++i) {
                                   const double g = self.grad[i];
                                   if (g == 0.0) continue;
                                   for (std::size_t j = 0; j < c; ++j) {
                                       if (a.requires_grad())
                                           a.raw()->grad[i * c + j] += g * b.at(i * c + j);
                                       if (b.requires_grad())
                                           b.raw()->grad[i * c + j] += g * a.at(i * c + j);
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / embeddings / attention
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank())
        throw ShapeError("softmax axis " + std::to_string(axis) + " out of rank " +
                         std::to_string(a.rank()));
    const Shape& d = a.dims();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
    for (std::size_t i = axis + 1; i < d.size(); ++i) inner *= d[i];
    const std::size_t len = d[axis];
    std::vector<double> out(a.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = a.at(base);
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, a.at(base + i * inner));
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(a.at(base + i * inner) - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
        }
    return detail::make_op(a.dims(), std::move(out), "softmax", {a},
                           [a, outer, inner, len](TensorNode& self) {
                               if (!a.requires_grad()) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t in = 0; in < inner; ++in) {
                                       const std::size_t base = o * len * inner + in;
                                       double dot = 0.0;
                                       for (std::size_t i = 0; i < len; ++i)
                                           dot += self.grad[base + i * inner] * self.data[base + i * inner];
                                       for (std::size_t i = 0; i < len; ++i) {
                                           const std::size_t idx = base + i * inner;
                                           a.raw()->grad[idx] +=
                                               (self.grad[idx] - dot) * self.data[idx];
                                       }
                                   }
                           });
}

// Normalize the last dimension to zero mean / unit variance, then apply the
// affine gain/bias. Gain and bias must match the last dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.rank() == 0) throw ShapeError("layer_norm on empty tensor");
    const std::size_t dlast = x.dims().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != dlast || bias.dim(0) != dlast)
        throw ShapeError("layer_norm gain/bias must be rank-1 of size " + std::to_string(dlast));
    const std::size_t rows = x.numel() / dlast;
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_sigma = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * dlast;
        double mu = 0.0;
        for (std::size_t j = 0; j < dlast; ++j) mu += x.at(base + j);
        mu /= static_cast<double>(dlast);
        double var = 0.0;
        for (std::size_t j = 0; j < dlast; ++j) {
            const double e = x.at(base + j) - mu;
            var += e * e;
        }
        var /= static_cast<double>(dlast);
        const double is = 1.0 / std::sqrt(var + detail::kLnEps);
        (*inv_sigma)[r] = is;
        for (std::size_t j = 0; j < dlast; ++j) {
            const double h = (x.at(base + j) - mu) * is;
            (*xhat)[base + j] = h;
            out[base + j] = h * gain.at(j) + bias.at(j);
        }
    }
    return detail::make_op(
        x.dims(), std::move(out), "layer_norm", {x, gain, bias},
        [x, gain, bias, xhat, inv_sigma, rows, dlast](TensorNode& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * dlast;
                if (gain.requires_grad() || bias.requires_grad()) {
                    for (std::size_t j = 0; j < dlast; ++j) {
                        const double g = self.grad[base + j];
                        if (gain.requires_grad()) gain.raw()->grad[j] += g * (*xhat)[base + j];
                        if (bias.requires_grad()) bias.raw()->grad[j] += g;
                    }
                }
                if (x.requires_grad()) {
                    double mean_w = 0.0, mean_wh = 0.0;
                    for (std::size_t j = 0; j < dlast; ++j) {
                        const double w = self.grad[base + j] * gain.at(j);
                        mean_w += w;
                        mean_wh += w * (*xhat)[base + j];
                    }
                    mean_w /= static_cast<double>(dlast);
                    mean_wh /= static_cast<double>(dlast);
                    const double is = (*inv_sigma)[r];
                    for (std::size_t j = 0; j < dlast; ++j) {
                        const double w = self.grad[base + j] * gain.at(j);
                        x.raw()->grad[base + j] +=
                            (w - mean_w - (*xhat)[base + j] * mean_wh) * is;
                    }
                }
            }
        });
}

// Row gather from an embedding table; backward scatter-adds.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding table must be rank-2");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::size_t id : ids)
        if (id >= v)
            throw IndexError("embedding id " + std::to_string(id) + " out of table size " +
                             std::to_string(v));
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = table.at(ids[i] * d + j);
    return detail::make_op({ids.size(), d}, std::move(out), "embedding_lookup", {table},
                           [table, ids, d](TensorNode& self) {
                               if (!table.requires_grad()) return;
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                       table.raw()->grad[ids[i] * d + j] += self.grad[i * d + j];
                           });
}

// P[i, pick[i]] for each row -> rank-1.
inline Tensor pick(const Tensor& p, const std::vector<std::size_t>& idx) {
    if (p.rank() != 2) throw ShapeError("pick expects rank-2");
    const std::size_t r = p.dim(0), c = p.dim(1);
    if (idx.size() != r) throw ShapeError("pick index count mismatch");
    for (std::size_t i : idx)
        if (i >= c) throw IndexError("pick column out of range");
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) out[i] = p.at(i * c + idx[i]);
    return detail::make_op({r}, std::move(out), "pick", {p}, [p, idx, c](TensorNode& self) {
        if (!p.requires_grad()) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            p.raw()->grad[i * c + idx[i]] += self.grad[i];
    });
}

// Mean over flagged entries of a rank-1 tensor.
inline Tensor masked_mean(const Tensor& v, const std::vector<std::uint8_t>& keep) {
    if (v.rank() != 1 || keep.size() != v.dim(0)) throw ShapeError("masked_mean size mismatch");
    std::size_t n = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) {
            acc += v.at(i);
            ++n;
        }
    if (n == 0) throw ContractError("masked_mean: every position is masked out");
    const double inv = 1.0 / static_cast<double>(n);
    return detail::make_op({1}, {acc * inv}, "masked_mean", {v}, [v, keep, inv](TensorNode& self) {
        if (!v.requires_grad()) return;
        const double g = self.grad[0] * inv;
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (keep[i]) v.raw()->grad[i] += g;
    });
}

// Replace entries where visible==0 with a constant; gradient flows only
// through visible entries.
inline Tensor mask_fill(const Tensor& a, const std::vector<std::uint8_t>& visible, double value) {
    if (visible.size() != a.numel()) throw ShapeError("mask_fill size mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = visible[i] ? a.at(i) : value;
    return detail::make_op(a.dims(), std::move(out), "mask_fill", {a},
                           [a, visible](TensorNode& self) {
                               if (!a.requires_grad()) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   if (visible[i]) a.raw()->grad[i] += self.grad[i];
                           });
}

// softmax(q k^T / sqrt(d)) v with optional visibility mask [Lq x Lk]
// (1 = attendable). Masked entries are forced to a huge negative score, so
// their weights underflow to exactly zero.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const std::vector<std::uint8_t>* mask = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention expects rank-2 q, k, v");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("attention feature dims: " + shape_str(q.dims()) + " vs " +
                         shape_str(k.dims()));
    if (k.dim(0) != v.dim(0)) throw ShapeError("attention key/value count mismatch");
    const std::size_t lq = q.dim(0), lk = k.dim(0);
    if (mask) {
        if (mask->size() != lq * lk) throw ShapeError("attention mask size mismatch");
        for (std::size_t i = 0; i < lq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < lk; ++j) any = any || (*mask)[i * lk + j];
            if (!any)
                throw ContractError("attention row " + std::to_string(i) + " has no valid key");
        }
    }
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
    if (mask) scores = mask_fill(scores, *mask, detail::kMaskedScore);
    return matmul(softmax(scores, 1), v);
}

} // namespace asgk
