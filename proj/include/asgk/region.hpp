#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "asgk/image.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

struct Region {
    std::vector<std::uint8_t> mask; // S*S, row-major
    std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0; // inclusive bbox
    std::size_t area = 0;
    bool fallback = false;
    std::size_t grid = 0; // S
};

// Saliency map: per-pixel channel-wise max of |f_c|, then min-max normalized
// to [0,1]. A constant map normalizes to all zeros. Value-only (no tape).
inline Tensor heatmap(const Tensor& f_c) {
    if (f_c.rank() != 3) throw ShapeError("heatmap expects [C x S x S]");
    const std::size_t c = f_c.dim(0), hw = f_c.dim(1) * f_c.dim(2);
    Tensor h = Tensor::zeros({f_c.dim(1), f_c.dim(2)});
    auto out = h.mutable_values();
    for (std::size_t i = 0; i < hw; ++i) {
        double mx = 0.0;
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, std::fabs(f_c.at(k * hw + i)));
        out[i] = mx;
    }
    double lo = out[0], hi = out[0];
    for (std::size_t i = 1; i < hw; ++i) {
        lo = std::min(lo, out[i]);
        hi = std::max(hi, out[i]);
    }
    if (hi > lo) {
        const double inv = 1.0 / (hi - lo);
        for (std::size_t i = 0; i < hw; ++i) out[i] = (out[i] - lo) * inv;
    } else {
        for (std::size_t i = 0; i < hw; ++i) out[i] = 0.0;
    }
    return h;
}

namespace detail {
struct DisjointSet {
    std::vector<std::size_t> parent;
    explicit DisjointSet(std::size_t n) : parent(n) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        // anchor to the smaller root so component ids stay row-major stable
        if (a < b) parent[b] = a;
        else parent[a] = b;
    }
};
} // namespace detail

// Threshold H > tau, take the largest 4-connected component; ties go to the
// component whose first pixel comes earliest in row-major order. An empty
// mask yields a full-grid fallback region.
// Process-wide call counter; lets training logs prove the region path is
// never taken when the internal signal is disabled.
inline std::size_t& region_call_counter() {
    static std::size_t n = 0;
    return n;
}

inline Region extract_region(const Tensor& h, double tau) {
    if (h.rank() != 2 || h.dim(0) != h.dim(1)) throw ShapeError("extract_region expects [S x S]");
    ++region_call_counter();
    const std::size_t s = h.dim(0), n = s * s;
    Region reg;
    reg.grid = s;
    std::vector<std::uint8_t> bin(n, 0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        bin[i] = h.at(i) > tau ? 1 : 0;
        any = any || bin[i];
    }
    if (!any) {
        reg.mask.assign(n, 1);
        reg.r0 = reg.c0 = 0;
        reg.r1 = reg.c1 = s - 1;
        reg.area = n;
        reg.fallback = true;
        return reg;
    }

    detail::DisjointSet ds(n);
    for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) {
            const std::size_t i = r * s + c;
            if (!bin[i]) continue;
            if (c + 1 < s && bin[i + 1]) ds.unite(i, i + 1);
            if (r + 1 < s && bin[i + s]) ds.unite(i, i + s);
        }

    // tally per-root area and earliest pixel
    std::vector<std::size_t> area(n, 0), first(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!bin[i]) continue;
        const std::size_t root = ds.find(i);
        ++area[root];
        if (first[root] == n) first[root] = i;
    }
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (!area[i]) continue;
        if (best == n || area[i] > area[best] ||
            (area[i] == area[best] && first[i] < first[best]))
            best = i;
    }

    reg.mask.assign(n, 0);
    reg.r0 = reg.c0 = s;
    reg.r1 = reg.c1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!bin[i] || ds.find(i) != best) continue;
        reg.mask[i] = 1;
        ++reg.area;
        const std::size_t r = i / s, c = i % s;
        reg.r0 = std::min(reg.r0, r);
        reg.c0 = std::min(reg.c0, c);
        reg.r1 = std::max(reg.r1, r);
        reg.c1 = std::max(reg.c1, c);
    }
    return reg;
}

// Map the heat-map bbox into image coordinates (factor image_size / S),
// crop, and resize back to the backbone input size.
inline Tensor crop_resize(const Tensor& image, const Region& region, std::size_t out_size) {
    if (image.rank() != 2 || image.dim(0) != image.dim(1))
        throw ShapeError("crop_resize expects a square [H x H] image");
    if (region.grid == 0) throw ContractError("crop_resize on an uninitialized region");
    const std::size_t h = image.dim(0);
    const double f = static_cast<double>(h) / static_cast<double>(region.grid);
    const auto lo = [&](std::size_t v) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(v) * f));
    };
    const auto hi = [&](std::size_t v) {
        const double edge = std::ceil(static_cast<double>(v + 1) * f) - 1.0;
        return std::min(h - 1, static_cast<std::size_t>(edge));
    };
    return bilinear_resize(crop(image, lo(region.r0), lo(region.c0), hi(region.r1), hi(region.c1)),
                           out_size, out_size);
}

// Run-length encoding of the mask (row-major, alternating zero/one run
// lengths starting with zeros) for the CLI JSON surface.
inline std::vector<std::size_t> mask_rle(const std::vector<std::uint8_t>& mask) {
    std::vector<std::size_t> runs;
    std::uint8_t cur = 0;
    std::size_t len = 0;
    for (std::uint8_t v : mask) {
        if ((v != 0) == (cur != 0)) {
            ++len;
        } else {
            runs.push_back(len);
            cur = v;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

} // namespace asgk
