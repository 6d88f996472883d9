#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "asgk/errors.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

// Grayscale images are rank-2 tensors [H x W] with values in [0,1].

inline void save_pgm(const std::string& path, const Tensor& img) {
    if (img.rank() != 2) throw ShapeError("save_pgm expects rank-2 [H x W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    const std::size_t h = img.dim(0), w = img.dim(1);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> bytes(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::min(std::max(img.at(i), 0.0), 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("short write to " + path);
}

namespace detail {
// Next whitespace-delimited token, skipping '#' comments (PGM header syntax).
inline std::string pgm_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {}
            continue;
        }
        if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            break;
        }
    }
    while ((c = is.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
    return tok;
}
} // namespace detail

inline Tensor load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    if (detail::pgm_token(is) != "P5") throw DataError(path + ": not a binary PGM (P5)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(detail::pgm_token(is));
        h = std::stoul(detail::pgm_token(is));
        maxval = std::stoul(detail::pgm_token(is));
    } catch (const std::exception&) {
        throw DataError(path + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255)
        throw DataError(path + ": unsupported PGM geometry/maxval");
    std::vector<unsigned char> bytes(h * w);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(is.gcount()) != bytes.size())
        throw DataError(path + ": truncated pixel data");
    Tensor img = Tensor::zeros({h, w});
    auto px = img.mutable_values();
    const double scale = 1.0 / static_cast<double>(maxval);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        px[i] = std::min(1.0, static_cast<double>(bytes[i]) * scale);
    return img;
}

// Bilinear resample with half-pixel centers; clamped at borders.
inline Tensor bilinear_resize(const Tensor& src, std::size_t out_h, std::size_t out_w) {
    if (src.rank() != 2) throw ShapeError("bilinear_resize expects rank-2 [H x W]");
    const std::size_t in_h = src.dim(0), in_w = src.dim(1);
    if (in_h == 0 || in_w == 0) throw ShapeError("bilinear_resize on empty image");
    Tensor out = Tensor::zeros({out_h, out_w});
    auto dst = out.mutable_values();
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(in_h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, in_h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(in_w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, in_w - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = src.at(y0 * in_w + x0) * (1.0 - wx) + src.at(y0 * in_w + x1) * wx;
            const double bot = src.at(y1 * in_w + x0) * (1.0 - wx) + src.at(y1 * in_w + x1) * wx;
            dst[y * out_w + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    return out;
}

// Inclusive-coordinate crop.
inline Tensor crop(const Tensor& src, std::size_t r0, std::size_t c0, std::size_t r1,
                   std::size_t c1) {
    if (src.rank() != 2) throw ShapeError("crop expects rank-2 [H x W]");
    if (r1 >= src.dim(0) || c1 >= src.dim(1) || r0 > r1 || c0 > c1)
        throw IndexError("crop window out of bounds");
    const std::size_t h = r1 - r0 + 1, w = c1 - c0 + 1;
    Tensor out = Tensor::zeros({h, w});
    auto dst = out.mutable_values();
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            dst[r * w + c] = src.at((r0 + r) * src.dim(1) + c0 + c);
    return out;
}

} // namespace asgk
