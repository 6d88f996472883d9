#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "asgk/errors.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

// Binary snapshot: "ASGK" magic, u32 version, named tensor records (u32 name
// length, name bytes, u32 rank, u64 dims, 64-bit LE values), a trailing JSON
// config blob, and a 64-bit FNV-1a checksum over everything after the magic
// and version. Doubles survive the round trip bitwise.
struct Checkpoint {
    std::map<std::string, Tensor> tensors; // name order fixes the byte layout
    nlohmann::json config;
};

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    std::uint8_t u8() {
        if (pos >= buf.size()) throw DataError("checkpoint truncated");
        return buf[pos++];
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
};

inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::vector<std::uint8_t> payload;
    detail::put_u32(payload, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        if (!t.defined()) throw ContractError("checkpoint tensor '" + name + "' is empty");
        detail::put_u32(payload, static_cast<std::uint32_t>(name.size()));
        payload.insert(payload.end(), name.begin(), name.end());
        detail::put_u32(payload, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) detail::put_u64(payload, t.dim(d));
        for (double v : t.values()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
    const std::string cfg = ckpt.config.dump();
    detail::put_u64(payload, cfg.size());
    payload.insert(payload.end(), cfg.begin(), cfg.end());

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path);
    std::vector<std::uint8_t> head;
    head.insert(head.end(), {'A', 'S', 'G', 'K'});
    detail::put_u32(head, kCheckpointVersion);
    detail::put_u64(head, detail::fnv1a(payload.data(), payload.size()));
    os.write(reinterpret_cast<const char*>(head.data()),
             static_cast<std::streamsize>(head.size()));
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    if (!os) throw DataError("short write to checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 16 || buf[0] != 'A' || buf[1] != 'S' || buf[2] != 'G' || buf[3] != 'K')
        throw DataError(path + ": not a checkpoint (bad magic)");
    detail::ByteReader rd{buf, 4};
    const std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version) +
                        " (this build reads version " + std::to_string(kCheckpointVersion) +
                        ")");
    const std::uint64_t stored = rd.u64();
    if (detail::fnv1a(buf.data() + rd.pos, buf.size() - rd.pos) != stored)
        throw DataError(path + ": checksum mismatch, file corrupt");

    Checkpoint ckpt;
    const std::uint32_t count = rd.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = rd.u32();
        std::string name;
        for (std::uint32_t j = 0; j < name_len; ++j)
            name.push_back(static_cast<char>(rd.u8()));
        const std::uint32_t rank = rd.u32();
        Shape dims;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            dims.push_back(rd.u64());
            numel *= dims.back();
        }
        std::vector<double> vals(numel);
        for (std::size_t v = 0; v < numel; ++v)
            vals[v] = std::bit_cast<double>(rd.u64());
        ckpt.tensors.emplace(name, Tensor::from(dims, vals));
    }
    const std::uint64_t cfg_len = rd.u64();
    std::string cfg;
    for (std::uint64_t i = 0; i < cfg_len; ++i) cfg.push_back(static_cast<char>(rd.u8()));
    ckpt.config = nlohmann::json::parse(cfg, nullptr, false);
    if (ckpt.config.is_discarded())
        throw DataError(path + ": embedded config snapshot is not valid JSON");
    return ckpt;
}

// Copy a stored tensor's values into a live parameter; shape difference is a
// hard error that names the offender.
inline void restore_into(const Checkpoint& ckpt, const std::string& name, Tensor dst) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
        throw DataError("checkpoint is missing tensor '" + name + "'");
    const Tensor& src = it->second;
    if (src.dims() != dst.dims()) {
        std::string want, have;
        for (std::size_t d = 0; d < dst.rank(); ++d)
            want += (d ? "x" : "") + std::to_string(dst.dim(d));
        for (std::size_t d = 0; d < src.rank(); ++d)
            have += (d ? "x" : "") + std::to_string(src.dim(d));
        throw DataError("checkpoint tensor '" + name + "' has shape " + have +
                        " but the model expects " + want);
    }
    auto out = dst.mutable_values();
    auto in = src.values();
    std::copy(in.begin(), in.end(), out.begin());
}

} // namespace asgk
