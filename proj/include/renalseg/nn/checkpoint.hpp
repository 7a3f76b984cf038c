#pragma once

// Binary checkpoint: "RSNET1", version byte, u32 count, then per parameter:
// u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64), u8 rank,
// rank x i64 dims, little-endian payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "renalseg/nn/unet.hpp"

namespace renalseg::nn {

inline constexpr char kCheckpointMagic[6] = {'R', 'S', 'N', 'E', 'T', '1'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
}

class Cursor {
public:
    Cursor(const std::vector<std::uint8_t>& b, std::string name) : b_(b), name_(std::move(name)) {}
    template <class V>
    V get() {
        V v;
        need(sizeof(V));
        std::memcpy(&v, b_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    void read(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, b_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw DataError(name_ + ": truncated checkpoint");
    }
    const std::vector<std::uint8_t>& b_;
    std::string name_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<T>& params) {
    using ckpt_detail::put;
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 6);
    out.push_back(kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, v] : params.entries()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(sizeof(T) == 4 ? 1 : 2);
        out.push_back(static_cast<std::uint8_t>(v.shape().size()));
        for (auto d : v.shape()) put<std::int64_t>(out, d);
        const auto* p = reinterpret_cast<const std::uint8_t*>(v.value().data.data());
        out.insert(out.end(), p, p + v.value().size() * sizeof(T));
    }
    return out;
}

/// Loads values into an already-built parameter store; names, shapes and
/// dtype must match exactly.
template <class T>
void decode_checkpoint(const std::vector<std::uint8_t>& bytes, ParamStore<T>& params, const std::string& name = "checkpoint") {
    ckpt_detail::Cursor cur(bytes, name);
    char magic[6];
    cur.read(magic, 6);
    if (std::memcmp(magic, kCheckpointMagic, 6) != 0) throw DataError(name + ": not a RSNET1 checkpoint");
    if (cur.get<std::uint8_t>() != kCheckpointVersion) throw DataError(name + ": unsupported checkpoint version");
    const auto count = cur.get<std::uint32_t>();
    if (count != params.size())
        throw DataError(name + ": checkpoint holds " + std::to_string(count) + " parameters, network expects " +
                        std::to_string(params.size()));
    for (auto& [pname, v] : params.entries()) {
        std::string stored(cur.get<std::uint32_t>(), '\0');
        cur.read(stored.data(), stored.size());
        if (stored != pname) throw DataError(name + ": parameter order mismatch at " + pname + " (found " + stored + ")");
        const auto dtype = cur.get<std::uint8_t>();
        if (dtype != (sizeof(T) == 4 ? 1 : 2)) throw DataError(name + ": dtype mismatch for " + pname);
        Shape shape(cur.get<std::uint8_t>());
        for (auto& d : shape) d = cur.get<std::int64_t>();
        if (shape != v.shape()) throw DataError(name + ": shape mismatch for " + pname);
        cur.read(v.mutable_value().data.data(), v.value().size() * sizeof(T));
    }
    if (!cur.done()) throw DataError(name + ": trailing bytes after checkpoint");
}

template <class T>
void save_checkpoint(const ParamStore<T>& params, const std::string& path) {
    const auto bytes = encode_checkpoint(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

template <class T>
void load_checkpoint(ParamStore<T>& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    decode_checkpoint(bytes, params, path);
}

}  // namespace renalseg::nn
