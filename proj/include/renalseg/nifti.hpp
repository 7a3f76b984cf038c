#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reader and writer for 3D volumes of
// uint8, int16 or float32 voxels.

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "renalseg/volume.hpp"

namespace renalseg {

enum class NiftiDataType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

class NiftiError : public DataError {
public:
    enum class Kind { io, not_nifti, bad_magic, unsupported_datatype, unsupported_dim, corrupt_gzip, truncated };
    NiftiError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

namespace nifti_detail {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

inline bool has_gz_suffix(const std::string& path) {
    return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NiftiError(NiftiError::Kind::io, "cannot open NIfTI file: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        gzFile gz = gzopen(path.c_str(), "rb");
        if (!gz) throw NiftiError(NiftiError::Kind::io, "cannot open gzip stream: " + path);
        std::vector<std::uint8_t> out;
        std::uint8_t buf[1 << 16];
        for (;;) {
            const int n = gzread(gz, buf, sizeof(buf));
            if (n < 0) {
                int err = 0;
                std::string msg = gzerror(gz, &err);
                gzclose(gz);
                throw NiftiError(NiftiError::Kind::corrupt_gzip, "corrupt gzip stream in " + path + ": " + msg);
            }
            if (n == 0) break;
            out.insert(out.end(), buf, buf + n);
        }
        const int rc = gzclose(gz);
        if (rc != Z_OK) throw NiftiError(NiftiError::Kind::corrupt_gzip, "corrupt gzip stream in " + path);
        return out;
    }
    return raw;
}

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& b, bool swap) : bytes_(b), swap_(swap) {}
    template <class T>
    T get(std::size_t off) const {
        T v;
        std::uint8_t tmp[sizeof(T)];
        std::memcpy(tmp, bytes_.data() + off, sizeof(T));
        if (swap_) std::reverse(tmp, tmp + sizeof(T));
        std::memcpy(&v, tmp, sizeof(T));
        return v;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    bool swap_;
};

class ByteWriter {
public:
    explicit ByteWriter(std::vector<std::uint8_t>& b) : bytes_(b) {}
    template <class T>
    void put(std::size_t off, T v) {
        static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
        std::memcpy(bytes_.data() + off, &v, sizeof(T));
    }

private:
    std::vector<std::uint8_t>& bytes_;
};

// Rotation (proper, det +1) to unit quaternion (b, c, d); a >= 0.
inline std::array<double, 3> quaternion_of(const Mat3& r) {
    const double trace = r[0][0] + r[1][1] + r[2][2];
    double a, b, c, d;
    if (trace > 0.0) {
        const double s = 0.5 / std::sqrt(trace + 1.0);
        a = 0.25 / s;
        b = (r[2][1] - r[1][2]) * s;
        c = (r[0][2] - r[2][0]) * s;
        d = (r[1][0] - r[0][1]) * s;
    } else if (r[0][0] > r[1][1] && r[0][0] > r[2][2]) {
        const double s = 2.0 * std::sqrt(1.0 + r[0][0] - r[1][1] - r[2][2]);
        a = (r[2][1] - r[1][2]) / s;
        b = 0.25 * s;
        c = (r[0][1] + r[1][0]) / s;
        d = (r[0][2] + r[2][0]) / s;
    } else if (r[1][1] > r[2][2]) {
        const double s = 2.0 * std::sqrt(1.0 + r[1][1] - r[0][0] - r[2][2]);
        a = (r[0][2] - r[2][0]) / s;
        b = (r[0][1] + r[1][0]) / s;
        c = 0.25 * s;
        d = (r[1][2] + r[2][1]) / s;
    } else {
        const double s = 2.0 * std::sqrt(1.0 + r[2][2] - r[0][0] - r[1][1]);
        a = (r[1][0] - r[0][1]) / s;
        b = (r[0][2] + r[2][0]) / s;
        c = (r[1][2] + r[2][1]) / s;
        d = 0.25 * s;
    }
    if (a < 0.0) b = -b, c = -c, d = -d;
    return {b, c, d};
}

inline Mat3 rotation_of(double b, double c, double d) {
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    return {{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
             {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
             {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
}

template <class T>
constexpr NiftiDataType default_dtype() {
    if constexpr (std::is_same_v<T, std::uint8_t>) return NiftiDataType::uint8;
    else if constexpr (std::is_same_v<T, std::int16_t>) return NiftiDataType::int16;
    else return NiftiDataType::float32;
}

}  // namespace nifti_detail

struct NiftiInfo {
    NiftiDataType datatype = NiftiDataType::float32;
    bool byte_swapped = false;
    bool gzipped = false;
    short sform_code = 0;
    short qform_code = 0;
};

/// Encodes a volume as NIfTI-1 bytes (header, 4-byte empty extension, voxels).
template <class T>
std::vector<std::uint8_t> encode_nifti(const Image<T>& v, NiftiDataType dtype) {
    using namespace nifti_detail;
    v.geometry.validate();
    const int bytes_per = dtype == NiftiDataType::uint8 ? 1 : dtype == NiftiDataType::int16 ? 2 : 4;
    std::vector<std::uint8_t> out(kVoxOffset + v.size() * bytes_per, 0);
    ByteWriter w(out);
    w.put<std::int32_t>(0, 348);
    w.put<char>(38, 'r');
    const std::int16_t dims[8] = {3, std::int16_t(v.shape[0]), std::int16_t(v.shape[1]), std::int16_t(v.shape[2]), 1, 1, 1, 1};
    for (auto n : v.shape)
        if (n > 32767) throw DataError("write_nifti: dimension exceeds NIfTI-1 limit");
    for (int i = 0; i < 8; ++i) w.put<std::int16_t>(40 + 2 * i, dims[i]);
    w.put<std::int16_t>(70, static_cast<std::int16_t>(dtype));
    w.put<std::int16_t>(72, static_cast<std::int16_t>(bytes_per * 8));

    const Geometry& g = v.geometry;
    Mat3 rot = g.direction;
    float qfac = 1.0f;
    if (det3(rot) < 0.0) {
        qfac = -1.0f;
        for (int r = 0; r < 3; ++r) rot[r][2] = -rot[r][2];
    }
    const float pixdim[8] = {qfac, float(g.spacing[0]), float(g.spacing[1]), float(g.spacing[2]), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) w.put<float>(76 + 4 * i, pixdim[i]);
    w.put<float>(108, float(kVoxOffset));
    w.put<float>(112, 0.0f);  // scl_slope 0 = no scaling
    w.put<char>(123, 2);      // mm
    const char descrip[] = "renalseg";
    std::memcpy(out.data() + 148, descrip, sizeof(descrip) - 1);
    w.put<std::int16_t>(252, 1);  // qform: scanner
    w.put<std::int16_t>(254, 1);  // sform: scanner
    const auto q = quaternion_of(rot);
    w.put<float>(256, float(q[0]));
    w.put<float>(260, float(q[1]));
    w.put<float>(264, float(q[2]));
    for (int r = 0; r < 3; ++r) w.put<float>(268 + 4 * r, float(g.origin[r]));
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) w.put<float>(280 + 16 * r + 4 * c, float(g.direction[r][c] * g.spacing[c]));
        w.put<float>(280 + 16 * r + 12, float(g.origin[r]));
    }
    std::memcpy(out.data() + 344, "n+1\0", 4);

    std::uint8_t* dst = out.data() + kVoxOffset;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = double(v.data[i]);
        switch (dtype) {
            case NiftiDataType::uint8: dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(x), 0L, 255L)); break;
            case NiftiDataType::int16: {
                const auto s = static_cast<std::int16_t>(std::clamp(std::lround(x), -32768L, 32767L));
                std::memcpy(dst + 2 * i, &s, 2);
                break;
            }
            case NiftiDataType::float32: {
                const float f = static_cast<float>(x);
                std::memcpy(dst + 4 * i, &f, 4);
                break;
            }
        }
    }
    return out;
}

/// Writes a NIfTI-1 file; a ".gz" suffix selects gzip compression.
template <class T>
void write_nifti(const Image<T>& v, const std::string& path, NiftiDataType dtype = nifti_detail::default_dtype<T>()) {
    const auto bytes = encode_nifti(v, dtype);
    if (nifti_detail::has_gz_suffix(path)) {
        gzFile gz = gzopen(path.c_str(), "wb6");
        if (!gz) throw NiftiError(NiftiError::Kind::io, "cannot write NIfTI file: " + path);
        const int n = gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
        if (gzclose(gz) != Z_OK || n != int(bytes.size()))
            throw NiftiError(NiftiError::Kind::io, "failed writing gzip NIfTI file: " + path);
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NiftiError(NiftiError::Kind::io, "cannot write NIfTI file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw NiftiError(NiftiError::Kind::io, "failed writing NIfTI file: " + path);
}

/// Decodes NIfTI-1 bytes, converting voxels to T.
template <class T>
Image<T> decode_nifti(const std::vector<std::uint8_t>& bytes, const std::string& name, NiftiInfo* info = nullptr) {
    using namespace nifti_detail;
    using K = NiftiError::Kind;
    if (bytes.size() < kHeaderSize) throw NiftiError(K::not_nifti, name + ": not NIfTI-1 (file shorter than header)");
    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes.data(), 4);
    bool swap = false;
    if (sizeof_hdr != 348) {
        if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) != 348u) throw NiftiError(K::not_nifti, name + ": not NIfTI-1 (sizeof_hdr != 348)");
        swap = true;
    }
    if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
        throw NiftiError(K::bad_magic, name + ": bad magic (expected single-file \"n+1\")");
    ByteReader r(bytes, swap);
    const auto ndim = r.get<std::int16_t>(40);
    Index3 shape{};
    for (int i = 0; i < 3; ++i) shape[i] = r.get<std::int16_t>(42 + 2 * i);
    bool extra = false;
    for (int i = 3; i < ndim && i < 7; ++i)
        if (r.get<std::int16_t>(42 + 2 * i) > 1) extra = true;
    if (ndim < 1 || ndim > 7 || extra || shape[0] < 1 || (ndim >= 2 && shape[1] < 1) || (ndim >= 3 && shape[2] < 1))
        throw NiftiError(K::unsupported_dim, name + ": unsupported dimensions (need 3 spatial dims)");
    for (int i = ndim; i < 3; ++i) shape[i] = 1;
    const auto dcode = r.get<std::int16_t>(70);
    if (dcode != 2 && dcode != 4 && dcode != 16)
        throw NiftiError(K::unsupported_datatype, name + ": unsupported datatype code " + std::to_string(dcode));
    const auto dtype = static_cast<NiftiDataType>(dcode);
    const int bytes_per = dcode == 2 ? 1 : dcode == 4 ? 2 : 4;

    Geometry g;
    float pixdim[4];
    for (int i = 0; i < 4; ++i) pixdim[i] = r.get<float>(76 + 4 * i);
    for (int a = 0; a < 3; ++a) g.spacing[a] = pixdim[a + 1] > 0 ? pixdim[a + 1] : 1.0;
    const auto qform_code = r.get<std::int16_t>(252);
    const auto sform_code = r.get<std::int16_t>(254);
    if (sform_code > 0) {
        for (int row = 0; row < 3; ++row) {
            for (int c = 0; c < 3; ++c) g.direction[row][c] = r.get<float>(280 + 16 * row + 4 * c);
            g.origin[row] = r.get<float>(280 + 16 * row + 12);
        }
        for (int c = 0; c < 3; ++c) {
            double norm = 0.0;
            for (int row = 0; row < 3; ++row) norm += g.direction[row][c] * g.direction[row][c];
            norm = std::sqrt(norm);
            if (norm <= 0.0) throw DataError(name + ": degenerate sform");
            for (int row = 0; row < 3; ++row) g.direction[row][c] /= norm;
        }
    } else if (qform_code > 0) {
        g.direction = rotation_of(r.get<float>(256), r.get<float>(260), r.get<float>(264));
        if (pixdim[0] < 0.0f)
            for (int row = 0; row < 3; ++row) g.direction[row][2] = -g.direction[row][2];
        for (int row = 0; row < 3; ++row) g.origin[row] = r.get<float>(268 + 4 * row);
    }

    const auto vox_offset = static_cast<std::size_t>(r.get<float>(108));
    const std::size_t count = static_cast<std::size_t>(shape[0] * shape[1] * shape[2]);
    if (vox_offset < kHeaderSize || bytes.size() < vox_offset + count * bytes_per)
        throw NiftiError(K::truncated, name + ": truncated voxel data");
    float slope = r.get<float>(112);
    const float inter = r.get<float>(116);
    const bool scaled = slope != 0.0f && std::isfinite(slope) && (slope != 1.0f || inter != 0.0f);

    Image<T> out;
    out.shape = shape;
    out.geometry = g;
    out.data.resize(count);
    const std::uint8_t* src = bytes.data() + vox_offset;
    for (std::size_t i = 0; i < count; ++i) {
        double x;
        switch (dtype) {
            case NiftiDataType::uint8: x = src[i]; break;
            case NiftiDataType::int16: x = r.get<std::int16_t>(vox_offset + 2 * i); break;
            default: x = r.get<float>(vox_offset + 4 * i); break;
        }
        if (scaled) x = x * slope + inter;
        if constexpr (std::is_integral_v<T>)
            out.data[i] = static_cast<T>(std::lround(x));
        else
            out.data[i] = static_cast<T>(x);
    }
    if (info) *info = NiftiInfo{dtype, swap, false, sform_code, qform_code};
    return out;
}

template <class T>
Image<T> read_nifti(const std::string& path, NiftiInfo* info = nullptr) {
    const auto raw = nifti_detail::read_file_bytes(path);
    auto img = decode_nifti<T>(raw, path, info);
    img.geometry.validate();
    return img;
}

inline LabelVolume read_labels(const std::string& path) {
    auto labels = read_nifti<std::uint8_t>(path);
    validate_labels(labels);
    return labels;
}

}  // namespace renalseg
