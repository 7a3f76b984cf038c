#pragma once

// Volumes with physical geometry, plus the geometric preprocessing steps:
// reorientation, resampling, foreground cropping and intensity normalization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "renalseg/errors.hpp"

namespace renalseg {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<std::int64_t, 3>;
/// Row-major 3x3; column j is the world direction of index axis j.
using Mat3 = std::array<std::array<double, 3>, 3>;

inline constexpr Mat3 identity3() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline double det3(const Mat3& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

struct Geometry {
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    Mat3 direction = identity3();

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
                throw DataError("geometry: spacing must be positive");
            double norm = 0.0;
            for (int r = 0; r < 3; ++r) norm += direction[r][a] * direction[r][a];
            if (std::abs(std::sqrt(norm) - 1.0) > 1e-4)
                throw DataError("geometry: direction column " + std::to_string(a) + " is not unit length");
        }
        if (std::abs(std::abs(det3(direction)) - 1.0) > 1e-4)
            throw DataError("geometry: direction matrix is not orthonormal");
    }

    /// World position (mm) of a continuous voxel index.
    Vec3 world(double i, double j, double k) const {
        const double s[3] = {i * spacing[0], j * spacing[1], k * spacing[2]};
        Vec3 w = origin;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) w[r] += direction[r][c] * s[c];
        return w;
    }

    /// Continuous voxel index of a world position (inverse of world()).
    Vec3 index_of(const Vec3& w) const {
        Vec3 d{w[0] - origin[0], w[1] - origin[1], w[2] - origin[2]};
        Vec3 idx{};
        // direction is orthonormal, so its inverse is its transpose.
        for (int c = 0; c < 3; ++c) {
            double s = 0.0;
            for (int r = 0; r < 3; ++r) s += direction[r][c] * d[r];
            idx[c] = s / spacing[c];
        }
        return idx;
    }

    bool operator==(const Geometry&) const = default;
};

inline bool nearly_equal(const Geometry& a, const Geometry& b, double tol = 1e-5) {
    for (int i = 0; i < 3; ++i) {
        if (std::abs(a.spacing[i] - b.spacing[i]) > tol) return false;
        if (std::abs(a.origin[i] - b.origin[i]) > tol) return false;
        for (int j = 0; j < 3; ++j)
            if (std::abs(a.direction[i][j] - b.direction[i][j]) > tol) return false;
    }
    return true;
}

/// Dense 3D grid, x fastest: linear index = x + nx * (y + ny * z).
template <class T>
struct Image {
    using value_type = T;

    Index3 shape{0, 0, 0};
    std::vector<T> data;
    Geometry geometry;

    Image() = default;
    Image(Index3 s, Geometry g = {}, T fill = T{}) : shape(s), geometry(g) {
        for (auto n : s)
            if (n <= 0) throw DataError("image: shape must be positive");
        data.assign(static_cast<std::size_t>(s[0] * s[1] * s[2]), fill);
    }

    std::size_t size() const { return data.size(); }
    std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return static_cast<std::size_t>(x + shape[0] * (y + shape[1] * z));
    }
    T& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[index(x, y, z)]; }
    const T& at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[index(x, y, z)]; }
    Index3 coords(std::size_t linear) const {
        const auto l = static_cast<std::int64_t>(linear);
        return {l % shape[0], (l / shape[0]) % shape[1], l / (shape[0] * shape[1])};
    }
    bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < shape[0] && y < shape[1] && z < shape[2];
    }
    Vec3 world(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return geometry.world(double(x), double(y), double(z));
    }
    double voxel_volume_mm3() const { return geometry.spacing[0] * geometry.spacing[1] * geometry.spacing[2]; }

    template <class U>
    Image<U> like(U fill = U{}) const {
        Image<U> out;
        out.shape = shape;
        out.geometry = geometry;
        out.data.assign(data.size(), fill);
        return out;
    }

    template <class U>
    Image<U> cast() const {
        Image<U> out = like<U>();
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

/// Intensity volume (HU or normalized values).
using Volume = Image<float>;
/// Class-id volume.
using LabelVolume = Image<std::uint8_t>;

enum ClassId : std::uint8_t { kBackground = 0, kKidney = 1, kTumor = 2, kCyst = 3, kArtery = 4, kVein = 5 };

/// Splitmix-style combination of two seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

using ClassTable = std::map<std::uint8_t, std::string>;

inline const ClassTable& default_class_table() {
    static const ClassTable table{{0, "background"}, {1, "kidney"}, {2, "tumor"},
                                  {3, "cyst"},       {4, "artery"}, {5, "vein"}};
    return table;
}

inline void validate_labels(const LabelVolume& labels, const ClassTable& table = default_class_table()) {
    std::array<bool, 256> seen{};
    for (auto v : labels.data) seen[v] = true;
    for (int id = 0; id < 256; ++id)
        if (seen[id] && !table.count(static_cast<std::uint8_t>(id)))
            throw DataError("label volume holds id " + std::to_string(id) + " missing from the class table");
}

template <class A, class B>
void require_same_grid(const Image<A>& a, const Image<B>& b, const char* what) {
    if (a.shape != b.shape || !nearly_equal(a.geometry, b.geometry, 1e-4))
        throw GeometryMismatch(std::string(what) + ": geometry mismatch");
}

/// Half-open voxel box [lo, hi).
struct BBox {
    Index3 lo{0, 0, 0};
    Index3 hi{0, 0, 0};

    Index3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    bool empty() const { return hi[0] <= lo[0] || hi[1] <= lo[1] || hi[2] <= lo[2]; }
    bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
    }
    void validate(const Index3& shape) const {
        for (int a = 0; a < 3; ++a)
            if (lo[a] < 0 || lo[a] >= hi[a] || hi[a] > shape[a])
                throw DataError("bbox out of range on axis " + std::to_string(a));
    }
    bool operator==(const BBox&) const = default;
};

struct NormSpec {
    double clip_lo = 0.0;
    double clip_hi = 1.0;
    double mean = 0.0;
    double std = 1.0;

    void validate() const {
        if (!(clip_lo < clip_hi)) throw UsageError("norm spec: clip_lo must be below clip_hi");
        if (!(std > 0.0)) throw UsageError("norm spec: std must be positive");
    }
};

/// Foreground intensity statistics of the low-resolution localization data.
inline constexpr NormSpec kStageINorm{-79.0, 303.0, 100.2, 76.6};
/// Same for the high-resolution kidney crops.
inline constexpr NormSpec kStageIINorm{-69.0, 426.0, 137.5, 88.9};

inline constexpr Vec3 kStageISpacing{2.4, 2.4, 3.0};
inline constexpr Vec3 kStageIISpacing{0.7, 0.7, 1.0};

// ---------------------------------------------------------------------------

/// Permutes and flips axes so that the direction matrix becomes (near)
/// identity. Voxel-center world coordinates are preserved exactly.
template <class T>
Image<T> reorient_to_ras(const Image<T>& v) {
    v.geometry.validate();
    const Mat3& d = v.geometry.direction;
    std::array<int, 3> world_axis_of{};  // old index axis -> world axis
    std::array<bool, 3> flip{};
    std::array<bool, 3> used{};
    for (int j = 0; j < 3; ++j) {
        std::array<double, 3> mag{std::abs(d[0][j]), std::abs(d[1][j]), std::abs(d[2][j])};
        const int r = int(std::max_element(mag.begin(), mag.end()) - mag.begin());
        for (int o = 0; o < 3; ++o)
            if (o != r && mag[o] >= mag[r] - 1e-6)
                throw DataError("reorient: oblique direction matrix (no dominant axis) is unsupported");
        if (used[r]) throw DataError("reorient: degenerate direction matrix");
        used[r] = true;
        world_axis_of[j] = r;
        flip[j] = d[r][j] < 0.0;
    }

    Image<T> out;
    Geometry& g = out.geometry;
    std::array<int, 3> old_axis_of{};
    for (int j = 0; j < 3; ++j) old_axis_of[world_axis_of[j]] = j;
    Vec3 corner{};
    for (int j = 0; j < 3; ++j) corner[j] = flip[j] ? double(v.shape[j] - 1) : 0.0;
    g.origin = v.geometry.world(corner[0], corner[1], corner[2]);
    for (int a = 0; a < 3; ++a) {
        const int j = old_axis_of[a];
        out.shape[a] = v.shape[j];
        g.spacing[a] = v.geometry.spacing[j];
        for (int r = 0; r < 3; ++r) g.direction[r][a] = (flip[j] ? -1.0 : 1.0) * d[r][j];
    }
    out.data.resize(v.data.size());
    Index3 idx{};
    for (std::int64_t z = 0; z < out.shape[2]; ++z)
        for (std::int64_t y = 0; y < out.shape[1]; ++y)
            for (std::int64_t x = 0; x < out.shape[0]; ++x) {
                const std::int64_t n[3] = {x, y, z};
                for (int a = 0; a < 3; ++a) {
                    const int j = old_axis_of[a];
                    idx[j] = flip[j] ? v.shape[j] - 1 - n[a] : n[a];
                }
                out.at(x, y, z) = v.at(idx[0], idx[1], idx[2]);
            }
    return out;
}

enum class Interp { trilinear, nearest };

namespace detail {

template <class T>
T sample_trilinear(const Image<T>& v, double fx, double fy, double fz) {
    const double f[3] = {std::clamp(fx, 0.0, double(v.shape[0] - 1)), std::clamp(fy, 0.0, double(v.shape[1] - 1)),
                         std::clamp(fz, 0.0, double(v.shape[2] - 1))};
    std::int64_t i0[3], i1[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        i0[a] = static_cast<std::int64_t>(std::floor(f[a]));
        i1[a] = std::min<std::int64_t>(i0[a] + 1, v.shape[a] - 1);
        t[a] = f[a] - double(i0[a]);
    }
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) {
        const std::int64_t x = (c & 1) ? i1[0] : i0[0];
        const std::int64_t y = (c & 2) ? i1[1] : i0[1];
        const std::int64_t z = (c & 4) ? i1[2] : i0[2];
        const double w = ((c & 1) ? t[0] : 1 - t[0]) * ((c & 2) ? t[1] : 1 - t[1]) * ((c & 4) ? t[2] : 1 - t[2]);
        if (w != 0.0) acc += w * double(v.at(x, y, z));
    }
    return static_cast<T>(acc);
}

template <class T>
T sample_nearest(const Image<T>& v, double fx, double fy, double fz) {
    auto pick = [](double f, std::int64_t n) {
        return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(f + 0.5)), 0, n - 1);
    };
    return v.at(pick(fx, v.shape[0]), pick(fy, v.shape[1]), pick(fz, v.shape[2]));
}

}  // namespace detail

/// Resamples onto a grid with the given spacing. The origin stays fixed and
/// shape = ceil(extent / target); samples outside the source clamp to the edge.
template <class T>
Image<T> resample(const Image<T>& v, const Vec3& target, Interp interp) {
    if constexpr (std::is_integral_v<T>)
        if (interp != Interp::nearest) throw UsageError("resample: label volumes require nearest interpolation");
    for (double t : target)
        if (!(t > 0.0)) throw UsageError("resample: target spacing must be positive");
    Image<T> out;
    out.geometry = v.geometry;
    out.geometry.spacing = target;
    double ratio[3];
    for (int a = 0; a < 3; ++a) {
        ratio[a] = target[a] / v.geometry.spacing[a];
        // Round before ceil so that an exact multiple does not gain a voxel from float noise.
        const double n = double(v.shape[a]) * v.geometry.spacing[a] / target[a];
        out.shape[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(n - 1e-9)));
    }
    out.data.resize(static_cast<std::size_t>(out.shape[0] * out.shape[1] * out.shape[2]));
    for (std::int64_t z = 0; z < out.shape[2]; ++z)
        for (std::int64_t y = 0; y < out.shape[1]; ++y)
            for (std::int64_t x = 0; x < out.shape[0]; ++x) {
                const double fx = double(x) * ratio[0], fy = double(y) * ratio[1], fz = double(z) * ratio[2];
                out.at(x, y, z) = interp == Interp::nearest ? detail::sample_nearest(v, fx, fy, fz)
                                                            : detail::sample_trilinear(v, fx, fy, fz);
            }
    return out;
}

/// Nearest-neighbour resampling of `src` onto an arbitrary target grid, with
/// `outside` wherever the target voxel center falls outside the source extent.
template <class T>
Image<T> resample_onto(const Image<T>& src, Index3 shape, const Geometry& target, T outside = T{}) {
    Image<T> out(shape, target, outside);
    for (std::int64_t z = 0; z < shape[2]; ++z)
        for (std::int64_t y = 0; y < shape[1]; ++y)
            for (std::int64_t x = 0; x < shape[0]; ++x) {
                const Vec3 f = src.geometry.index_of(target.world(double(x), double(y), double(z)));
                std::int64_t n[3];
                bool inside = true;
                for (int a = 0; a < 3; ++a) {
                    n[a] = static_cast<std::int64_t>(std::floor(f[a] + 0.5));
                    if (n[a] < 0 || n[a] >= src.shape[a]) inside = false;
                }
                if (inside) out.at(x, y, z) = src.at(n[0], n[1], n[2]);
            }
    return out;
}

/// Tightest box around voxels strictly above `threshold`, grown by `margin`.
template <class T>
BBox foreground_bbox(const Image<T>& v, double threshold = -200.0, std::int64_t margin = 0) {
    BBox b{{v.shape[0], v.shape[1], v.shape[2]}, {-1, -1, -1}};
    bool any = false;
    for (std::int64_t z = 0; z < v.shape[2]; ++z)
        for (std::int64_t y = 0; y < v.shape[1]; ++y)
            for (std::int64_t x = 0; x < v.shape[0]; ++x) {
                if (!(double(v.at(x, y, z)) > threshold)) continue;
                any = true;
                const std::int64_t n[3] = {x, y, z};
                for (int a = 0; a < 3; ++a) {
                    b.lo[a] = std::min(b.lo[a], n[a]);
                    b.hi[a] = std::max(b.hi[a], n[a] + 1);
                }
            }
    if (!any) throw DataError("foreground_bbox: no voxel above threshold (empty foreground)");
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = std::max<std::int64_t>(0, b.lo[a] - margin);
        b.hi[a] = std::min<std::int64_t>(v.shape[a], b.hi[a] + margin);
    }
    return b;
}

template <class T>
Image<T> crop(const Image<T>& v, const BBox& box) {
    box.validate(v.shape);
    Image<T> out;
    out.shape = box.extent();
    out.geometry = v.geometry;
    out.geometry.origin = v.geometry.world(double(box.lo[0]), double(box.lo[1]), double(box.lo[2]));
    out.data.resize(static_cast<std::size_t>(out.shape[0] * out.shape[1] * out.shape[2]));
    for (std::int64_t z = 0; z < out.shape[2]; ++z)
        for (std::int64_t y = 0; y < out.shape[1]; ++y) {
            const auto* src = &v.at(box.lo[0], box.lo[1] + y, box.lo[2] + z);
            std::copy(src, src + out.shape[0], &out.at(0, y, z));
        }
    return out;
}

/// Writes `patch` into `dst` at offset `box.lo` (inverse of crop).
template <class T>
void paste(Image<T>& dst, const Image<T>& patch, const BBox& box) {
    box.validate(dst.shape);
    if (patch.shape != box.extent()) throw DataError("paste: patch shape does not match box");
    for (std::int64_t z = 0; z < patch.shape[2]; ++z)
        for (std::int64_t y = 0; y < patch.shape[1]; ++y) {
            const auto* src = &patch.at(0, y, z);
            std::copy(src, src + patch.shape[0], &dst.at(box.lo[0], box.lo[1] + y, box.lo[2] + z));
        }
}

/// Clip then z-score with a fixed spec.
inline float normalize_value(double in, const NormSpec& spec) {
    return static_cast<float>((std::clamp(in, spec.clip_lo, spec.clip_hi) - spec.mean) / spec.std);
}

template <class T>
Volume normalize(const Image<T>& v, const NormSpec& spec) {
    spec.validate();
    Volume out = v.template like<float>();
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = normalize_value(double(v.data[i]), spec);
    return out;
}

}  // namespace renalseg
