#pragma once

// Connected components and the vessel cleanup rules applied to fused labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/volume.hpp"

namespace renalseg {

struct Component {
    std::uint8_t cls = 0;
    std::vector<std::size_t> voxels;  // ascending linear indices
    std::int64_t voxel_count = 0;
    double volume_mm3 = 0.0;
    BBox bbox;
};

/// Maximal connected sets of voxels where `pred(value)` holds, ordered by
/// descending size, then by lowest linear index.
template <class T, class Pred>
std::vector<Component> connected_components_if(const Image<T>& v, Pred pred, int connectivity = 26) {
    if (connectivity != 6 && connectivity != 26) throw UsageError("connectivity must be 6 or 26");
    std::vector<std::array<std::int64_t, 3>> offsets;
    for (std::int64_t dz = -1; dz <= 1; ++dz)
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const auto manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
                if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
                offsets.push_back({dx, dy, dz});
            }
    std::vector<std::uint8_t> seen(v.size(), 0);
    std::vector<Component> out;
    std::vector<std::size_t> stack;
    const double vox = v.voxel_volume_mm3();
    for (std::size_t start = 0; start < v.size(); ++start) {
        if (seen[start] || !pred(v.data[start])) continue;
        Component c;
        c.bbox = {{v.shape[0], v.shape[1], v.shape[2]}, {0, 0, 0}};
        seen[start] = 1;
        stack.assign(1, start);
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            c.voxels.push_back(cur);
            const Index3 p = v.coords(cur);
            for (int a = 0; a < 3; ++a) {
                c.bbox.lo[a] = std::min(c.bbox.lo[a], p[a]);
                c.bbox.hi[a] = std::max(c.bbox.hi[a], p[a] + 1);
            }
            for (const auto& o : offsets) {
                const std::int64_t x = p[0] + o[0], y = p[1] + o[1], z = p[2] + o[2];
                if (!v.contains(x, y, z)) continue;
                const std::size_t n = v.index(x, y, z);
                if (seen[n] || !pred(v.data[n])) continue;
                seen[n] = 1;
                stack.push_back(n);
            }
        }
        std::sort(c.voxels.begin(), c.voxels.end());
        c.voxel_count = std::int64_t(c.voxels.size());
        c.volume_mm3 = double(c.voxel_count) * vox;
        c.cls = std::uint8_t(v.data[start] ? 1 : 0);
        out.push_back(std::move(c));
    }
    // Components are discovered in order of their lowest index, so a stable
    // sort on size gives the tie-break for free.
    std::stable_sort(out.begin(), out.end(),
                     [](const Component& a, const Component& b) { return a.voxel_count > b.voxel_count; });
    return out;
}

/// Components of the non-zero voxels of a binary mask.
inline std::vector<Component> connected_components(const LabelVolume& mask, int connectivity = 26) {
    return connected_components_if(mask, [](std::uint8_t v) { return v != 0; }, connectivity);
}

/// Components of a single class.
inline std::vector<Component> class_components(const LabelVolume& labels, std::uint8_t cls, int connectivity = 26) {
    auto comps = connected_components_if(labels, [cls](std::uint8_t v) { return v == cls; }, connectivity);
    for (auto& c : comps) c.cls = cls;
    return comps;
}

/// One line of the component census written to the case report.
struct CensusEntry {
    std::uint8_t cls = 0;
    std::int64_t voxel_count = 0;
    double volume_mm3 = 0.0;
    bool kept = true;
    std::string reason;
};

inline nlohmann::json to_json(const CensusEntry& e) {
    return {{"class", default_class_table().at(e.cls)},
            {"voxel_count", e.voxel_count},
            {"volume_mm3", e.volume_mm3},
            {"kept", e.kept},
            {"reason", e.reason}};
}

/// Removes artery and vein components smaller than `min_mm3`, class by class.
inline LabelVolume prune_small_vessels(const LabelVolume& labels, double min_mm3 = 150.0, int connectivity = 26,
                                       std::vector<CensusEntry>* census = nullptr) {
    LabelVolume out = labels;
    for (std::uint8_t cls : {std::uint8_t(kArtery), std::uint8_t(kVein)}) {
        for (const auto& c : class_components(labels, cls, connectivity)) {
            const bool keep = !(c.volume_mm3 < min_mm3);
            if (!keep)
                for (auto i : c.voxels) out.data[i] = kBackground;
            if (census) census->push_back({cls, c.voxel_count, c.volume_mm3, keep, keep ? "" : "below_min_volume"});
        }
    }
    return out;
}

/// Removes vessel components that share no voxel with `kidney_mask`.
inline LabelVolume drop_vessels_off_kidney(const LabelVolume& labels, const LabelVolume& kidney_mask,
                                           int connectivity = 26, std::vector<CensusEntry>* census = nullptr) {
    require_same_grid(labels, kidney_mask, "drop_vessels_off_kidney");
    LabelVolume out = labels;
    for (std::uint8_t cls : {std::uint8_t(kArtery), std::uint8_t(kVein)}) {
        for (const auto& c : class_components(labels, cls, connectivity)) {
            const bool touches =
                std::any_of(c.voxels.begin(), c.voxels.end(), [&](std::size_t i) { return kidney_mask.data[i] != 0; });
            if (!touches)
                for (auto i : c.voxels) out.data[i] = kBackground;
            if (census) census->push_back({cls, c.voxel_count, c.volume_mm3, touches, touches ? "" : "no_kidney_overlap"});
        }
    }
    return out;
}

/// Nearest-neighbour resample onto the original grid; background outside the
/// source extent.
inline LabelVolume rescale_to_original(const LabelVolume& labels, const Index3& shape, const Geometry& original) {
    original.validate();
    // World-space corners of both grids (voxel centers +- half a voxel).
    auto extent = [](const Index3& s, const Geometry& g) {
        std::array<double, 6> e{1e300, 1e300, 1e300, -1e300, -1e300, -1e300};
        for (int corner = 0; corner < 8; ++corner) {
            const Vec3 w = g.world((corner & 1) ? double(s[0]) - 0.5 : -0.5, (corner & 2) ? double(s[1]) - 0.5 : -0.5,
                                   (corner & 4) ? double(s[2]) - 0.5 : -0.5);
            for (int a = 0; a < 3; ++a) {
                e[a] = std::min(e[a], w[a]);
                e[3 + a] = std::max(e[3 + a], w[a]);
            }
        }
        return e;
    };
    const auto a = extent(labels.shape, labels.geometry);
    const auto b = extent(shape, original);
    for (int k = 0; k < 3; ++k)
        if (a[3 + k] <= b[k] || b[3 + k] <= a[k]) throw DataError("rescale_to_original: source and target extents are disjoint");
    return resample_onto(labels, shape, original, std::uint8_t(kBackground));
}

}  // namespace renalseg
