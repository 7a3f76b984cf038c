#pragma once

// Synthetic abdominal phantoms with exact ground truth: two kidneys with
// optional tumors and cysts, an arterial and a venous tree, soft tissue and
// an air shell.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/nifti.hpp"
#include "renalseg/parallel.hpp"
#include "renalseg/volume.hpp"

namespace renalseg {

struct HuModel {
    double mean = 0.0;
    double sd = 0.0;
};

struct Ellipsoid {
    Vec3 center{};  // mm, world
    Vec3 radii{};   // mm, axis-aligned
};

struct SphereLesion {
    Vec3 center{};
    double radius = 0.0;
    int kidney = 0;  // index into PhantomSpec::kidneys
};

struct Tube {
    std::vector<Vec3> centerline;  // polyline, mm
    double radius = 0.0;
    std::uint8_t cls = kArtery;
};

struct PhantomSpec {
    Index3 shape{112, 96, 64};
    Vec3 spacing{1.0, 1.0, 1.5};
    std::vector<Ellipsoid> kidneys;
    std::vector<SphereLesion> tumors;
    std::vector<SphereLesion> cysts;
    std::vector<Tube> vessels;
    HuModel background{40, 15}, kidney{120, 20}, tumor{80, 15}, cyst{10, 10}, artery{300, 30}, vein{180, 25};
    double air_hu = -1000.0;
    Vec3 body_semi_axes{0.46, 0.44, 0.0};  // elliptic cylinder along z, fraction of the in-plane extent
    std::uint64_t seed = 0;

    Geometry geometry() const {
        Geometry g;
        g.spacing = spacing;
        return g;
    }
    Vec3 extent() const { return {shape[0] * spacing[0], shape[1] * spacing[1], shape[2] * spacing[2]}; }

    void validate() const {
        for (int a = 0; a < 3; ++a)
            if (shape[a] < 1 || !(spacing[a] > 0.0)) throw UsageError("phantom: shape and spacing must be positive");
        const Vec3 ext = extent();
        auto inside = [&](const Vec3& p, double r) {
            for (int a = 0; a < 3; ++a)
                if (p[a] - r < 0.0 || p[a] + r > ext[a]) return false;
            return true;
        };
        for (const auto& k : kidneys)
            for (int a = 0; a < 3; ++a)
                if (k.center[a] - k.radii[a] < 0.0 || k.center[a] + k.radii[a] > ext[a] || !(k.radii[a] > 0.0))
                    throw UsageError("phantom: kidney ellipsoid outside the volume");
        auto check_lesion = [&](const SphereLesion& s, const char* what) {
            if (s.kidney < 0 || s.kidney >= int(kidneys.size()))
                throw UsageError(std::string("phantom: ") + what + " references a missing kidney");
            if (!inside(s.center, s.radius) || !(s.radius > 0.0))
                throw UsageError(std::string("phantom: ") + what + " outside the volume");
            const auto& k = kidneys[s.kidney];
            double d = 0.0;
            for (int a = 0; a < 3; ++a) d += std::pow((s.center[a] - k.center[a]) / k.radii[a], 2);
            if (std::sqrt(d) > 1.0) throw UsageError(std::string("phantom: ") + what + " center is not inside its kidney");
        };
        for (const auto& t : tumors) check_lesion(t, "tumor");
        for (const auto& c : cysts) check_lesion(c, "cyst");
        const double max_sp = std::max({spacing[0], spacing[1], spacing[2]});
        for (const auto& v : vessels) {
            if (v.centerline.size() < 2) throw UsageError("phantom: vessel needs at least two centerline points");
            if (v.radius < max_sp) throw UsageError("phantom: vessel radius below one voxel");
            if (v.cls != kArtery && v.cls != kVein) throw UsageError("phantom: vessel class must be artery or vein");
            for (const auto& p : v.centerline)
                if (!inside(p, 0.0)) throw UsageError("phantom: vessel centerline leaves the volume");
        }
    }
};

struct Phantom {
    Volume image;        // HU
    LabelVolume tissue;  // kidney / tumor / cyst
    LabelVolume vessel;  // artery / vein
};

/// Layout parameters randomized per case by generate_dataset.
struct PhantomVariation {
    double center_jitter_mm = 4.0;
    double radius_scale_lo = 0.9, radius_scale_hi = 1.1;
    double tumor_probability = 0.5;
    double cyst_probability = 0.5;
    double tumor_radius_lo = 6.0, tumor_radius_hi = 9.0;
    double cyst_radius_lo = 4.0, cyst_radius_hi = 6.5;
};

namespace synth_detail {

inline double seg_dist2(const Vec3& p, const Vec3& a, const Vec3& b) {
    double ab[3], ap[3], len2 = 0.0, t = 0.0;
    for (int i = 0; i < 3; ++i) {
        ab[i] = b[i] - a[i];
        ap[i] = p[i] - a[i];
        len2 += ab[i] * ab[i];
        t += ab[i] * ap[i];
    }
    t = len2 > 0.0 ? std::clamp(t / len2, 0.0, 1.0) : 0.0;
    double d2 = 0.0;
    for (int i = 0; i < 3; ++i) d2 += std::pow(ap[i] - t * ab[i], 2);
    return d2;
}

inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }

}  // namespace synth_detail

/// Rasterizes the spec: a voxel belongs to a shape when its center lies inside.
inline Phantom generate(const PhantomSpec& spec) {
    using namespace synth_detail;
    spec.validate();
    const Geometry g = spec.geometry();
    Phantom ph{Volume(spec.shape, g), LabelVolume(spec.shape, g), LabelVolume(spec.shape, g)};
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const Vec3 ext = spec.extent();
    const double cx = 0.5 * ext[0], cy = 0.5 * ext[1];
    const double bx = spec.body_semi_axes[0] * ext[0], by = spec.body_semi_axes[1] * ext[1];

    for (std::int64_t z = 0; z < spec.shape[2]; ++z)
        for (std::int64_t y = 0; y < spec.shape[1]; ++y)
            for (std::int64_t x = 0; x < spec.shape[0]; ++x) {
                const Vec3 p = g.world(double(x), double(y), double(z));
                const std::size_t i = ph.image.index(x, y, z);
                const double noise = nd(rng);
                if (std::pow((p[0] - cx) / bx, 2) + std::pow((p[1] - cy) / by, 2) > 1.0) {
                    ph.image.data[i] = float(std::min(spec.air_hu + 10.0 * noise, -900.0));
                    continue;
                }
                std::uint8_t tissue = kBackground, vessel = kBackground;
                for (const auto& k : spec.kidneys) {
                    double d = 0.0;
                    for (int a = 0; a < 3; ++a) d += std::pow((p[a] - k.center[a]) / k.radii[a], 2);
                    if (d <= 1.0) tissue = kKidney;
                }
                auto in_sphere = [&](const SphereLesion& s) {
                    double d = 0.0;
                    for (int a = 0; a < 3; ++a) d += std::pow(p[a] - s.center[a], 2);
                    return d <= s.radius * s.radius;
                };
                for (const auto& t : spec.tumors)
                    if (in_sphere(t)) tissue = kTumor;
                for (const auto& c : spec.cysts)
                    if (in_sphere(c)) tissue = kCyst;
                for (const auto& v : spec.vessels) {
                    if (vessel == kArtery) break;
                    for (std::size_t s = 0; s + 1 < v.centerline.size(); ++s)
                        if (seg_dist2(p, v.centerline[s], v.centerline[s + 1]) <= v.radius * v.radius) {
                            vessel = v.cls;
                            break;
                        }
                }
                if (vessel != kBackground) tissue = kBackground;
                const HuModel* m = &spec.background;
                switch (vessel != kBackground ? vessel : tissue) {
                    case kKidney: m = &spec.kidney; break;
                    case kTumor: m = &spec.tumor; break;
                    case kCyst: m = &spec.cyst; break;
                    case kArtery: m = &spec.artery; break;
                    case kVein: m = &spec.vein; break;
                    default: break;
                }
                ph.image.data[i] = float(m->mean + m->sd * noise);
                ph.tissue.data[i] = tissue;
                ph.vessel.data[i] = vessel;
            }
    return ph;
}

/// Default bilateral layout: kidneys either side of the midline, aorta and
/// vena cava between them, one renal artery and vein per kidney.
inline PhantomSpec default_phantom_spec() {
    PhantomSpec s;
    const Vec3 ext = s.extent();
    const double cx = 0.5 * ext[0], cy = 0.5 * ext[1], cz = 0.5 * ext[2];
    s.kidneys = {{{cx - 30, cy + 8, cz}, {12, 15, 24}}, {{cx + 30, cy + 8, cz - 3}, {12, 15, 24}}};
    s.tumors = {{{cx - 38, cy + 12, cz + 10}, 7.0, 0}};
    s.cysts = {{{cx + 36, cy + 6, cz - 18}, 5.0, 1}};
    const Vec3 aorta_top{cx - 7, cy - 6, cz + 30}, aorta_bottom{cx - 7, cy - 6, cz - 30};
    const Vec3 ivc_top{cx + 8, cy - 4, cz + 30}, ivc_bottom{cx + 8, cy - 4, cz - 30};
    s.vessels = {
        {{aorta_bottom, aorta_top}, 3.5, kArtery},
        {{{cx - 7, cy - 6, cz + 4}, {cx - 22, cy + 8, cz + 4}}, 2.5, kArtery},
        {{{cx - 7, cy - 6, cz + 8}, {cx + 22, cy + 8, cz + 8}}, 2.5, kArtery},
        {{ivc_bottom, ivc_top}, 4.0, kVein},
        {{{cx - 22, cy + 8, cz - 4}, {cx + 8, cy - 4, cz - 4}}, 3.0, kVein},
        {{{cx + 22, cy + 8, cz - 6}, {cx + 8, cy - 4, cz - 6}}, 3.0, kVein},
    };
    return s;
}

/// Single kidney with a tumor filling a small cube; used for overfit runs.
inline PhantomSpec small_phantom_spec(std::int64_t n = 32, double spacing = 2.0) {
    PhantomSpec s;
    s.shape = {n, n, n};
    s.spacing = {spacing, spacing, spacing};
    s.body_semi_axes = {0.7, 0.7, 0.0};
    const double c = 0.5 * n * spacing;
    s.kidneys = {{{c - 2, c + 1, c}, {0.3 * n * spacing, 0.36 * n * spacing, 0.42 * n * spacing}}};
    s.tumors = {{{c - 2 - 0.2 * n * spacing, c + 1, c + 0.1 * n * spacing}, 0.16 * n * spacing, 0}};
    return s;
}

/// Randomized copy of the default layout.
inline PhantomSpec vary_phantom(const PhantomSpec& base, const PhantomVariation& var, std::uint64_t seed,
                                bool* has_tumor = nullptr, bool* has_cyst = nullptr) {
    using synth_detail::add;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    PhantomSpec s = base;
    s.seed = seed;
    std::vector<Vec3> shift(s.kidneys.size());
    for (std::size_t k = 0; k < s.kidneys.size(); ++k) {
        for (auto& d : shift[k]) d = var.center_jitter_mm * u(rng);
        s.kidneys[k].center = add(s.kidneys[k].center, shift[k]);
        const double scale = var.radius_scale_lo + (var.radius_scale_hi - var.radius_scale_lo) * u01(rng);
        for (auto& r : s.kidneys[k].radii) r *= scale;
    }
    // Renal vessel endpoints inside a kidney follow it.
    for (auto& v : s.vessels)
        for (auto& p : v.centerline)
            for (std::size_t k = 0; k < base.kidneys.size(); ++k) {
                double d = 0.0;
                for (int a = 0; a < 3; ++a) d += std::pow((p[a] - base.kidneys[k].center[a]) / base.kidneys[k].radii[a], 2);
                if (d <= 1.0) p = add(p, shift[k]);
            }
    auto place = [&](double r_lo, double r_hi, double lateral_bias) {
        SphereLesion l;
        l.kidney = int(rng() % s.kidneys.size());
        const auto& k = s.kidneys[l.kidney];
        const double side = k.center[0] < 0.5 * s.extent()[0] ? -1.0 : 1.0;
        Vec3 dir{side * (lateral_bias + 0.5 * u01(rng)), 0.6 * u(rng), 1.2 * u(rng)};
        double n = 0.0;
        for (double d : dir) n += d * d;
        n = std::sqrt(n);
        for (int a = 0; a < 3; ++a) l.center[a] = k.center[a] + 0.7 * k.radii[a] * dir[a] / n;
        l.radius = r_lo + (r_hi - r_lo) * u01(rng);
        return l;
    };
    s.tumors.clear();
    s.cysts.clear();
    const bool tumor = u01(rng) < var.tumor_probability;
    const bool cyst = u01(rng) < var.cyst_probability;
    if (tumor) s.tumors.push_back(place(var.tumor_radius_lo, var.tumor_radius_hi, 0.8));
    if (cyst) s.cysts.push_back(place(var.cyst_radius_lo, var.cyst_radius_hi, 0.3));
    if (has_tumor) *has_tumor = tumor;
    if (has_cyst) *has_cyst = cyst;
    return s;
}

struct DatasetCase {
    std::string id;
    std::filesystem::path dir;
    bool tumor = false;
    bool cyst = false;
};

inline std::string case_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04d", i);
    return buf;
}

/// Writes `n` randomized phantoms as case_XXXX/{image,tissue,vessel}.nii.gz
/// plus dataset.json. Cases are independent and may be generated on
/// `threads` workers; the output does not depend on the thread count.
inline std::vector<DatasetCase> generate_dataset(int n, const std::filesystem::path& out, std::uint64_t seed,
                                                 const PhantomVariation& var = {},
                                                 const PhantomSpec& base = default_phantom_spec(), int threads = 1) {
    if (n < 1) throw UsageError("generate_dataset: need at least one case");
    std::filesystem::create_directories(out);
    std::vector<DatasetCase> cases(static_cast<std::size_t>(n));
    std::vector<nlohmann::json> entries(static_cast<std::size_t>(n));
    parallel_for(std::size_t(n), threads, [&](std::size_t i) {
        DatasetCase& c = cases[i];
        c.id = case_id(int(i));
        c.dir = out / c.id;
        const auto spec = vary_phantom(base, var, mix_seed(seed, i), &c.tumor, &c.cyst);
        const auto ph = generate(spec);
        std::filesystem::create_directories(c.dir);
        write_nifti(ph.image, (c.dir / "image.nii.gz").string(), NiftiDataType::int16);
        write_nifti(ph.tissue, (c.dir / "tissue.nii.gz").string());
        write_nifti(ph.vessel, (c.dir / "vessel.nii.gz").string());
        std::array<std::int64_t, 6> counts{};
        for (std::size_t k = 0; k < ph.tissue.size(); ++k) ++counts[ph.vessel.data[k] ? ph.vessel.data[k] : ph.tissue.data[k]];
        nlohmann::json counts_json;
        for (const auto& [id, name] : default_class_table()) counts_json[name] = counts[id];
        entries[i] = {{"id", c.id},
                      {"seed", spec.seed},
                      {"tumor", c.tumor},
                      {"cyst", c.cyst},
                      {"kidneys", spec.kidneys.size()},
                      {"shape", spec.shape},
                      {"spacing", spec.spacing},
                      {"voxel_counts", counts_json}};
    });
    nlohmann::json manifest{{"seed", seed}, {"cases", entries}};
    std::ofstream(out / "dataset.json") << manifest.dump(2) << "\n";
    return cases;
}

}  // namespace renalseg
