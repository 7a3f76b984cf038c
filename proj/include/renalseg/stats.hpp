#pragma once

// Dataset statistics: normalization estimation, class frequencies and the
// masked inverse-frequency class weights used by the loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/volume.hpp"

namespace renalseg {

struct FreqTable {
    std::vector<std::uint8_t> classes;
    std::vector<double> voxel_freq;  // fraction of all voxels holding each class
    std::vector<double> case_freq;   // fraction of cases containing each class

    std::size_t size() const { return classes.size(); }
};

struct WeightVector {
    std::vector<double> w;
    std::vector<bool> mask;

    static WeightVector uniform(std::size_t c) { return {std::vector<double>(c, 1.0), std::vector<bool>(c, true)}; }
};

/// Linear-interpolated percentile (q in [0, 100]) of a sorted sample.
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw DataError("percentile of empty sample");
    const double pos = q / 100.0 * double(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - double(lo)) * (sorted[hi] - sorted[lo]);
}

struct IntensityCase {
    const Volume* image;
    const LabelVolume* labels;
};

/// Percentile clip bounds and post-clip mean/std of all foreground
/// (label != 0) intensities pooled across cases.
inline NormSpec estimate_norm_spec(std::span<const IntensityCase> cases, double lo_pct = 0.5, double hi_pct = 99.5) {
    if (cases.empty()) throw DataError("estimate_norm_spec: no cases");
    std::vector<double> fg;
    for (const auto& c : cases) {
        require_same_grid(*c.image, *c.labels, "estimate_norm_spec");
        for (std::size_t i = 0; i < c.image->size(); ++i)
            if (c.labels->data[i] != 0) fg.push_back(c.image->data[i]);
    }
    if (fg.empty()) throw DataError("estimate_norm_spec: empty foreground");
    std::sort(fg.begin(), fg.end());
    NormSpec spec;
    spec.clip_lo = percentile_sorted(fg, lo_pct);
    spec.clip_hi = percentile_sorted(fg, hi_pct);
    if (!(spec.clip_hi > spec.clip_lo)) throw DataError("estimate_norm_spec: zero-variance foreground");
    double sum = 0.0;
    for (double v : fg) sum += std::clamp(v, spec.clip_lo, spec.clip_hi);
    spec.mean = sum / double(fg.size());
    double ss = 0.0;
    for (double v : fg) {
        const double d = std::clamp(v, spec.clip_lo, spec.clip_hi) - spec.mean;
        ss += d * d;
    }
    spec.std = std::sqrt(ss / double(fg.size()));
    if (!(spec.std > 0.0)) throw DataError("estimate_norm_spec: zero-variance foreground");
    return spec;
}

/// Voxel-wise and case-wise class frequencies over a training split. Every
/// stored id must appear in `classes`.
inline FreqTable class_frequencies(std::span<const LabelVolume> cases, const std::vector<std::uint8_t>& classes) {
    FreqTable t{classes, std::vector<double>(classes.size(), 0.0), std::vector<double>(classes.size(), 0.0)};
    if (cases.empty()) return t;
    std::array<int, 256> slot;
    slot.fill(-1);
    for (std::size_t i = 0; i < classes.size(); ++i) slot[classes[i]] = int(i);
    std::vector<std::uint64_t> voxels(classes.size(), 0);
    std::uint64_t total = 0;
    for (const auto& labels : cases) {
        std::vector<std::uint64_t> here(classes.size(), 0);
        for (auto v : labels.data) {
            if (slot[v] < 0) throw DataError("class_frequencies: label id " + std::to_string(v) + " not in class list");
            ++here[slot[v]];
        }
        for (std::size_t c = 0; c < classes.size(); ++c) {
            voxels[c] += here[c];
            if (here[c] > 0) t.case_freq[c] += 1.0;
        }
        total += labels.size();
    }
    for (std::size_t c = 0; c < classes.size(); ++c) {
        t.voxel_freq[c] = double(voxels[c]) / double(total);
        t.case_freq[c] /= double(cases.size());
    }
    return t;
}

/// w_c = m_c (1/case_freq_c)(1/voxel_freq_c), normalized to sum to one.
inline WeightVector class_weights(const FreqTable& freqs, const std::vector<bool>& present) {
    if (present.size() != freqs.size()) throw UsageError("class_weights: presence mask length mismatch");
    WeightVector out{std::vector<double>(freqs.size(), 0.0), present};
    double total = 0.0;
    for (std::size_t c = 0; c < freqs.size(); ++c) {
        if (!present[c]) continue;
        if (!(freqs.voxel_freq[c] > 0.0) || !(freqs.case_freq[c] > 0.0))
            throw DataError("class_weights: present class " + std::to_string(freqs.classes[c]) +
                            " has zero training frequency");
        out.w[c] = (1.0 / freqs.case_freq[c]) * (1.0 / freqs.voxel_freq[c]);
        total += out.w[c];
    }
    if (total <= 0.0) throw DataError("class_weights: degenerate batch (no class present)");
    for (auto& w : out.w) w /= total;
    return out;
}

inline nlohmann::json to_json(const NormSpec& s) {
    return {{"clip_lo", s.clip_lo}, {"clip_hi", s.clip_hi}, {"mean", s.mean}, {"std", s.std}};
}

inline NormSpec norm_spec_from_json(const nlohmann::json& j) {
    NormSpec s{j.at("clip_lo").get<double>(), j.at("clip_hi").get<double>(), j.at("mean").get<double>(),
               j.at("std").get<double>()};
    s.validate();
    return s;
}

inline nlohmann::json to_json(const FreqTable& t, const ClassTable& names = default_class_table()) {
    nlohmann::json j;
    j["classes"] = t.classes;
    std::vector<std::string> n;
    for (auto c : t.classes) n.push_back(names.count(c) ? names.at(c) : std::to_string(c));
    j["names"] = n;
    j["voxel_freq"] = t.voxel_freq;
    j["case_freq"] = t.case_freq;
    return j;
}

inline FreqTable freq_table_from_json(const nlohmann::json& j) {
    FreqTable t;
    t.classes = j.at("classes").get<std::vector<std::uint8_t>>();
    t.voxel_freq = j.at("voxel_freq").get<std::vector<double>>();
    t.case_freq = j.at("case_freq").get<std::vector<double>>();
    if (t.voxel_freq.size() != t.classes.size() || t.case_freq.size() != t.classes.size())
        throw DataError("frequency table: length mismatch");
    return t;
}

}  // namespace renalseg
