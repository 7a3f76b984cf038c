#pragma once

// Coarse-to-fine inference: low-resolution kidney localization, per-kidney
// ROIs, high-resolution tissue and vessel prediction, fusion.

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/nn/checkpoint.hpp"
#include "renalseg/nn/unet.hpp"
#include "renalseg/postprocess.hpp"
#include "renalseg/volume.hpp"

namespace renalseg {

enum class StageId { I, IIA, IIB };

inline const char* to_string(StageId s) {
    switch (s) {
        case StageId::I: return "I";
        case StageId::IIA: return "IIA";
        case StageId::IIB: return "IIB";
    }
    return "?";
}

inline StageId stage_id_from(const std::string& s) {
    if (s == "I") return StageId::I;
    if (s == "IIA") return StageId::IIA;
    if (s == "IIB") return StageId::IIB;
    throw UsageError("unknown stage '" + s + "' (expected I, IIA or IIB)");
}

struct StageSpec {
    StageId id = StageId::I;
    Vec3 target_spacing = kStageISpacing;
    NormSpec norm = kStageINorm;
    std::vector<std::uint8_t> classes;  // label id per output channel, channel 0 is background
    Index3 patch{128, 128, 128};        // x, y, z
    double overlap = 0.5;
    nn::NetConfig net;
    std::string checkpoint;

    static StageSpec stage_one() {
        StageSpec s;
        s.classes = {kBackground, kKidney};
        s.net.out_classes = 2;
        return s;
    }
    static StageSpec stage_two_tissue() {
        StageSpec s;
        s.id = StageId::IIA;
        s.target_spacing = kStageIISpacing;
        s.norm = kStageIINorm;
        s.classes = {kBackground, kKidney, kTumor, kCyst};
        s.net.out_classes = 4;
        return s;
    }
    static StageSpec stage_two_vessel() {
        StageSpec s;
        s.id = StageId::IIB;
        s.target_spacing = kStageIISpacing;
        s.norm = kStageIINorm;
        s.classes = {kBackground, kArtery, kVein};
        s.net.out_classes = 3;
        return s;
    }

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (!(target_spacing[a] > 0.0)) throw UsageError(std::string("stage ") + to_string(id) + ": spacing must be positive");
            if (patch[a] < 1) throw UsageError(std::string("stage ") + to_string(id) + ": patch must be positive");
        }
        if (!(overlap >= 0.0 && overlap < 1.0)) throw UsageError("stage overlap must be in [0, 1)");
        norm.validate();
        if (classes.size() < 2 || classes[0] != kBackground)
            throw UsageError(std::string("stage ") + to_string(id) + ": classes must start with background");
        if (int(classes.size()) != net.out_classes)
            throw UsageError(std::string("stage ") + to_string(id) + ": net out_classes does not match class list");
    }
};

/// Stage II class sets may only share background.
inline void validate_stage_set(const StageSpec& a, const StageSpec& b) {
    for (std::size_t i = 1; i < a.classes.size(); ++i)
        for (std::size_t j = 1; j < b.classes.size(); ++j)
            if (a.classes[i] == b.classes[j]) throw UsageError("stage IIA and IIB class sets overlap");
}

/// Training target for a stage from the two ground-truth label images.
inline LabelVolume stage_target(StageId id, const LabelVolume& tissue, const LabelVolume& vessel) {
    require_same_grid(tissue, vessel, "stage_target");
    switch (id) {
        case StageId::I: {
            LabelVolume out = tissue.like<std::uint8_t>();
            for (std::size_t i = 0; i < tissue.size(); ++i) out.data[i] = tissue.data[i] != 0 ? kKidney : kBackground;
            return out;
        }
        case StageId::IIA: return tissue;
        case StageId::IIB: return vessel;
    }
    return tissue;
}

/// Probability map for a full volume: one float image per class channel.
struct ProbVolume {
    Index3 shape{0, 0, 0};
    Geometry geometry;
    std::vector<std::uint8_t> classes;
    std::vector<std::vector<float>> channels;

    LabelVolume argmax() const {
        LabelVolume out(shape, geometry);
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < channels.size(); ++c)
                if (channels[c][i] > channels[best][i]) best = c;
            out.data[i] = classes[best];
        }
        return out;
    }
};

/// Maps an (N=1, C=1, D, H, W) input patch to (1, classes, D, H, W) probabilities.
using PatchPredictor = std::function<nn::Tensor<float>(const nn::Tensor<float>&)>;

/// Predictor over a network. Gradient tracking is switched off for the
/// duration of each call so intermediate activations are freed eagerly.
inline PatchPredictor make_predictor(std::shared_ptr<const nn::UNet<float>> net) {
    return [net](const nn::Tensor<float>& x) {
        std::vector<std::pair<std::shared_ptr<nn::Node<float>>, bool>> saved;
        for (const auto& [name, p] : net->params().entries()) {
            saved.emplace_back(p.node(), p.node()->requires_grad);
            p.node()->requires_grad = false;
        }
        struct Restore {
            decltype(saved)& s;
            ~Restore() {
                for (auto& [node, flag] : s) node->requires_grad = flag;
            }
        } restore{saved};
        return net->forward(x).value();
    };
}

inline std::shared_ptr<nn::UNet<float>> load_stage_net(const StageSpec& spec) {
    auto net = std::make_shared<nn::UNet<float>>(spec.net, 0);
    if (spec.checkpoint.empty()) throw UsageError(std::string("stage ") + to_string(spec.id) + ": no checkpoint given");
    nn::load_checkpoint(net->params(), spec.checkpoint);
    return net;
}

/// Tile start positions along one axis.
inline std::vector<std::int64_t> tile_origins(std::int64_t n, std::int64_t patch, double overlap) {
    if (n <= patch) return {0};
    const std::int64_t stride = std::max<std::int64_t>(1, std::int64_t(std::floor(double(patch) * (1.0 - overlap))));
    std::vector<std::int64_t> out;
    for (std::int64_t pos = 0;; pos += stride) {
        if (pos + patch >= n) {
            out.push_back(n - patch);
            break;
        }
        out.push_back(pos);
    }
    return out;
}

/// Tiles the volume, runs the predictor on each tile and averages overlapping
/// probabilities uniformly. Axes shorter than the patch are padded with
/// `pad_value` past the end.
inline ProbVolume sliding_window_predict(const PatchPredictor& predict, const Volume& v, const Index3& patch,
                                         const std::vector<std::uint8_t>& classes, double overlap = 0.5,
                                         float pad_value = 0.0f, std::int64_t* tiles = nullptr) {
    const std::int64_t C = std::int64_t(classes.size());
    ProbVolume out{v.shape, v.geometry, classes, std::vector<std::vector<float>>(classes.size(), std::vector<float>(v.size(), 0.0f))};
    std::vector<float> hits(v.size(), 0.0f);
    const auto ox = tile_origins(v.shape[0], patch[0], overlap);
    const auto oy = tile_origins(v.shape[1], patch[1], overlap);
    const auto oz = tile_origins(v.shape[2], patch[2], overlap);
    if (tiles) *tiles = std::int64_t(ox.size() * oy.size() * oz.size());
    nn::Tensor<float> x({1, 1, patch[2], patch[1], patch[0]});
    for (auto z0 : oz)
        for (auto y0 : oy)
            for (auto x0 : ox) {
                std::fill(x.data.begin(), x.data.end(), pad_value);
                for (std::int64_t z = 0; z < patch[2] && z0 + z < v.shape[2]; ++z)
                    for (std::int64_t y = 0; y < patch[1] && y0 + y < v.shape[1]; ++y)
                        for (std::int64_t xx = 0; xx < patch[0] && x0 + xx < v.shape[0]; ++xx)
                            x.data[std::size_t((z * patch[1] + y) * patch[0] + xx)] = v.at(x0 + xx, y0 + y, z0 + z);
                const auto p = predict(x);
                if (p.shape != nn::Shape{1, C, patch[2], patch[1], patch[0]})
                    throw UsageError("sliding window: predictor returned " + nn::shape_str(p.shape));
                for (std::int64_t z = 0; z < patch[2] && z0 + z < v.shape[2]; ++z)
                    for (std::int64_t y = 0; y < patch[1] && y0 + y < v.shape[1]; ++y)
                        for (std::int64_t xx = 0; xx < patch[0] && x0 + xx < v.shape[0]; ++xx) {
                            const std::size_t src = std::size_t((z * patch[1] + y) * patch[0] + xx);
                            const std::size_t dst = v.index(x0 + xx, y0 + y, z0 + z);
                            for (std::int64_t c = 0; c < C; ++c) out.channels[c][dst] += p.channel(0, c)[src];
                            hits[dst] += 1.0f;
                        }
            }
    for (auto& ch : out.channels)
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] /= hits[i];
    return out;
}

/// Resample to the stage spacing, then clip and z-score.
template <class T>
Volume preprocess_for_stage(const Image<T>& hu, const StageSpec& spec) {
    Volume f = hu.template like<float>();
    for (std::size_t i = 0; i < hu.size(); ++i) f.data[i] = float(hu.data[i]);
    return normalize(resample(f, spec.target_spacing, Interp::trilinear), spec.norm);
}

inline float pad_value_for(const NormSpec& n) { return normalize_value(n.clip_lo, n); }

class NoKidneyFound : public DataError {
public:
    using DataError::DataError;
};

/// One box per sufficiently large 26-connected component of the stage-I
/// prediction, grown by `margin_mm` and clamped to the volume.
inline std::vector<BBox> extract_rois(const LabelVolume& stage1, double margin_mm = 20.0, double min_component_cm3 = 10.0) {
    std::vector<BBox> out;
    for (const auto& c : connected_components(stage1, 26)) {
        if (c.volume_mm3 < min_component_cm3 * 1000.0) continue;
        BBox b = c.bbox;
        for (int a = 0; a < 3; ++a) {
            const auto m = std::int64_t(std::ceil(margin_mm / stage1.geometry.spacing[a] - 1e-9));
            b.lo[a] = std::max<std::int64_t>(0, b.lo[a] - m);
            b.hi[a] = std::min<std::int64_t>(stage1.shape[a], b.hi[a] + m);
        }
        out.push_back(b);
    }
    if (out.empty()) throw NoKidneyFound("no kidney component of at least " + std::to_string(min_component_cm3) + " cm3 found");
    return out;
}

/// Voxelwise merge: artery or vein wins over tissue.
inline LabelVolume fuse_labels(const LabelVolume& tissue, const LabelVolume& vessels) {
    require_same_grid(tissue, vessels, "fuse_labels");
    LabelVolume out = tissue;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (vessels.data[i] == kArtery || vessels.data[i] == kVein) out.data[i] = vessels.data[i];
    return out;
}

struct PipelineOptions {
    double fg_threshold = -200.0;
    double roi_margin_mm = 20.0;
    double min_kidney_cm3 = 10.0;
    double vessel_min_mm3 = 150.0;
    int connectivity = 26;
};

struct StageModels {
    StageSpec spec;
    PatchPredictor predict;
};

struct CasePrediction {
    Geometry geometry;
    Index3 shape{0, 0, 0};
    LabelVolume stage1;  // kidney region, original grid
    LabelVolume tissue;  // IIA output, original grid
    LabelVolume vessel;  // IIB output after cleanup, original grid
    LabelVolume fused;
    BBox foreground;
    std::vector<BBox> rois;
    std::vector<CensusEntry> census;
    std::vector<std::string> warnings;
    std::string status = "ok";
    std::map<std::string, double> seconds;
};

namespace pipeline_detail {

/// Copies non-background voxels of `src` into `dst` inside `box`.
inline void merge_into(LabelVolume& dst, const LabelVolume& src, const BBox& box) {
    for (std::int64_t z = 0; z < src.shape[2]; ++z)
        for (std::int64_t y = 0; y < src.shape[1]; ++y)
            for (std::int64_t x = 0; x < src.shape[0]; ++x) {
                const auto v = src.at(x, y, z);
                if (v != kBackground) dst.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z) = v;
            }
}

template <class T>
LabelVolume predict_stage(const Image<T>& hu, const StageModels& m) {
    const auto in = preprocess_for_stage(hu, m.spec);
    const auto probs = sliding_window_predict(m.predict, in, m.spec.patch, m.spec.classes, m.spec.overlap, pad_value_for(m.spec.norm));
    return rescale_to_original(probs.argmax(), hu.shape, hu.geometry);
}

}  // namespace pipeline_detail

/// Full cascade on one HU volume. The fused labels share the input grid.
template <class T>
CasePrediction run_case(const Image<T>& hu, const StageModels& stage1, const StageModels& tissue,
                        const StageModels& vessel, const PipelineOptions& opt = {}) {
    using namespace pipeline_detail;
    using clock = std::chrono::steady_clock;
    auto secs = [](clock::time_point t0) { return std::chrono::duration<double>(clock::now() - t0).count(); };
    validate_stage_set(tissue.spec, vessel.spec);
    CasePrediction r;
    r.geometry = hu.geometry;
    r.shape = hu.shape;
    r.stage1 = hu.template like<std::uint8_t>();
    r.tissue = r.stage1;
    r.vessel = r.stage1;
    r.fused = r.stage1;

    auto t0 = clock::now();
    r.foreground = foreground_bbox(hu, opt.fg_threshold);
    const auto body = crop(hu, r.foreground);
    auto s1 = predict_stage(body, stage1);
    for (auto& v : s1.data) v = v != kBackground ? kKidney : kBackground;
    paste(r.stage1, s1, r.foreground);
    r.seconds["stage_I"] = secs(t0);

    try {
        r.rois = extract_rois(r.stage1, opt.roi_margin_mm, opt.min_kidney_cm3);
    } catch (const NoKidneyFound& e) {
        r.status = "no_kidney_found";
        r.warnings.push_back(e.what());
        return r;
    }

    t0 = clock::now();
    for (const auto& box : r.rois) {
        const auto sub = crop(hu, box);
        merge_into(r.tissue, predict_stage(sub, tissue), box);
    }
    r.seconds["stage_IIA"] = secs(t0);
    t0 = clock::now();
    for (const auto& box : r.rois) {
        const auto sub = crop(hu, box);
        merge_into(r.vessel, predict_stage(sub, vessel), box);
    }
    r.seconds["stage_IIB"] = secs(t0);

    t0 = clock::now();
    r.vessel = prune_small_vessels(r.vessel, opt.vessel_min_mm3, opt.connectivity, &r.census);
    r.vessel = drop_vessels_off_kidney(r.vessel, r.stage1, opt.connectivity, &r.census);
    r.fused = fuse_labels(r.tissue, r.vessel);
    r.seconds["postprocess"] = secs(t0);
    return r;
}

inline nlohmann::json bbox_json(const BBox& b) { return {{"lo", b.lo}, {"hi", b.hi}}; }

inline nlohmann::json to_json(const CasePrediction& r) {
    nlohmann::json j;
    j["status"] = r.status;
    j["shape"] = r.shape;
    j["spacing"] = r.geometry.spacing;
    j["foreground_bbox"] = bbox_json(r.foreground);
    j["rois"] = nlohmann::json::array();
    for (const auto& b : r.rois) j["rois"].push_back(bbox_json(b));
    j["census"] = nlohmann::json::array();
    for (const auto& c : r.census) j["census"].push_back(to_json(c));
    j["warnings"] = r.warnings;
    j["seconds"] = r.seconds;
    nlohmann::json counts;
    std::array<std::int64_t, 256> n{};
    for (auto v : r.fused.data) ++n[v];
    for (const auto& [id, name] : default_class_table()) counts[name] = n[id];
    j["fused_voxel_counts"] = counts;
    return j;
}

}  // namespace renalseg
