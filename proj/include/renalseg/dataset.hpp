#pragma once

// Case directories on disk and their conversion into per-stage training
// samples.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/nifti.hpp"
#include "renalseg/pipeline.hpp"
#include "renalseg/stats.hpp"
#include "renalseg/train.hpp"

namespace renalseg {

struct CaseData {
    std::string id;
    Volume image;  // HU
    LabelVolume tissue;
    LabelVolume vessel;
};

/// Reads case_XXXX/{image,tissue,vessel}.nii.gz. Label files are optional
/// when `labels` is false.
inline CaseData load_case(const std::filesystem::path& dir, bool labels = true) {
    namespace fs = std::filesystem;
    CaseData c;
    c.id = dir.filename().string();
    auto need = [&](const char* name) {
        const auto p = dir / name;
        if (!fs::exists(p)) throw DataError("case " + c.id + ": missing " + p.string());
        return p.string();
    };
    c.image = read_nifti<float>(need("image.nii.gz"));
    if (labels) {
        c.tissue = read_labels(need("tissue.nii.gz"));
        c.vessel = read_labels(need("vessel.nii.gz"));
        require_same_grid(c.image, c.tissue, ("case " + c.id + " tissue").c_str());
        require_same_grid(c.image, c.vessel, ("case " + c.id + " vessel").c_str());
    }
    return c;
}

/// Case directories of a dataset root: the manifest order when dataset.json
/// exists, otherwise case_* subdirectories sorted by name.
inline std::vector<std::filesystem::path> list_cases(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory");
    std::vector<fs::path> out;
    const auto manifest = root / "dataset.json";
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("cases")) throw DataError("malformed manifest " + manifest.string());
        for (const auto& c : j["cases"]) out.push_back(root / c.at("id").get<std::string>());
    } else {
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) out.push_back(e.path());
        std::sort(out.begin(), out.end());
    }
    if (out.empty()) throw DataError("no cases under " + root.string());
    return out;
}

/// Training samples for one stage. Stage I sees the foreground-cropped body;
/// stage II sees one crop per ground-truth kidney, grown by `margin_mm`.
inline std::vector<TrainCase> stage_cases(const CaseData& c, const StageSpec& spec, double margin_mm = 20.0,
                                          double fg_threshold = -200.0) {
    const auto target = stage_target(spec.id, c.tissue, c.vessel);
    std::vector<BBox> boxes;
    if (spec.id == StageId::I) {
        boxes.push_back(foreground_bbox(c.image, fg_threshold));
    } else {
        const auto region = stage_target(StageId::I, c.tissue, c.vessel);
        try {
            boxes = extract_rois(region, margin_mm, 0.0);
        } catch (const NoKidneyFound&) {
            throw DataError("case " + c.id + ": no kidney in ground truth");
        }
    }
    std::vector<TrainCase> out;
    for (std::size_t k = 0; k < boxes.size(); ++k) {
        TrainCase t;
        t.id = spec.id == StageId::I ? c.id : c.id + "_roi" + std::to_string(k);
        t.image = preprocess_for_stage(crop(c.image, boxes[k]), spec);
        t.labels = resample(crop(target, boxes[k]), spec.target_spacing, Interp::nearest);
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<LabelVolume> labels_of(const std::vector<TrainCase>& cases) {
    std::vector<LabelVolume> out;
    for (const auto& c : cases) out.push_back(c.labels);
    return out;
}

struct StageTraining {
    TrainConfig train;
    LossConfig loss;
    AugmentSpec augment;
    std::uint64_t seed = 0;
    std::string out_dir;
    std::int64_t max_iterations = 0;
};

struct TrainedStage {
    std::shared_ptr<nn::UNet<float>> net;
    TrainResult result;
    FreqTable freqs;
};

/// Builds a fresh network for the stage and trains it on the given samples.
inline TrainedStage train_stage(const StageSpec& spec, const std::vector<TrainCase>& train,
                                const std::vector<TrainCase>& val, const StageTraining& opt) {
    spec.validate();
    const auto labels = labels_of(train);
    TrainSetup s;
    s.net = spec.net;
    s.train = opt.train;
    s.train.seed = opt.seed;
    s.loss = opt.loss;
    s.augment = opt.augment;
    s.classes = spec.classes;
    s.freqs = class_frequencies(labels, spec.classes);
    s.pad_value = pad_value_for(spec.norm);
    s.out_dir = opt.out_dir;
    s.max_iterations = opt.max_iterations;
    TrainedStage r;
    r.freqs = s.freqs;
    r.net = std::make_shared<nn::UNet<float>>(spec.net, opt.seed);
    r.result = train_loop(*r.net, train, val, s);
    return r;
}

}  // namespace renalseg
