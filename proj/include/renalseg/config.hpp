#pragma once

// JSON run configuration. Every section is optional; unknown keys anywhere
// are rejected before work starts.

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "renalseg/evaluate.hpp"

namespace renalseg {

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string data_root;
    std::string out_dir = "out";
    StageSpec stage1 = StageSpec::stage_one();
    StageSpec tissue = StageSpec::stage_two_tissue();
    StageSpec vessel = StageSpec::stage_two_vessel();
    TrainConfig train;
    std::int64_t max_iterations = 0;
    LossConfig loss;
    AugmentSpec augment;
    PipelineOptions pipeline;
    ExperimentPlan experiment;
    int erased_segments = 3;
    double erased_radius_mm = 8.0;
    double accept_overlap = 0.5;

    const StageSpec& stage(StageId id) const { return id == StageId::I ? stage1 : id == StageId::IIA ? tissue : vessel; }
    StageSpec& stage(StageId id) { return id == StageId::I ? stage1 : id == StageId::IIA ? tissue : vessel; }

    void validate() const {
        if (threads < 1) throw UsageError("config: threads must be at least 1");
        for (auto* s : {&stage1, &tissue, &vessel}) {
            s->validate();
            s->net.validate();
        }
        validate_stage_set(tissue, vessel);
        train.validate();
        loss.validate();
        augment.validate();
        if (pipeline.connectivity != 6 && pipeline.connectivity != 26) throw UsageError("config: connectivity must be 6 or 26");
        experiment.validate();
    }

    StageTraining training() const {
        StageTraining t;
        t.train = train;
        t.loss = loss;
        t.augment = augment;
        t.seed = seed;
        t.max_iterations = max_iterations;
        return t;
    }

    ExperimentBase experiment_base() const {
        ExperimentBase b;
        b.tissue = tissue;
        b.vessel = vessel;
        b.training = training();
        b.roi_margin_mm = pipeline.roi_margin_mm;
        b.erased_segments = erased_segments;
        b.erased_radius_mm = erased_radius_mm;
        b.accept_overlap = accept_overlap;
        return b;
    }
};

namespace config_detail {

/// Reads keys from one JSON object and remembers which were consumed.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw UsageError("config: " + path_ + " must be an object");
    }
    /// Rejects any key that was never read.
    void done() const {
        for (const auto& [k, _] : j_.items())
            if (!used_.count(k)) throw UsageError("config: unknown key '" + path_ + "." + k + "'");
    }

    template <class T>
    void get(const char* key, T& out) {
        used_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw UsageError("config: wrong type for '" + path_ + "." + key + "'");
        }
    }
    bool has(const char* key) {
        used_.insert(key);
        return j_.contains(key);
    }
    Section sub(const char* key) { return Section(j_.at(key), path_ + "." + key); }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline void read_net(Section s, nn::NetConfig& n) {
    s.get("levels", n.levels);
    s.get("channels", n.channels);
    s.get("encoder_stacks", n.encoder_stacks);
    if (s.has("block_design")) {
        std::string d;
        s.get("block_design", d);
        n.block_design = nn::block_design_from(d);
    }
    if (s.has("final_activation")) {
        std::string a;
        s.get("final_activation", a);
        if (a == "softmax") n.final_activation = nn::FinalActivation::softmax;
        else if (a == "sigmoid") n.final_activation = nn::FinalActivation::sigmoid;
        else throw UsageError("config: final_activation must be softmax or sigmoid");
    }
    s.get("lrelu_slope", n.lrelu_slope);
    s.done();
}

inline void read_stage(Section s, StageSpec& st) {
    s.get("spacing", st.target_spacing);
    s.get("patch", st.patch);
    s.get("overlap", st.overlap);
    s.get("checkpoint", st.checkpoint);
    if (s.has("norm")) {
        auto n = s.sub("norm");
        n.get("clip_lo", st.norm.clip_lo);
        n.get("clip_hi", st.norm.clip_hi);
        n.get("mean", st.norm.mean);
        n.get("std", st.norm.std);
        n.done();
    }
    if (s.has("net")) read_net(s.sub("net"), st.net);
    s.done();
}

}  // namespace config_detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using config_detail::Section;
    RunConfig c;
    {
        Section root(j, "config");
        root.get("seed", c.seed);
        root.get("threads", c.threads);
        root.get("data_root", c.data_root);
        root.get("out_dir", c.out_dir);
        if (root.has("stages")) {
            auto st = root.sub("stages");
            if (st.has("I")) config_detail::read_stage(st.sub("I"), c.stage1);
            if (st.has("IIA")) config_detail::read_stage(st.sub("IIA"), c.tissue);
            if (st.has("IIB")) config_detail::read_stage(st.sub("IIB"), c.vessel);
            st.done();
        }
        if (root.has("train")) {
            auto t = root.sub("train");
            t.get("patch_size", c.train.patch_size);
            t.get("batch_size", c.train.batch_size);
            t.get("lr0", c.train.lr0);
            t.get("lr_factor", c.train.lr_factor);
            t.get("plateau_delta", c.train.plateau_delta);
            t.get("lr_patience", c.train.lr_patience);
            t.get("stop_patience", c.train.stop_patience);
            t.get("max_epochs", c.train.max_epochs);
            t.get("batches_per_epoch", c.train.batches_per_epoch);
            t.get("fg_oversample", c.train.fg_oversample);
            t.get("val_patches_per_case", c.train.val_patches_per_case);
            t.get("max_iterations", c.max_iterations);
            t.done();
        }
        if (root.has("loss")) {
            auto l = root.sub("loss");
            l.get("alpha", c.loss.alpha);
            l.get("beta", c.loss.beta);
            l.get("gamma", c.loss.gamma);
            l.get("epsilon", c.loss.epsilon);
            l.get("weighted", c.loss.weighted);
            if (l.has("strategy")) {
                std::string s;
                l.get("strategy", s);
                c.loss.strategy = loss_strategy_from(s);
            }
            l.done();
        }
        if (root.has("augment")) {
            auto a = root.sub("augment");
            a.get("p_rotation", c.augment.p_rotation);
            a.get("rotation_deg", c.augment.rotation_deg);
            a.get("p_scale", c.augment.p_scale);
            a.get("scale_lo", c.augment.scale_lo);
            a.get("scale_hi", c.augment.scale_hi);
            a.get("p_elastic", c.augment.p_elastic);
            a.get("elastic_sigma_mm", c.augment.elastic_sigma_mm);
            a.get("elastic_grid", c.augment.elastic_grid);
            a.get("p_gamma", c.augment.p_gamma);
            a.get("gamma_lo", c.augment.gamma_lo);
            a.get("gamma_hi", c.augment.gamma_hi);
            a.get("p_noise", c.augment.p_noise);
            a.get("noise_sigma", c.augment.noise_sigma);
            a.get("p_mirror", c.augment.p_mirror);
            a.done();
        }
        if (root.has("pipeline")) {
            auto p = root.sub("pipeline");
            p.get("fg_threshold", c.pipeline.fg_threshold);
            p.get("roi_margin_mm", c.pipeline.roi_margin_mm);
            p.get("min_kidney_cm3", c.pipeline.min_kidney_cm3);
            p.get("vessel_min_mm3", c.pipeline.vessel_min_mm3);
            p.get("connectivity", c.pipeline.connectivity);
            p.done();
        }
        if (root.has("experiment")) {
            auto e = root.sub("experiment");
            if (e.has("kind")) {
                std::string k;
                e.get("kind", k);
                c.experiment.kind = experiment_kind_from(k);
            }
            e.get("grid", c.experiment.grid);
            e.get("seeds", c.experiment.seeds);
            e.get("k", c.experiment.k);
            e.get("folds", c.experiment.folds);
            e.get("split_seed", c.experiment.split_seed);
            if (e.has("stages")) {
                std::vector<std::string> ids;
                e.get("stages", ids);
                c.experiment.stages.clear();
                for (const auto& s : ids) c.experiment.stages.push_back(stage_id_from(s));
            }
            e.get("erased_segments", c.erased_segments);
            e.get("erased_radius_mm", c.erased_radius_mm);
            e.get("accept_overlap", c.accept_overlap);
            e.done();
        }
        root.done();
    }
    for (auto* s : {&c.stage1, &c.tissue, &c.vessel}) s->net.out_classes = int(s->classes.size());
    if (const char* root = std::getenv("RENALSEG_DATA_ROOT"); root && *root) c.data_root = root;
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw UsageError("config " + path + " is not valid JSON");
    return parse_run_config(j);
}

inline nlohmann::json to_json(const nn::NetConfig& n) {
    return {{"levels", n.levels},
            {"channels", n.channels},
            {"encoder_stacks", n.encoder_stacks},
            {"block_design", nn::to_string(n.block_design)},
            {"final_activation", n.final_activation == nn::FinalActivation::softmax ? "softmax" : "sigmoid"},
            {"lrelu_slope", n.lrelu_slope}};
}

inline nlohmann::json to_json(const StageSpec& s) {
    return {{"spacing", s.target_spacing},
            {"patch", s.patch},
            {"overlap", s.overlap},
            {"checkpoint", s.checkpoint},
            {"norm", {{"clip_lo", s.norm.clip_lo}, {"clip_hi", s.norm.clip_hi}, {"mean", s.norm.mean}, {"std", s.norm.std}}},
            {"net", to_json(s.net)}};
}

/// Fully resolved configuration; parse_run_config(to_json(c)) reproduces c.
inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json train = to_json(c.train);
    train.erase("seed");
    train["max_iterations"] = c.max_iterations;
    std::vector<std::string> stages;
    for (auto s : c.experiment.stages) stages.push_back(to_string(s));
    const auto& a = c.augment;
    return {{"seed", c.seed},
            {"threads", c.threads},
            {"data_root", c.data_root},
            {"out_dir", c.out_dir},
            {"stages", {{"I", to_json(c.stage1)}, {"IIA", to_json(c.tissue)}, {"IIB", to_json(c.vessel)}}},
            {"train", train},
            {"loss",
             {{"alpha", c.loss.alpha},
              {"beta", c.loss.beta},
              {"gamma", c.loss.gamma},
              {"epsilon", c.loss.epsilon},
              {"strategy", to_string(c.loss.strategy)},
              {"weighted", c.loss.weighted}}},
            {"augment",
             {{"p_rotation", a.p_rotation},
              {"rotation_deg", a.rotation_deg},
              {"p_scale", a.p_scale},
              {"scale_lo", a.scale_lo},
              {"scale_hi", a.scale_hi},
              {"p_elastic", a.p_elastic},
              {"elastic_sigma_mm", a.elastic_sigma_mm},
              {"elastic_grid", a.elastic_grid},
              {"p_gamma", a.p_gamma},
              {"gamma_lo", a.gamma_lo},
              {"gamma_hi", a.gamma_hi},
              {"p_noise", a.p_noise},
              {"noise_sigma", a.noise_sigma},
              {"p_mirror", a.p_mirror}}},
            {"pipeline",
             {{"fg_threshold", c.pipeline.fg_threshold},
              {"roi_margin_mm", c.pipeline.roi_margin_mm},
              {"min_kidney_cm3", c.pipeline.min_kidney_cm3},
              {"vessel_min_mm3", c.pipeline.vessel_min_mm3},
              {"connectivity", c.pipeline.connectivity}}},
            {"experiment",
             {{"kind", to_string(c.experiment.kind)},
              {"grid", c.experiment.grid},
              {"seeds", c.experiment.seeds},
              {"k", c.experiment.k},
              {"folds", c.experiment.folds},
              {"split_seed", c.experiment.split_seed},
              {"stages", stages},
              {"erased_segments", c.erased_segments},
              {"erased_radius_mm", c.erased_radius_mm},
              {"accept_overlap", c.accept_overlap}}}};
}

/// Small networks and coarse grids that train on a laptop CPU in minutes.
inline RunConfig toy_run_config() {
    RunConfig c;
    nn::NetConfig net;
    net.levels = 3;
    net.channels = {8, 16, 32};
    net.encoder_stacks = {1, 1, 1};
    for (auto* s : {&c.stage1, &c.tissue, &c.vessel}) {
        const int classes = s->net.out_classes;
        s->net = net;
        s->net.out_classes = classes;
        s->patch = {32, 32, 32};
    }
    c.stage1.target_spacing = {3.0, 3.0, 3.0};
    c.tissue.target_spacing = c.vessel.target_spacing = {1.5, 1.5, 1.5};
    c.train.patch_size = {32, 32, 32};
    c.train.lr0 = 3e-3;
    c.train.batches_per_epoch = 25;
    c.train.max_epochs = 12;
    c.train.lr_patience = 4;
    c.train.stop_patience = 8;
    c.train.val_patches_per_case = 1;
    c.augment = AugmentSpec::none();
    c.augment.p_mirror = 0.0;
    c.experiment.k = 5;
    c.experiment.folds = 1;
    return c;
}

}  // namespace renalseg
