#pragma once

// Label metrics, k-fold splits and the experiment harness (alpha/beta sweep,
// loss strategy, architecture, class weighting, annotation optimization).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/annotate.hpp"
#include "renalseg/dataset.hpp"

namespace renalseg {

struct MetricRow {
    std::uint8_t cls = 0;
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    double dsc = 0.0, sen = 0.0, spe = 0.0, acc = 0.0;

    /// False when the class is absent from the truth; SEN is then undefined
    /// and the row is left out of averages.
    bool defined() const { return tp + fn > 0; }

    void finish() {
        const auto nan = std::numeric_limits<double>::quiet_NaN();
        const double d = double(2 * tp + fp + fn);
        dsc = d > 0.0 ? 2.0 * double(tp) / d : nan;
        sen = tp + fn > 0 ? double(tp) / double(tp + fn) : nan;
        spe = tn + fp > 0 ? double(tn) / double(tn + fp) : nan;
        const auto all = tp + fp + fn + tn;
        acc = all > 0 ? double(tp + tn) / double(all) : nan;
    }
    MetricRow& operator+=(const MetricRow& o) {
        tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
        finish();
        return *this;
    }
};

/// Hard-label confusion counts and scores per class.
inline std::vector<MetricRow> metrics(const LabelVolume& pred, const LabelVolume& truth,
                                      const std::vector<std::uint8_t>& classes) {
    require_same_grid(pred, truth, "metrics");
    std::vector<MetricRow> rows;
    for (auto c : classes) {
        MetricRow r;
        r.cls = c;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred.data[i] == c, t = truth.data[i] == c;
            r.tp += p && t;
            r.fp += p && !t;
            r.fn += !p && t;
            r.tn += !p && !t;
        }
        r.finish();
        rows.push_back(r);
    }
    return rows;
}

inline nlohmann::json to_json(const MetricRow& r) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"class", default_class_table().at(r.cls)},
            {"dsc", num(r.dsc)},
            {"sen", r.defined() ? num(r.sen) : nlohmann::json("undefined")},
            {"spe", num(r.spe)},
            {"acc", num(r.acc)},
            {"tp", r.tp},
            {"fp", r.fp},
            {"fn", r.fn},
            {"tn", r.tn}};
}

/// Shuffled split into k folds whose sizes differ by at most one.
inline std::vector<std::vector<std::string>> kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed) {
    if (k < 2) throw UsageError("kfold_split: k must be at least 2");
    if (int(ids.size()) < k)
        throw DataError("kfold_split: " + std::to_string(ids.size()) + " cases cannot fill " + std::to_string(k) + " folds");
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed);
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[std::uniform_int_distribution<std::size_t>(0, i)(rng)]);
    std::vector<std::vector<std::string>> folds(k);
    for (std::size_t i = 0; i < ids.size(); ++i) folds[i % std::size_t(k)].push_back(ids[i]);
    return folds;
}

enum class ExperimentKind { alpha_beta_sweep, loss_strategy, architecture, weighting, annotation_opt };

inline const char* to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::alpha_beta_sweep: return "alpha_beta_sweep";
        case ExperimentKind::loss_strategy: return "loss_strategy";
        case ExperimentKind::architecture: return "architecture";
        case ExperimentKind::weighting: return "weighting";
        case ExperimentKind::annotation_opt: return "annotation_opt";
    }
    return "?";
}

inline ExperimentKind experiment_kind_from(const std::string& s) {
    for (auto k : {ExperimentKind::alpha_beta_sweep, ExperimentKind::loss_strategy, ExperimentKind::architecture,
                   ExperimentKind::weighting, ExperimentKind::annotation_opt})
        if (s == to_string(k)) return k;
    throw UsageError("unknown experiment kind '" + s + "'");
}

inline std::string alpha_key(double a) {
    std::ostringstream o;
    o << "alpha_" << a;
    return o.str();
}

inline std::vector<std::string> default_grid(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::alpha_beta_sweep: return {alpha_key(0.1), alpha_key(0.3), alpha_key(0.5), alpha_key(0.7), alpha_key(0.9)};
        case ExperimentKind::loss_strategy: return {"dice_only", "dice_ce", "dice_focal"};
        case ExperimentKind::architecture: return {"vanilla", "conv_down", "residual", "full_residual"};
        case ExperimentKind::weighting: return {"unweighted", "weighted"};
        case ExperimentKind::annotation_opt: return {"manual", "optimized"};
    }
    return {};
}

struct ExperimentPlan {
    ExperimentKind kind = ExperimentKind::loss_strategy;
    std::vector<std::string> grid;  // empty: default_grid(kind)
    std::vector<std::uint64_t> seeds{0, 1, 2};
    int k = 5;
    int folds = 0;  // folds actually evaluated; 0 means all k
    std::uint64_t split_seed = 0;
    std::vector<StageId> stages;  // empty: vessels only for the sweep and annotation runs, else both

    std::vector<std::string> rows() const { return grid.empty() ? default_grid(kind) : grid; }
    std::vector<StageId> stage_list() const {
        if (!stages.empty()) return stages;
        if (kind == ExperimentKind::alpha_beta_sweep || kind == ExperimentKind::annotation_opt) return {StageId::IIB};
        return {StageId::IIA, StageId::IIB};
    }
    int folds_to_run() const { return folds > 0 ? std::min(folds, k) : k; }

    void validate() const {
        if (rows().empty()) throw UsageError("experiment: empty grid");
        if (seeds.empty()) throw UsageError("experiment: no seeds");
        auto s = seeds;
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw UsageError("experiment: seeds must be distinct");
        if (k < 2) throw UsageError("experiment: k must be at least 2");
        for (auto id : stage_list())
            if (id == StageId::I) throw UsageError("experiment: only stage IIA and IIB networks are compared");
    }
};

struct ExperimentBase {
    StageSpec tissue = StageSpec::stage_two_tissue();
    StageSpec vessel = StageSpec::stage_two_vessel();
    StageTraining training;
    double roi_margin_mm = 20.0;
    // Simulated incomplete vessel annotation for annotation_opt.
    int erased_segments = 3;
    double erased_radius_mm = 8.0;
    double accept_overlap = 0.5;  // simulated reviewer accepts a candidate when this fraction is true vessel
};

/// Applies one grid key to a stage configuration.
inline void apply_row(ExperimentKind kind, const std::string& key, StageSpec& spec, StageTraining& t) {
    switch (kind) {
        case ExperimentKind::alpha_beta_sweep: {
            if (key.rfind("alpha_", 0) != 0) throw UsageError("alpha sweep key '" + key + "' must look like alpha_0.3");
            std::size_t used = 0;
            double a = 0;
            try {
                a = std::stod(key.substr(6), &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != key.size() - 6) throw UsageError("alpha sweep key '" + key + "' must look like alpha_0.3");
            t.loss.alpha = a;
            t.loss.beta = 1.0 - a;
            break;
        }
        case ExperimentKind::loss_strategy: t.loss.strategy = loss_strategy_from(key); break;
        case ExperimentKind::architecture: spec.net.block_design = nn::block_design_from(key); break;
        case ExperimentKind::weighting:
            if (key != "weighted" && key != "unweighted") throw UsageError("weighting key must be weighted or unweighted");
            t.loss.weighted = key == "weighted";
            break;
        case ExperimentKind::annotation_opt:
            if (key != "manual" && key != "optimized") throw UsageError("annotation key must be manual or optimized");
            break;
    }
    t.loss.validate();
}

/// Erases vessel voxels inside `n` balls centered on random vessel voxels,
/// mimicking branches a manual annotator missed.
inline LabelVolume erase_vessel_segments(const LabelVolume& vessel, int n, double radius_mm, std::uint64_t seed) {
    LabelVolume out = vessel;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < vessel.size(); ++i)
        if (vessel.data[i] == kArtery || vessel.data[i] == kVein) idx.push_back(i);
    if (idx.empty()) return out;
    std::mt19937_64 rng(seed);
    const auto& sp = vessel.geometry.spacing;
    for (int k = 0; k < n; ++k) {
        const auto c = vessel.coords(idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)]);
        std::int64_t r[3];
        for (int a = 0; a < 3; ++a) r[a] = std::int64_t(std::ceil(radius_mm / sp[a]));
        for (std::int64_t z = std::max<std::int64_t>(0, c[2] - r[2]); z <= std::min(vessel.shape[2] - 1, c[2] + r[2]); ++z)
            for (std::int64_t y = std::max<std::int64_t>(0, c[1] - r[1]); y <= std::min(vessel.shape[1] - 1, c[1] + r[1]); ++y)
                for (std::int64_t x = std::max<std::int64_t>(0, c[0] - r[0]); x <= std::min(vessel.shape[0] - 1, c[0] + r[0]); ++x) {
                    const double dx = (x - c[0]) * sp[0], dy = (y - c[1]) * sp[1], dz = (z - c[2]) * sp[2];
                    if (dx * dx + dy * dy + dz * dz <= radius_mm * radius_mm) out.at(x, y, z) = kBackground;
                }
    }
    return out;
}

struct ExperimentRow {
    std::string key;
    std::uint64_t seed = 0;
    int fold = 0;
    MetricRow m;
};

struct ExperimentResult {
    ExperimentKind kind = ExperimentKind::loss_strategy;
    std::vector<std::string> keys;
    std::vector<std::uint8_t> classes;
    std::vector<std::uint64_t> seeds;
    std::vector<ExperimentRow> rows;

    /// Mean of a metric over defined rows; restricted to one seed when given.
    double mean(const std::string& key, std::uint8_t cls, const std::string& metric,
                std::optional<std::uint64_t> seed = std::nullopt) const {
        double s = 0.0;
        int n = 0;
        for (const auto& r : rows) {
            if (r.key != key || r.m.cls != cls || !r.m.defined() || (seed && r.seed != *seed)) continue;
            const double v = metric == "dsc" ? r.m.dsc : metric == "sen" ? r.m.sen : metric == "spe" ? r.m.spe : r.m.acc;
            if (!std::isfinite(v)) continue;
            s += v;
            ++n;
        }
        return n ? s / n : std::numeric_limits<double>::quiet_NaN();
    }
    double sd(const std::string& key, std::uint8_t cls, const std::string& metric) const {
        const double mu = mean(key, cls, metric);
        double s = 0.0;
        int n = 0;
        for (const auto& r : rows) {
            if (r.key != key || r.m.cls != cls || !r.m.defined()) continue;
            const double v = metric == "dsc" ? r.m.dsc : r.m.sen;
            s += (v - mu) * (v - mu);
            ++n;
        }
        return n > 1 ? std::sqrt(s / (n - 1)) : 0.0;
    }

    std::string csv() const {
        std::ostringstream o;
        o << "experiment,row,seed,fold,class,dsc,sen,spe,acc,tp,fp,fn,tn\n";
        for (const auto& r : rows) {
            o << to_string(kind) << "," << r.key << "," << r.seed << "," << r.fold << ","
              << default_class_table().at(r.m.cls) << "," << r.m.dsc << ",";
            if (r.m.defined()) o << r.m.sen;
            else o << "undefined";
            o << "," << r.m.spe << "," << r.m.acc << "," << r.m.tp << "," << r.m.fp << "," << r.m.fn << "," << r.m.tn
              << "\n";
        }
        return o.str();
    }

    nlohmann::json summary() const {
        auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
        nlohmann::json j{{"experiment", to_string(kind)}, {"seeds", seeds}, {"rows", nlohmann::json::array()}};
        for (const auto& key : keys) {
            nlohmann::json row{{"row", key}};
            for (auto c : classes) {
                const auto& name = default_class_table().at(c);
                nlohmann::json per_seed = nlohmann::json::array();
                for (auto s : seeds) per_seed.push_back({{"seed", s}, {"dsc", num(mean(key, c, "dsc", s))}, {"sen", num(mean(key, c, "sen", s))}});
                row[name] = {{"dsc_mean", num(mean(key, c, "dsc"))},
                             {"dsc_sd", num(sd(key, c, "dsc"))},
                             {"sen_mean", num(mean(key, c, "sen"))},
                             {"sen_sd", num(sd(key, c, "sen"))},
                             {"per_seed", per_seed}};
            }
            j["rows"].push_back(row);
        }
        return j;
    }

    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        const std::string stem = std::string("experiment_") + to_string(kind);
        std::ofstream(dir / (stem + ".csv")) << csv();
        std::ofstream(dir / (stem + ".json")) << summary().dump(2) << "\n";
    }
};

namespace experiment_detail {

inline LabelVolume predict_case(const PatchPredictor& p, const TrainCase& c, const StageSpec& spec) {
    return sliding_window_predict(p, c.image, spec.patch, spec.classes, spec.overlap, pad_value_for(spec.norm)).argmax();
}

inline std::vector<TrainCase> gather(const std::vector<std::vector<TrainCase>>& per_case, const std::vector<std::size_t>& idx) {
    std::vector<TrainCase> out;
    for (auto i : idx) out.insert(out.end(), per_case[i].begin(), per_case[i].end());
    return out;
}

/// Simulated reviewer: keeps candidates that are mostly true vessel.
inline std::vector<TrainCase> optimize_annotations(const PatchPredictor& p, const std::vector<TrainCase>& manual,
                                                   const std::vector<TrainCase>& truth, const StageSpec& spec,
                                                   double accept_overlap) {
    std::vector<TrainCase> out = manual;
    for (std::size_t i = 0; i < manual.size(); ++i) {
        const auto pred = predict_case(p, manual[i], spec);
        const auto m = extract_candidates(pred, manual[i].labels, manual[i].id);
        std::map<int, CandidateStatus> d;
        for (const auto& c : m.candidates) {
            std::int64_t hit = 0;
            for (auto v : c.component.voxels) hit += truth[i].labels.data[v] == c.cls;
            d[c.id] = double(hit) >= accept_overlap * double(c.component.voxel_count) ? CandidateStatus::accepted
                                                                                       : CandidateStatus::rejected;
        }
        out[i].labels = apply_decisions(manual[i].labels, m, d);
    }
    return out;
}

}  // namespace experiment_detail

using ExperimentProgress = std::function<void(const std::string&)>;

/// Trains one network per grid row, seed, fold and stage, then scores the
/// held-out fold's ROI crops against ground truth.
inline ExperimentResult run_experiment(const ExperimentPlan& plan, const std::vector<CaseData>& cases,
                                       const ExperimentBase& base, const ExperimentProgress& progress = {}) {
    using namespace experiment_detail;
    plan.validate();
    ExperimentResult res;
    res.kind = plan.kind;
    res.keys = plan.rows();
    res.seeds = plan.seeds;
    std::vector<std::string> ids;
    for (const auto& c : cases) ids.push_back(c.id);
    const auto folds = kfold_split(ids, plan.k, plan.split_seed);

    struct StageData {
        StageSpec spec;
        std::vector<std::vector<TrainCase>> truth, manual;
    };
    std::vector<StageData> stages;
    for (auto id : plan.stage_list()) {
        StageData sd;
        sd.spec = id == StageId::IIA ? base.tissue : base.vessel;
        for (std::size_t i = 0; i < cases.size(); ++i) {
            sd.truth.push_back(stage_cases(cases[i], sd.spec, base.roi_margin_mm));
            if (plan.kind == ExperimentKind::annotation_opt) {
                CaseData m = cases[i];
                m.vessel = erase_vessel_segments(m.vessel, base.erased_segments, base.erased_radius_mm, mix_seed(plan.split_seed, i));
                sd.manual.push_back(stage_cases(m, sd.spec, base.roi_margin_mm));
            }
        }
        for (std::size_t c = 1; c < sd.spec.classes.size(); ++c) res.classes.push_back(sd.spec.classes[c]);
        stages.push_back(std::move(sd));
    }

    for (int f = 0; f < plan.folds_to_run(); ++f) {
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t i = 0; i < cases.size(); ++i)
            (std::find(folds[f].begin(), folds[f].end(), cases[i].id) != folds[f].end() ? test_idx : train_idx).push_back(i);
        for (auto& sd : stages) {
            const auto test = gather(sd.truth, test_idx);
            for (auto seed : plan.seeds) {
                std::shared_ptr<nn::UNet<float>> manual_net;
                for (const auto& key : res.keys) {
                    StageSpec spec = sd.spec;
                    StageTraining t = base.training;
                    t.seed = seed;
                    t.out_dir.clear();
                    apply_row(plan.kind, key, spec, t);
                    if (progress)
                        progress(std::string(to_string(plan.kind)) + " fold " + std::to_string(f) + " stage " +
                                 to_string(spec.id) + " seed " + std::to_string(seed) + " row " + key);
                    std::vector<TrainCase> train =
                        plan.kind == ExperimentKind::annotation_opt ? gather(sd.manual, train_idx) : gather(sd.truth, train_idx);
                    std::shared_ptr<nn::UNet<float>> net;
                    if (plan.kind == ExperimentKind::annotation_opt && key == "optimized") {
                        if (!manual_net) manual_net = train_stage(spec, train, {}, t).net;
                        train = optimize_annotations(make_predictor(manual_net), train, gather(sd.truth, train_idx), spec,
                                                     base.accept_overlap);
                        net = train_stage(spec, train, {}, t).net;
                    } else {
                        net = train_stage(spec, train, {}, t).net;
                        if (plan.kind == ExperimentKind::annotation_opt) manual_net = net;
                    }
                    const auto predict = make_predictor(net);
                    std::vector<MetricRow> pooled;
                    for (const auto& c : test) {
                        const auto rows = metrics(predict_case(predict, c, spec), c.labels,
                                                  std::vector<std::uint8_t>(spec.classes.begin() + 1, spec.classes.end()));
                        if (pooled.empty()) pooled = rows;
                        else
                            for (std::size_t r = 0; r < rows.size(); ++r) pooled[r] += rows[r];
                    }
                    for (const auto& m : pooled) res.rows.push_back({key, seed, f, m});
                }
            }
        }
    }
    return res;
}

}  // namespace renalseg
