// renalseg: command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "renalseg/annotate.hpp"
#include "renalseg/config.hpp"
#include "renalseg/dataset.hpp"
#include "renalseg/evaluate.hpp"
#include "renalseg/nifti.hpp"
#include "renalseg/parallel.hpp"
#include "renalseg/pipeline.hpp"
#include "renalseg/postprocess.hpp"
#include "renalseg/stats.hpp"
#include "renalseg/synth.hpp"
#include "renalseg/train.hpp"

namespace fs = std::filesystem;
using namespace renalseg;

namespace {

int g_threads = 0;  // 0: take from the config, else 1

void write_json(const fs::path& p, const nlohmann::json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw DataError("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError(p.string() + " is not valid JSON");
    return j;
}

void require_file(const std::string& p) {
    if (!fs::exists(p)) throw DataError("missing input file " + p);
}

RunConfig config_or_default(const std::string& path) {
    RunConfig c = path.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(path);
    if (g_threads == 0) g_threads = c.threads;
    return c;
}

std::string data_root(const RunConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!cfg.data_root.empty()) return cfg.data_root;
    throw UsageError("no dataset given (--data, config data_root or RENALSEG_DATA_ROOT)");
}

std::vector<CaseData> load_cases(const std::string& root, bool labels = true) {
    const auto dirs = list_cases(root);
    std::vector<CaseData> out(dirs.size());
    parallel_for(dirs.size(), g_threads, [&](std::size_t i) { out[i] = load_case(dirs[i], labels); });
    return out;
}

StageModels stage_models(const StageSpec& spec, const std::string& checkpoint_override) {
    StageSpec s = spec;
    if (!checkpoint_override.empty()) s.checkpoint = checkpoint_override;
    if (s.checkpoint.empty()) throw UsageError(std::string("stage ") + to_string(s.id) + " needs a checkpoint");
    require_file(s.checkpoint);
    return {s, make_predictor(load_stage_net(s))};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    int cases = 8;
    std::uint64_t seed = 0;
    std::string out;
    double tumor_p = 0.5, cyst_p = 0.5;
};

int run_synth(const SynthArgs& a) {
    PhantomVariation var;
    var.tumor_probability = a.tumor_p;
    var.cyst_probability = a.cyst_p;
    const auto cases = generate_dataset(a.cases, a.out, a.seed, var, default_phantom_spec(), g_threads);
    std::cout << "wrote " << cases.size() << " cases to " << a.out << "\n";
    return 0;
}

struct PreprocessArgs {
    std::string config, stage = "I", in, case_dir, out;
};

int run_preprocess(const PreprocessArgs& a) {
    const auto cfg = config_or_default(a.config);
    const auto& spec = cfg.stage(stage_id_from(a.stage));
    fs::create_directories(a.out);
    if (!a.in.empty()) {
        require_file(a.in);
        const auto img = read_nifti<float>(a.in);
        write_nifti(preprocess_for_stage(img, spec), (fs::path(a.out) / "image.nii.gz").string());
        return 0;
    }
    if (a.case_dir.empty()) throw UsageError("preprocess needs --in or --case");
    const auto c = load_case(a.case_dir);
    const auto samples = stage_cases(c, spec, cfg.pipeline.roi_margin_mm, cfg.pipeline.fg_threshold);
    for (const auto& s : samples) {
        write_nifti(s.image, (fs::path(a.out) / (s.id + "_image.nii.gz")).string());
        write_nifti(s.labels, (fs::path(a.out) / (s.id + "_labels.nii.gz")).string());
    }
    std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
    return 0;
}

struct StatsArgs {
    std::string config, data, out = "stats.json";
};

int run_stats(const StatsArgs& a) {
    const auto cfg = config_or_default(a.config);
    const auto cases = load_cases(data_root(cfg, a.data));
    nlohmann::json j;
    std::vector<LabelVolume> region;
    for (const auto& c : cases) region.push_back(stage_target(StageId::I, c.tissue, c.vessel));
    std::vector<IntensityCase> ic;
    for (std::size_t i = 0; i < cases.size(); ++i) ic.push_back({&cases[i].image, &region[i]});
    j["norm_spec_kidney_region"] = to_json(estimate_norm_spec(ic));
    for (auto id : {StageId::I, StageId::IIA, StageId::IIB}) {
        const auto& spec = cfg.stage(id);
        std::vector<LabelVolume> labels;
        for (const auto& c : cases)
            for (auto& s : stage_cases(c, spec, cfg.pipeline.roi_margin_mm, cfg.pipeline.fg_threshold)) labels.push_back(std::move(s.labels));
        const auto f = class_frequencies(labels, spec.classes);
        auto fj = to_json(f);
        fj["weights"] = class_weights(f, std::vector<bool>(f.size(), true)).w;
        j["stage_" + std::string(to_string(id))] = fj;
    }
    write_json(a.out, j);
    std::cout << j.dump(2) << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, stage = "I", data, out, resume;
    int fold = -1;
};

int run_train(const TrainArgs& a) {
    const auto cfg = config_or_default(a.config);
    const auto id = stage_id_from(a.stage);
    const auto& spec = cfg.stage(id);
    const auto cases = load_cases(data_root(cfg, a.data));
    std::vector<TrainCase> train, val;
    std::vector<std::string> held;
    if (a.fold >= 0) {
        std::vector<std::string> ids;
        for (const auto& c : cases) ids.push_back(c.id);
        const auto folds = kfold_split(ids, cfg.experiment.k, cfg.experiment.split_seed);
        if (a.fold >= int(folds.size())) throw UsageError("--fold must be below k");
        held = folds[a.fold];
    }
    for (const auto& c : cases) {
        auto s = stage_cases(c, spec, cfg.pipeline.roi_margin_mm, cfg.pipeline.fg_threshold);
        auto& dst = std::find(held.begin(), held.end(), c.id) != held.end() ? val : train;
        dst.insert(dst.end(), s.begin(), s.end());
    }
    const fs::path out = a.out.empty() ? fs::path(cfg.out_dir) / ("stage_" + a.stage) : fs::path(a.out);
    auto t = cfg.training();
    t.out_dir = out.string();
    TrainSetup s;
    s.net = spec.net;
    s.train = t.train;
    s.train.seed = t.seed;
    s.loss = t.loss;
    s.augment = t.augment;
    s.classes = spec.classes;
    s.freqs = class_frequencies(labels_of(train), spec.classes);
    s.pad_value = pad_value_for(spec.norm);
    s.out_dir = t.out_dir;
    s.max_iterations = t.max_iterations;
    nn::UNet<float> net(spec.net, t.seed);
    const auto res = train_loop(net, train, val, s, a.resume);
    write_json(out / "config.json", to_json(cfg));
    std::cout << "stage " << a.stage << ": " << res.iterations << " iterations, best val loss " << res.best_val
              << " at epoch " << res.best_epoch << "; checkpoints in " << out.string() << "\n";
    return 0;
}

struct PredictArgs {
    std::string config, stage = "I", checkpoint, out;
    std::vector<std::string> in;
};

int run_predict(const PredictArgs& a) {
    const auto cfg = config_or_default(a.config);
    const auto m = stage_models(cfg.stage(stage_id_from(a.stage)), a.checkpoint);
    for (const auto& p : a.in) require_file(p);
    if (a.in.size() > 1) fs::create_directories(a.out);
    parallel_for(a.in.size(), g_threads, [&](std::size_t i) {
        const auto img = read_nifti<float>(a.in[i]);
        const auto labels = pipeline_detail::predict_stage(img, m);
        const fs::path dst = a.in.size() == 1 ? fs::path(a.out) : fs::path(a.out) / (fs::path(a.in[i]).parent_path().filename().string() + "_labels.nii.gz");
        write_nifti(labels, dst.string());
    });
    return 0;
}

struct PostArgs {
    std::string in, kidney, out, report;
    double min_mm3 = 150.0;
    int connectivity = 26;
};

int run_postprocess(const PostArgs& a) {
    require_file(a.in);
    const auto labels = read_labels(a.in);
    std::vector<CensusEntry> census;
    auto out = prune_small_vessels(labels, a.min_mm3, a.connectivity, &census);
    if (!a.kidney.empty()) {
        require_file(a.kidney);
        out = drop_vessels_off_kidney(out, read_labels(a.kidney), a.connectivity, &census);
    }
    write_nifti(out, a.out);
    if (!a.report.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& c : census) j.push_back(to_json(c));
        write_json(a.report, {{"census", j}});
    }
    return 0;
}

struct EvalArgs {
    std::string pred, truth, case_dir, out;
};

int run_evaluate(const EvalArgs& a) {
    require_file(a.pred);
    const auto pred = read_labels(a.pred);
    LabelVolume truth;
    if (!a.case_dir.empty()) {
        const auto c = load_case(a.case_dir);
        truth = fuse_labels(c.tissue, c.vessel);
    } else if (!a.truth.empty()) {
        require_file(a.truth);
        truth = read_labels(a.truth);
    } else {
        throw UsageError("evaluate needs --truth or --case");
    }
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : metrics(pred, truth, {kKidney, kTumor, kCyst, kArtery, kVein})) rows.push_back(to_json(r));
    const nlohmann::json j{{"pred", a.pred}, {"metrics", rows}};
    if (!a.out.empty()) write_json(a.out, j);
    std::cout << j.dump(2) << "\n";
    return 0;
}

struct MergeArgs {
    std::string manual, pred, decisions, out, manifest, mask, case_id;
};

int run_merge(const MergeArgs& a) {
    require_file(a.manual);
    require_file(a.pred);
    const auto manual = read_labels(a.manual);
    const auto m = extract_candidates(read_labels(a.pred), manual, a.case_id);
    if (!a.manifest.empty()) write_json(a.manifest, to_json(m));
    if (!a.mask.empty()) write_nifti(candidate_mask(m), a.mask);
    if (a.decisions.empty()) {
        std::cout << m.candidates.size() << " candidates pending review\n";
        return 0;
    }
    if (a.out.empty()) throw UsageError("merge-annotations with --decisions needs --out");
    const auto merged = apply_decisions(manual, m, decisions_from_json(read_json(a.decisions)));
    write_nifti(merged, a.out);
    return 0;
}

struct ExperimentArgs {
    std::string config, kind, data, out;
};

int run_experiment_cmd(const ExperimentArgs& a) {
    auto cfg = config_or_default(a.config);
    if (!a.kind.empty()) {
        cfg.experiment.kind = experiment_kind_from(a.kind);
        cfg.experiment.grid.clear();
    }
    const auto cases = load_cases(data_root(cfg, a.data));
    const auto res = run_experiment(cfg.experiment, cases, cfg.experiment_base(),
                                    [](const std::string& s) { std::cerr << "[experiment] " << s << "\n"; });
    const fs::path out = a.out.empty() ? fs::path(cfg.out_dir) : fs::path(a.out);
    res.write(out);
    std::cout << res.summary().dump(2) << "\n";
    return 0;
}

struct PipelineArgs {
    std::string config, out, ck1, ck2a, ck2b;
    std::vector<std::string> in;
};

int run_pipeline(const PipelineArgs& a) {
    const auto cfg = config_or_default(a.config);
    for (const auto& p : a.in) require_file(p);
    const auto s1 = stage_models(cfg.stage1, a.ck1);
    const auto s2a = stage_models(cfg.tissue, a.ck2a);
    const auto s2b = stage_models(cfg.vessel, a.ck2b);
    const fs::path out = a.out.empty() ? fs::path(cfg.out_dir) : fs::path(a.out);
    fs::create_directories(out);
    int warnings = 0;
    std::vector<std::string> status(a.in.size());
    parallel_for(a.in.size(), g_threads, [&](std::size_t i) {
        const fs::path in(a.in[i]);
        const auto img = read_nifti<float>(in.string());
        const auto r = run_case(img, s1, s2a, s2b, cfg.pipeline);
        std::string stem = in.filename().string();
        for (const char* ext : {".nii.gz", ".nii"})
            if (stem.size() > std::strlen(ext) && stem.substr(stem.size() - std::strlen(ext)) == ext) {
                stem.resize(stem.size() - std::strlen(ext));
                break;
            }
        const fs::path dir = a.in.size() == 1 ? out : out / (in.parent_path().filename().string() + "_" + stem);
        fs::create_directories(dir);
        write_nifti(r.fused, (dir / "fused.nii.gz").string());
        auto report = to_json(r);
        report["input"] = in.string();
        write_json(dir / "report.json", report);
        status[i] = r.status;
    });
    for (std::size_t i = 0; i < a.in.size(); ++i) {
        std::cout << a.in[i] << ": " << status[i] << "\n";
        warnings += status[i] != "ok";
    }
    if (warnings) std::cerr << "warning: " << warnings << " case(s) without a detected kidney\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"renalseg: coarse-to-fine kidney, tumor, cyst and vessel segmentation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    app.add_option("--threads", g_threads, "Worker threads for independent cases (default 1)")->check(CLI::PositiveNumber);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
    synth->add_option("--cases", sa.cases, "Number of cases")->check(CLI::PositiveNumber);
    synth->add_option("--seed", sa.seed, "Random seed");
    synth->add_option("--out", sa.out, "Output directory")->required();
    synth->add_option("--tumor-prob", sa.tumor_p, "Probability that a case has a tumor")->check(CLI::Range(0.0, 1.0));
    synth->add_option("--cyst-prob", sa.cyst_p, "Probability that a case has a cyst")->check(CLI::Range(0.0, 1.0));

    PreprocessArgs pa;
    auto* pre = app.add_subcommand("preprocess", "Resample and normalize a volume (or a labeled case) for one stage");
    pre->add_option("--config", pa.config, "JSON run configuration");
    pre->add_option("--stage", pa.stage, "Stage: I, IIA or IIB");
    pre->add_option("--in", pa.in, "Input image (NIfTI)");
    pre->add_option("--case", pa.case_dir, "Case directory with image, tissue and vessel labels");
    pre->add_option("--out", pa.out, "Output directory")->required();

    StatsArgs sta;
    auto* stats = app.add_subcommand("stats", "Intensity statistics, class frequencies and weights of a dataset");
    stats->add_option("--config", sta.config, "JSON run configuration");
    stats->add_option("--data", sta.data, "Dataset root");
    stats->add_option("--out", sta.out, "Output JSON");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train one stage network");
    train->add_option("--config", ta.config, "JSON run configuration");
    train->add_option("--stage", ta.stage, "Stage: I, IIA or IIB");
    train->add_option("--data", ta.data, "Dataset root");
    train->add_option("--out", ta.out, "Checkpoint directory (default <out_dir>/stage_<stage>)");
    train->add_option("--resume", ta.resume, "Resume from a checkpoint directory");
    train->add_option("--fold", ta.fold, "Hold out this cross-validation fold for validation");

    PredictArgs pra;
    auto* predict = app.add_subcommand("predict", "Run one stage network on whole volumes");
    predict->add_option("--config", pra.config, "JSON run configuration");
    predict->add_option("--stage", pra.stage, "Stage: I, IIA or IIB");
    predict->add_option("--checkpoint", pra.checkpoint, "Network checkpoint (overrides the config)");
    predict->add_option("--in", pra.in, "Input image(s)")->required();
    predict->add_option("--out", pra.out, "Output label file, or directory for several inputs")->required();

    PostArgs poa;
    auto* post = app.add_subcommand("postprocess", "Prune small vessel components and vessels off the kidney");
    post->add_option("--in", poa.in, "Label volume")->required();
    post->add_option("--kidney", poa.kidney, "Kidney mask; vessels not touching it are removed");
    post->add_option("--out", poa.out, "Output label volume")->required();
    post->add_option("--report", poa.report, "Component census JSON");
    post->add_option("--min-mm3", poa.min_mm3, "Minimum vessel component volume in mm3");
    post->add_option("--connectivity", poa.connectivity, "6 or 26")->check(CLI::IsMember({6, 26}));

    EvalArgs ea;
    auto* eval = app.add_subcommand("evaluate", "Per-class DSC, SEN, SPE and ACC against ground truth");
    eval->add_option("--pred", ea.pred, "Predicted labels")->required();
    eval->add_option("--truth", ea.truth, "Ground-truth labels");
    eval->add_option("--case", ea.case_dir, "Case directory (truth = tissue fused with vessel)");
    eval->add_option("--out", ea.out, "Output JSON");

    MergeArgs ma;
    auto* merge = app.add_subcommand("merge-annotations", "Extract vessel candidates and merge accepted ones");
    merge->add_option("--manual", ma.manual, "Manual vessel labels")->required();
    merge->add_option("--pred", ma.pred, "Predicted vessel labels")->required();
    merge->add_option("--case-id", ma.case_id, "Case id recorded in the manifest");
    merge->add_option("--manifest", ma.manifest, "Write the candidate manifest JSON here");
    merge->add_option("--candidates", ma.mask, "Write candidate voxels as NIfTI here");
    merge->add_option("--decisions", ma.decisions, "Decisions JSON; without it only candidates are extracted");
    merge->add_option("--out", ma.out, "Merged label output");

    ExperimentArgs xa;
    auto* exp = app.add_subcommand("experiment", "Run an ablation experiment on a phantom dataset");
    exp->add_option("--config", xa.config, "JSON run configuration");
    exp->add_option("--kind", xa.kind, "alpha_beta_sweep, loss_strategy, architecture, weighting or annotation_opt");
    exp->add_option("--data", xa.data, "Dataset root");
    exp->add_option("--out", xa.out, "Output directory for CSV and JSON");

    PipelineArgs pia;
    auto* pipe = app.add_subcommand("pipeline", "Full cascade: stage I, ROIs, stage IIA/IIB, cleanup, fusion");
    pipe->add_option("--config", pia.config, "JSON run configuration")->required();
    pipe->add_option("--in", pia.in, "Input image(s)")->required();
    pipe->add_option("--out", pia.out, "Output directory (default <out_dir>)");
    pipe->add_option("--checkpoint-I", pia.ck1, "Stage I checkpoint (overrides the config)");
    pipe->add_option("--checkpoint-IIA", pia.ck2a, "Stage IIA checkpoint (overrides the config)");
    pipe->add_option("--checkpoint-IIB", pia.ck2b, "Stage IIB checkpoint (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) return run_synth(sa);
        if (*pre) return run_preprocess(pa);
        if (*stats) return run_stats(sta);
        if (*train) return run_train(ta);
        if (*predict) return run_predict(pra);
        if (*post) return run_postprocess(poa);
        if (*eval) return run_evaluate(ea);
        if (*merge) return run_merge(ma);
        if (*exp) return run_experiment_cmd(xa);
        if (*pipe) return run_pipeline(pia);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
