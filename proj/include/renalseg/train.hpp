#pragma once

// Patch sampling, augmentation, Adam and the plateau schedule, plus the
// epoch loop that ties them to the loss and the network.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/loss.hpp"
#include "renalseg/nn/checkpoint.hpp"
#include "renalseg/nn/unet.hpp"
#include "renalseg/stats.hpp"
#include "renalseg/volume.hpp"

namespace renalseg {

/// Raised when an optimizer step sees a NaN or infinite gradient.
class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    Index3 patch_size{128, 128, 128};  // x, y, z
    int batch_size = 2;
    double lr0 = 1e-4;
    double lr_factor = 5.0;
    double plateau_delta = 1e-3;
    int lr_patience = 25;
    int stop_patience = 50;
    int max_epochs = 1000;
    int batches_per_epoch = 200;
    double fg_oversample = 0.5;
    std::uint64_t seed = 0;
    int val_patches_per_case = 2;

    void validate() const {
        for (auto p : patch_size)
            if (p < 1) throw UsageError("train config: patch_size must be positive");
        if (batch_size < 1 || max_epochs < 1 || batches_per_epoch < 1 || lr_patience < 1 || stop_patience < 1 ||
            val_patches_per_case < 1)
            throw UsageError("train config: counts must be positive");
        if (!(lr0 > 0.0) || !(lr_factor > 1.0) || !(plateau_delta >= 0.0))
            throw UsageError("train config: lr0 > 0, lr_factor > 1 and plateau_delta >= 0 required");
        if (!(fg_oversample >= 0.0 && fg_oversample <= 1.0)) throw UsageError("train config: fg_oversample must lie in [0, 1]");
    }

    static TrainConfig stage_one() {
        TrainConfig c;
        c.patch_size = {144, 144, 96};
        return c;
    }
    static TrainConfig stage_two() { return {}; }
};

/// Probabilities of zero disable a transform.
struct AugmentSpec {
    double p_rotation = 0.2;
    double rotation_deg = 15.0;
    double p_scale = 0.2;
    double scale_lo = 0.85, scale_hi = 1.25;
    double p_elastic = 0.2;
    double elastic_sigma_mm = 2.0;
    int elastic_grid = 4;
    double p_gamma = 0.3;
    double gamma_lo = 0.7, gamma_hi = 1.5;
    double p_noise = 0.15;
    double noise_sigma = 0.1;
    double p_mirror = 0.5;  // per axis

    static AugmentSpec none() {
        AugmentSpec a;
        a.p_rotation = a.p_scale = a.p_elastic = a.p_gamma = a.p_noise = a.p_mirror = 0.0;
        return a;
    }

    void validate() const {
        for (double p : {p_rotation, p_scale, p_elastic, p_gamma, p_noise, p_mirror})
            if (!(p >= 0.0 && p <= 1.0)) throw UsageError("augment: probabilities must lie in [0, 1]");
        if (!(scale_lo > 0.0 && scale_lo <= scale_hi) || !(gamma_lo > 0.0 && gamma_lo <= gamma_hi))
            throw UsageError("augment: invalid scale or gamma range");
        if (!std::isfinite(rotation_deg) || !(elastic_sigma_mm >= 0.0) || !(noise_sigma >= 0.0) || elastic_grid < 2)
            throw UsageError("augment: invalid rotation, elastic or noise parameters");
    }
};

/// One preprocessed training volume. Label ids are the original class ids;
/// `classes` in the loop decides which id feeds which channel.
struct TrainCase {
    std::string id;
    Volume image;
    LabelVolume labels;
};

struct Patch {
    Volume image;
    LabelVolume labels;
    bool fg_centered = false;
};

/// Crops a patch around a random center (a foreground voxel with probability
/// fg_oversample). Voxels past the border take `pad_value` / background. An
/// axis shorter than the patch is centered so the whole extent is kept.
inline Patch sample_patch(const TrainCase& c, const Index3& size, double fg_oversample, float pad_value,
                          std::mt19937_64& rng) {
    require_same_grid(c.image, c.labels, "sample_patch");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Index3 center{};
    bool fg = false;
    if (u01(rng) < fg_oversample) {
        std::vector<std::size_t> fg_idx;
        for (std::size_t i = 0; i < c.labels.size(); ++i)
            if (c.labels.data[i] != 0) fg_idx.push_back(i);
        if (!fg_idx.empty()) {
            center = c.labels.coords(fg_idx[std::uniform_int_distribution<std::size_t>(0, fg_idx.size() - 1)(rng)]);
            fg = true;
        }
    }
    if (!fg)
        for (int a = 0; a < 3; ++a) center[a] = std::uniform_int_distribution<std::int64_t>(0, c.image.shape[a] - 1)(rng);

    Index3 lo{};
    for (int a = 0; a < 3; ++a)
        lo[a] = c.image.shape[a] <= size[a] ? -(size[a] - c.image.shape[a]) / 2 : center[a] - size[a] / 2;

    Patch p;
    p.fg_centered = fg;
    Geometry g = c.image.geometry;
    g.origin = c.image.geometry.world(double(lo[0]), double(lo[1]), double(lo[2]));
    p.image = Volume(size, g, pad_value);
    p.labels = LabelVolume(size, g, 0);
    for (std::int64_t z = 0; z < size[2]; ++z)
        for (std::int64_t y = 0; y < size[1]; ++y)
            for (std::int64_t x = 0; x < size[0]; ++x) {
                const std::int64_t sx = lo[0] + x, sy = lo[1] + y, sz = lo[2] + z;
                if (!c.image.contains(sx, sy, sz)) continue;
                p.image.at(x, y, z) = c.image.at(sx, sy, sz);
                p.labels.at(x, y, z) = c.labels.at(sx, sy, sz);
            }
    return p;
}

/// Sampled parameters of one augmentation draw.
struct AugmentRecord {
    bool rotated = false, scaled = false, elastic = false, gamma = false, noise = false;
    std::array<double, 3> angles_rad{};
    double scale = 1.0;
    double gamma_value = 1.0;
    double noise_sigma = 0.0;
    std::array<bool, 3> mirrored{};
};

namespace train_detail {

using M3 = std::array<std::array<double, 3>, 3>;

inline M3 mul(const M3& a, const M3& b) {
    M3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

inline M3 rotation(const std::array<double, 3>& ang) {
    const double cx = std::cos(ang[0]), sx = std::sin(ang[0]);
    const double cy = std::cos(ang[1]), sy = std::sin(ang[1]);
    const double cz = std::cos(ang[2]), sz = std::sin(ang[2]);
    const M3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
    const M3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    const M3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
    return mul(rz, mul(ry, rx));
}

template <class T>
void mirror_axis(Image<T>& v, int axis) {
    const auto s = v.shape;
    for (std::int64_t z = 0; z < s[2]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[0]; ++x) {
                std::int64_t n[3] = {x, y, z};
                if (n[axis] >= s[axis] / 2) continue;
                n[axis] = s[axis] - 1 - n[axis];
                std::swap(v.at(x, y, z), v.at(n[0], n[1], n[2]));
            }
}

}  // namespace train_detail

/// Applies one random composite transform to the pair. Spatial transforms
/// share a single backward map (trilinear for intensities, nearest for labels).
inline AugmentRecord augment(Volume& image, LabelVolume& labels, const AugmentSpec& spec, std::uint64_t seed,
                             float pad_value) {
    using namespace train_detail;
    spec.validate();
    require_same_grid(image, labels, "augment");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    AugmentRecord rec;

    if (u01(rng) < spec.p_rotation) {
        rec.rotated = true;
        const double r = spec.rotation_deg * M_PI / 180.0;
        for (auto& a : rec.angles_rad) a = uniform(-r, r);
    }
    if (u01(rng) < spec.p_scale) {
        rec.scaled = true;
        rec.scale = uniform(spec.scale_lo, spec.scale_hi);
    }
    std::vector<std::array<double, 3>> grid;
    const int G = spec.elastic_grid;
    if (u01(rng) < spec.p_elastic && spec.elastic_sigma_mm > 0.0) {
        rec.elastic = true;
        std::normal_distribution<double> nd(0.0, spec.elastic_sigma_mm);
        grid.resize(std::size_t(G * G * G));
        for (auto& d : grid)
            for (auto& c : d) c = nd(rng);
    }

    if (rec.rotated || rec.scaled || rec.elastic) {
        const Index3 s = image.shape;
        const Vec3 sp = image.geometry.spacing;
        // Output -> source: src = c + R^T (out - c) / scale + elastic(out).
        M3 rt = rotation(rec.angles_rad);
        for (int i = 0; i < 3; ++i)
            for (int j = i + 1; j < 3; ++j) std::swap(rt[i][j], rt[j][i]);
        const double inv_scale = 1.0 / rec.scale;
        Volume out_img = image.like<float>(pad_value);
        LabelVolume out_lab = labels.like<std::uint8_t>(0);
        for (std::int64_t z = 0; z < s[2]; ++z)
            for (std::int64_t y = 0; y < s[1]; ++y)
                for (std::int64_t x = 0; x < s[0]; ++x) {
                    const std::int64_t n[3] = {x, y, z};
                    double d[3];
                    for (int a = 0; a < 3; ++a) d[a] = (double(n[a]) - 0.5 * double(s[a] - 1)) * sp[a];
                    double src_mm[3];
                    for (int a = 0; a < 3; ++a) src_mm[a] = inv_scale * (rt[a][0] * d[0] + rt[a][1] * d[1] + rt[a][2] * d[2]);
                    if (rec.elastic) {
                        double gf[3];
                        std::int64_t g0[3];
                        double t[3];
                        for (int a = 0; a < 3; ++a) {
                            gf[a] = s[a] > 1 ? double(n[a]) / double(s[a] - 1) * (G - 1) : 0.0;
                            g0[a] = std::min<std::int64_t>(std::int64_t(gf[a]), G - 2);
                            t[a] = gf[a] - double(g0[a]);
                        }
                        for (int corner = 0; corner < 8; ++corner) {
                            const std::int64_t gx = g0[0] + (corner & 1), gy = g0[1] + ((corner >> 1) & 1),
                                               gz = g0[2] + ((corner >> 2) & 1);
                            const double w = ((corner & 1) ? t[0] : 1 - t[0]) * ((corner & 2) ? t[1] : 1 - t[1]) *
                                             ((corner & 4) ? t[2] : 1 - t[2]);
                            const auto& disp = grid[std::size_t(gx + G * (gy + G * gz))];
                            for (int a = 0; a < 3; ++a) src_mm[a] += w * disp[a];
                        }
                    }
                    double f[3];
                    bool inside = true;
                    for (int a = 0; a < 3; ++a) {
                        f[a] = src_mm[a] / sp[a] + 0.5 * double(s[a] - 1);
                        if (f[a] < -0.5 || f[a] > double(s[a]) - 0.5) inside = false;
                    }
                    if (!inside) continue;
                    out_img.at(x, y, z) = detail::sample_trilinear(image, f[0], f[1], f[2]);
                    out_lab.at(x, y, z) = detail::sample_nearest(labels, f[0], f[1], f[2]);
                }
        image = std::move(out_img);
        labels = std::move(out_lab);
    }

    if (u01(rng) < spec.p_gamma) {
        rec.gamma = true;
        rec.gamma_value = uniform(spec.gamma_lo, spec.gamma_hi);
        const auto [mn, mx] = std::minmax_element(image.data.begin(), image.data.end());
        const double lo = *mn, range = double(*mx) - lo;
        if (range > 0.0)
            for (auto& v : image.data) v = float(lo + range * std::pow((double(v) - lo) / range, rec.gamma_value));
    }
    if (u01(rng) < spec.p_noise && spec.noise_sigma > 0.0) {
        rec.noise = true;
        rec.noise_sigma = uniform(0.0, spec.noise_sigma);
        std::normal_distribution<double> nd(0.0, rec.noise_sigma);
        for (auto& v : image.data) v = float(double(v) + nd(rng));
    }
    for (int a = 0; a < 3; ++a)
        if (u01(rng) < spec.p_mirror) {
            rec.mirrored[a] = true;
            train_detail::mirror_axis(image, a);
            train_detail::mirror_axis(labels, a);
        }
    return rec;
}

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam on every parameter of the store, using its .grad().
template <class T>
void adam_step(nn::ParamStore<T>& params, AdamState& st, double lr) {
    auto& entries = params.entries();
    if (st.m.empty()) {
        for (const auto& [_, p] : entries) {
            st.m.emplace_back(p.value().size(), 0.0);
            st.v.emplace_back(p.value().size(), 0.0);
        }
    }
    if (st.m.size() != entries.size()) throw UsageError("adam: state does not match parameter set");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto& g = entries[k].second.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(double(g[i])))
                throw TrainingDiverged("adam: non-finite gradient in " + entries[k].first + "[" + std::to_string(i) +
                                       "] at step " + std::to_string(st.step + 1));
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto& p = entries[k].second;
        const auto& g = p.grad();
        if (g.empty()) continue;
        auto& w = p.mutable_value().data;
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
            w[i] = T(double(w[i]) - lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps));
        }
    }
}

enum class ScheduleAction { keep, reduce_lr, stop };

struct ScheduleState {
    double lr = 1e-4;
    double best_train = std::numeric_limits<double>::infinity();  // as of the last counted improvement
    double best_val = std::numeric_limits<double>::infinity();
    int train_ref_epoch = 0;  // last improvement or reduction
    int val_ref_epoch = 0;
    int epoch = -1;           // last epoch seen (0-based)
};

/// Feeds one epoch's mean losses. Epochs are 0-based and the first one sets
/// the baseline. Train loss must improve on the best by at least
/// plateau_delta, validation loss by more than it. A reduction restarts the
/// patience window.
inline ScheduleAction schedule_tick(double train_loss, double val_loss, const TrainConfig& cfg, ScheduleState& s) {
    const int e = ++s.epoch;
    if (e == 0 || s.best_train - train_loss >= cfg.plateau_delta) {
        s.best_train = train_loss;
        s.train_ref_epoch = e;
    }
    if (e == 0 || s.best_val - val_loss > cfg.plateau_delta) {
        s.best_val = val_loss;
        s.val_ref_epoch = e;
    }
    if (e - s.val_ref_epoch >= cfg.stop_patience || e + 1 >= cfg.max_epochs) return ScheduleAction::stop;
    if (e - s.train_ref_epoch >= cfg.lr_patience) {
        s.lr /= cfg.lr_factor;
        s.train_ref_epoch = e;
        return ScheduleAction::reduce_lr;
    }
    return ScheduleAction::keep;
}

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::vector<double> train_dsc;  // per channel, mean over batches where present
    ScheduleAction action = ScheduleAction::keep;
};

/// Everything the loop needs beyond the two configs.
struct TrainSetup {
    nn::NetConfig net;
    TrainConfig train;
    LossConfig loss;
    AugmentSpec augment;
    std::vector<std::uint8_t> classes;  // label id per output channel
    FreqTable freqs;                    // over the training split, same order as `classes`
    float pad_value = 0.0f;             // normalized clip floor
    std::string out_dir;                // empty: nothing written
    std::int64_t max_iterations = 0;    // 0: no cap
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::int64_t iterations = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
};

namespace train_detail {

inline nn::Tensor<float> to_input(const std::vector<const Volume*>& imgs) {
    const Index3 s = imgs.front()->shape;
    nn::Tensor<float> x({std::int64_t(imgs.size()), 1, s[2], s[1], s[0]});
    for (std::size_t n = 0; n < imgs.size(); ++n) std::copy(imgs[n]->data.begin(), imgs[n]->data.end(), x.channel(n, 0));
    return x;
}

inline nn::Tensor<float> one_hot(const std::vector<const LabelVolume*>& labs, const std::vector<std::uint8_t>& classes) {
    const Index3 s = labs.front()->shape;
    nn::Tensor<float> g({std::int64_t(labs.size()), std::int64_t(classes.size()), s[2], s[1], s[0]});
    for (std::size_t n = 0; n < labs.size(); ++n)
        for (std::size_t c = 0; c < classes.size(); ++c) {
            float* gc = g.channel(n, c);
            for (std::size_t i = 0; i < labs[n]->size(); ++i) gc[i] = labs[n]->data[i] == classes[c] ? 1.0f : 0.0f;
        }
    return g;
}

inline WeightVector batch_weights(const nn::Tensor<float>& g, const TrainSetup& s) {
    const auto present = present_classes(g);
    if (std::none_of(present.begin(), present.end(), [](bool b) { return b; })) return {};
    if (s.loss.weighted) return class_weights(s.freqs, present);
    WeightVector w{std::vector<double>(present.size(), 0.0), present};
    const double k = double(std::count(present.begin(), present.end(), true));
    for (std::size_t c = 0; c < present.size(); ++c)
        if (present[c]) w.w[c] = 1.0 / k;
    return w;
}

struct StepOut {
    double loss = 0.0;
    std::vector<double> dsc;
    std::vector<bool> present;
};

/// Loss (and, when `update`, gradients) of the network on one batch.
inline StepOut run_batch(nn::UNet<float>& net, const nn::Tensor<float>& x, const nn::Tensor<float>& g,
                         const TrainSetup& s, bool update) {
    StepOut out;
    const WeightVector w = batch_weights(g, s);
    out.present = w.mask;
    if (w.w.empty()) return out;
    const bool softmax = s.net.final_activation == nn::FinalActivation::softmax;
    if (!update) {
        const auto p = net.forward(x);
        const auto lv = total_loss(p.value(), g, s.loss, w);
        out.loss = lv.total;
        out.dsc = tversky_dsc(p.value(), g, s.loss);
        return out;
    }
    net.params().zero_grad();
    auto logits = net.logits(nn::Var<float>(x));
    const auto p = net.activate(nn::Var<float>(logits.value())).value();
    const auto lv = total_loss(p, g, s.loss, w);
    out.loss = lv.total;
    out.dsc = tversky_dsc(p, g, s.loss);
    const auto grad = loss_grad_logits(logits.value(), g, s.loss, w, softmax);
    nn::backward(logits, grad.data);
    return out;
}

inline void write_sidecar(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << "\n";
}

inline void save_adam(const AdamState& st, const nn::ParamStore<float>& params, const std::string& path) {
    nn::ParamStore<double> store;
    const auto& e = params.entries();
    for (std::size_t k = 0; k < st.m.size(); ++k) {
        store.add("m." + e[k].first, e[k].second.shape()).mutable_value().data = st.m[k];
        store.add("v." + e[k].first, e[k].second.shape()).mutable_value().data = st.v[k];
    }
    nn::save_checkpoint(store, path);
}

inline void load_adam(AdamState& st, const nn::ParamStore<float>& params, const std::string& path) {
    nn::ParamStore<double> store;
    for (const auto& [name, p] : params.entries()) {
        store.add("m." + name, p.shape());
        store.add("v." + name, p.shape());
    }
    nn::load_checkpoint(store, path);
    st.m.clear();
    st.v.clear();
    for (const auto& [name, p] : params.entries()) {
        st.m.push_back(store.at("m." + name).value().data);
        st.v.push_back(store.at("v." + name).value().data);
    }
}

inline const char* to_string(ScheduleAction a) {
    switch (a) {
        case ScheduleAction::keep: return "keep";
        case ScheduleAction::reduce_lr: return "reduce_lr";
        case ScheduleAction::stop: return "stop";
    }
    return "?";
}

}  // namespace train_detail

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"patch_size", c.patch_size},
            {"batch_size", c.batch_size},
            {"lr0", c.lr0},
            {"lr_factor", c.lr_factor},
            {"plateau_delta", c.plateau_delta},
            {"lr_patience", c.lr_patience},
            {"stop_patience", c.stop_patience},
            {"max_epochs", c.max_epochs},
            {"batches_per_epoch", c.batches_per_epoch},
            {"fg_oversample", c.fg_oversample},
            {"seed", c.seed},
            {"val_patches_per_case", c.val_patches_per_case}};
}

/// Rebuilds the training state after `resume_from` (a directory holding
/// last.rsnet/last.adam/last.json from an earlier run).
struct ResumePoint {
    AdamState adam;
    ScheduleState schedule;
    TrainResult result;
};

/// Runs epochs of `batches_per_epoch` batches. Each sample draws one case at
/// random; all randomness derives from (seed, epoch, batch, slot) so a resumed
/// run follows the same trajectory as an uninterrupted one.
inline TrainResult train_loop(nn::UNet<float>& net, const std::vector<TrainCase>& train, const std::vector<TrainCase>& val,
                              const TrainSetup& s, const std::string& resume_from = {}) {
    using namespace train_detail;
    s.train.validate();
    s.loss.validate();
    s.augment.validate();
    if (train.empty()) throw DataError("train_loop: empty training split");
    if (s.classes.size() != std::size_t(s.net.out_classes))
        throw UsageError("train_loop: class list must have one entry per output channel");
    if (s.loss.weighted && s.freqs.classes != s.classes)
        throw UsageError("train_loop: frequency table classes must match the channel classes");

    const auto& tc = s.train;
    AdamState adam;
    ScheduleState sched;
    sched.lr = tc.lr0;
    TrainResult res;
    int start_epoch = 0;
    namespace fs = std::filesystem;
    if (!resume_from.empty()) {
        const fs::path dir(resume_from);
        nn::load_checkpoint(net.params(), (dir / "last.rsnet").string());
        load_adam(adam, net.params(), (dir / "last.adam").string());
        std::ifstream in(dir / "last.json");
        if (!in) throw DataError("resume: missing " + (dir / "last.json").string());
        const auto j = nlohmann::json::parse(in);
        adam.step = j.at("adam_step");
        sched.lr = j.at("lr");
        sched.best_train = j.at("best_train");
        sched.best_val = j.at("best_val");
        sched.train_ref_epoch = j.at("train_ref_epoch");
        sched.val_ref_epoch = j.at("val_ref_epoch");
        sched.epoch = j.at("epoch");
        res.iterations = j.at("iterations");
        res.best_val = j.at("best_val");
        res.best_epoch = j.at("best_epoch");
        start_epoch = sched.epoch + 1;
    }

    // Fixed validation patches, no augmentation.
    std::vector<Patch> val_patches;
    {
        std::mt19937_64 vr(mix_seed(tc.seed, 0xfeedULL));
        for (const auto& c : val)
            for (int k = 0; k < tc.val_patches_per_case; ++k)
                val_patches.push_back(sample_patch(c, tc.patch_size, tc.fg_oversample, s.pad_value, vr));
    }

    std::ofstream csv;
    if (!s.out_dir.empty()) {
        fs::create_directories(s.out_dir);
        csv.open(fs::path(s.out_dir) / "train_log.csv", start_epoch ? std::ios::app : std::ios::trunc);
        if (!csv) throw DataError("cannot write training log in " + s.out_dir);
        if (!start_epoch) {
            csv << "epoch,lr,train_loss,val_loss,action";
            for (auto c : s.classes) csv << ",dsc_" << int(c);
            csv << "\n";
        }
    }

    const std::int64_t C = s.net.out_classes;
    for (int epoch = start_epoch; epoch < tc.max_epochs; ++epoch) {
        EpochLog row;
        row.epoch = epoch;
        row.lr = sched.lr;
        std::vector<double> dsc_sum(C, 0.0);
        std::vector<int> dsc_n(C, 0);
        double loss_sum = 0.0;
        int batches = 0;
        for (int b = 0; b < tc.batches_per_epoch; ++b) {
            if (s.max_iterations && res.iterations >= s.max_iterations) break;
            std::vector<Patch> batch;
            for (int slot = 0; slot < tc.batch_size; ++slot) {
                const std::uint64_t key = mix_seed(mix_seed(mix_seed(tc.seed, std::uint64_t(epoch)), std::uint64_t(b)),
                                                   std::uint64_t(slot));
                std::mt19937_64 rng(key);
                const auto& c = train[std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng)];
                auto p = sample_patch(c, tc.patch_size, tc.fg_oversample, s.pad_value, rng);
                augment(p.image, p.labels, s.augment, rng(), s.pad_value);
                batch.push_back(std::move(p));
            }
            std::vector<const Volume*> imgs;
            std::vector<const LabelVolume*> labs;
            for (const auto& p : batch) {
                imgs.push_back(&p.image);
                labs.push_back(&p.labels);
            }
            const auto x = to_input(imgs);
            const auto g = one_hot(labs, s.classes);
            const auto step = run_batch(net, x, g, s, true);
            if (!step.dsc.empty()) {
                adam_step(net.params(), adam, sched.lr);
                for (std::int64_t c = 0; c < C; ++c)
                    if (step.present[c]) {
                        dsc_sum[c] += step.dsc[c];
                        ++dsc_n[c];
                    }
            }
            loss_sum += step.loss;
            ++batches;
            ++res.iterations;
        }
        if (batches == 0) break;
        row.train_loss = loss_sum / batches;
        for (std::int64_t c = 0; c < C; ++c)
            row.train_dsc.push_back(dsc_n[c] ? dsc_sum[c] / dsc_n[c] : std::numeric_limits<double>::quiet_NaN());

        if (val_patches.empty()) {
            row.val_loss = row.train_loss;
        } else {
            double vs = 0.0;
            for (const auto& p : val_patches) {
                const auto x = to_input({&p.image});
                const auto g = one_hot({&p.labels}, s.classes);
                vs += run_batch(net, x, g, s, false).loss;
            }
            row.val_loss = vs / double(val_patches.size());
        }
        const bool improved = row.val_loss < res.best_val;
        if (improved) {
            res.best_val = row.val_loss;
            res.best_epoch = epoch;
        }
        const bool capped = s.max_iterations && res.iterations >= s.max_iterations;
        row.action = schedule_tick(row.train_loss, row.val_loss, tc, sched);
        res.log.push_back(row);

        if (!s.out_dir.empty()) {
            const fs::path dir(s.out_dir);
            csv << row.epoch << "," << row.lr << "," << row.train_loss << "," << row.val_loss << ","
                << to_string(row.action);
            for (double d : row.train_dsc) csv << "," << d;
            csv << "\n" << std::flush;
            nlohmann::json side{{"epoch", epoch},
                                {"lr", sched.lr},
                                {"seed", tc.seed},
                                {"rng", "counter-based: mix_seed(seed, epoch, batch, slot)"},
                                {"adam_step", adam.step},
                                {"best_train", sched.best_train},
                                {"best_val", sched.best_val},
                                {"train_ref_epoch", sched.train_ref_epoch},
                                {"val_ref_epoch", sched.val_ref_epoch},
                                {"iterations", res.iterations},
                                {"best_epoch", res.best_epoch},
                                {"train_loss", row.train_loss},
                                {"val_loss", row.val_loss}};
            nn::save_checkpoint(net.params(), (dir / "last.rsnet").string());
            save_adam(adam, net.params(), (dir / "last.adam").string());
            write_sidecar((dir / "last.json").string(), side);
            if (improved) {
                nn::save_checkpoint(net.params(), (dir / "best.rsnet").string());
                write_sidecar((dir / "best.json").string(), side);
            }
        }
        if (row.action == ScheduleAction::stop || capped) break;
    }
    return res;
}

}  // namespace renalseg
