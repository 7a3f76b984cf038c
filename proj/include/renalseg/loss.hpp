#pragma once

// Weighted hybrid segmentation loss: Tversky-generalized soft dice plus a
// focal (or plain cross-entropy) term, with analytic gradients.
//
//   DSC_c  = (sum p g + eps) / (sum p g + alpha sum (1-p) g + beta sum p (1-g) + eps)
//   FL_c   = -(1/N) sum (1-p)^gamma g log p
//   L      = sum_c w_c ((1 - DSC_c) + FL_c)

#include <cmath>
#include <string>
#include <vector>

#include "renalseg/nn/tensor.hpp"
#include "renalseg/stats.hpp"

namespace renalseg {

enum class LossStrategy { dice_only, dice_ce, dice_focal };

inline const char* to_string(LossStrategy s) {
    switch (s) {
        case LossStrategy::dice_only: return "dice_only";
        case LossStrategy::dice_ce: return "dice_ce";
        case LossStrategy::dice_focal: return "dice_focal";
    }
    return "?";
}

inline LossStrategy loss_strategy_from(const std::string& s) {
    if (s == "dice_only") return LossStrategy::dice_only;
    if (s == "dice_ce") return LossStrategy::dice_ce;
    if (s == "dice_focal") return LossStrategy::dice_focal;
    throw UsageError("unknown loss strategy: " + s);
}

struct LossConfig {
    double alpha = 0.5;  // false-negative weight
    double beta = 0.5;   // false-positive weight
    double gamma = 2.0;
    double epsilon = 1e-7;
    LossStrategy strategy = LossStrategy::dice_focal;
    bool weighted = true;

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0))
            throw UsageError("loss config: alpha and beta must lie in (0, 1)");
        if (std::abs(alpha + beta - 1.0) > 1e-9) throw UsageError("loss config: alpha + beta must equal 1");
        if (!(gamma >= 0.0)) throw UsageError("loss config: gamma must be non-negative");
        if (!(epsilon > 0.0)) throw UsageError("loss config: epsilon must be positive");
    }

    /// Focusing exponent actually used by the second loss term.
    double focal_gamma() const { return strategy == LossStrategy::dice_ce ? 0.0 : gamma; }
    bool has_focal() const { return strategy != LossStrategy::dice_only; }
};

struct LossValue {
    double total = 0.0;
    double dice = 0.0;   // weighted dice part
    double focal = 0.0;  // weighted focal part
    std::vector<double> per_class_dice;
    std::vector<double> per_class_focal;
};

namespace loss_detail {

template <class T>
void check_inputs(const nn::Tensor<T>& p, const nn::Tensor<T>& g, std::size_t weights) {
    if (p.shape != g.shape) throw UsageError("loss: prediction/ground-truth shape mismatch");
    if (p.shape.size() != 5) throw UsageError("loss: expected NCDHW tensors");
    if (weights != std::size_t(p.shape[1])) throw UsageError("loss: weight vector length must equal class count");
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p.data[i] >= T(0) && p.data[i] <= T(1))) throw UsageError("loss: probability outside [0, 1]");
        if (g.data[i] != T(0) && g.data[i] != T(1)) throw UsageError("loss: ground truth must be binary");
    }
    const std::int64_t N = p.shape[0], C = p.shape[1], M = p.spatial();
    if (C > 1)
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < M; ++i) {
                T s = 0;
                for (std::int64_t c = 0; c < C; ++c) s += g.channel(n, c)[i];
                if (s != T(1)) throw UsageError("loss: ground truth is not one-hot");
            }
}

struct ClassSums {
    double tp = 0.0, fn = 0.0, fp = 0.0;
};

template <class T>
ClassSums class_sums(const nn::Tensor<T>& p, const nn::Tensor<T>& g, std::int64_t c) {
    ClassSums s;
    const std::int64_t N = p.shape[0], M = p.spatial();
    for (std::int64_t n = 0; n < N; ++n) {
        const T* pc = p.channel(n, c);
        const T* gc = g.channel(n, c);
        for (std::int64_t i = 0; i < M; ++i) {
            const double pv = pc[i], gv = gc[i];
            s.tp += pv * gv;
            s.fn += (1.0 - pv) * gv;
            s.fp += pv * (1.0 - gv);
        }
    }
    return s;
}

inline double tversky(const ClassSums& s, double alpha, double beta, double eps) {
    return (s.tp + eps) / (s.tp + alpha * s.fn + beta * s.fp + eps);
}

template <class T>
double focal_term(const nn::Tensor<T>& p, const nn::Tensor<T>& g, std::int64_t c, double gamma, double eps) {
    const std::int64_t N = p.shape[0], M = p.spatial();
    double acc = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        const T* pc = p.channel(n, c);
        const T* gc = g.channel(n, c);
        for (std::int64_t i = 0; i < M; ++i) {
            if (gc[i] == T(0)) continue;
            const double q = std::clamp(double(pc[i]), eps, 1.0 - eps);
            acc += (gamma == 0.0 ? 1.0 : std::pow(1.0 - q, gamma)) * std::log(q);
        }
    }
    return -acc / double(N * M);
}

}  // namespace loss_detail

/// Per-class Tversky index over every voxel of the batch.
template <class T>
std::vector<double> tversky_dsc(const nn::Tensor<T>& p, const nn::Tensor<T>& g, const LossConfig& cfg) {
    cfg.validate();
    loss_detail::check_inputs(p, g, std::size_t(p.shape.size() == 5 ? p.shape[1] : 0));
    std::vector<double> out(std::size_t(p.shape[1]));
    for (std::int64_t c = 0; c < p.shape[1]; ++c)
        out[c] = loss_detail::tversky(loss_detail::class_sums(p, g, c), cfg.alpha, cfg.beta, cfg.epsilon);
    return out;
}

template <class T>
double dice_loss(const nn::Tensor<T>& p, const nn::Tensor<T>& g, const LossConfig& cfg, const WeightVector& w) {
    cfg.validate();
    loss_detail::check_inputs(p, g, w.w.size());
    double total = 0.0;
    for (std::int64_t c = 0; c < p.shape[1]; ++c) {
        if (w.w[c] == 0.0) continue;
        total += w.w[c] * (1.0 - loss_detail::tversky(loss_detail::class_sums(p, g, c), cfg.alpha, cfg.beta, cfg.epsilon));
    }
    return total;
}

/// Weighted focal term with cfg.gamma (no strategy switch applied).
template <class T>
double focal_loss(const nn::Tensor<T>& p, const nn::Tensor<T>& g, const LossConfig& cfg, const WeightVector& w) {
    cfg.validate();
    loss_detail::check_inputs(p, g, w.w.size());
    double total = 0.0;
    for (std::int64_t c = 0; c < p.shape[1]; ++c)
        if (w.w[c] != 0.0) total += w.w[c] * loss_detail::focal_term(p, g, c, cfg.gamma, cfg.epsilon);
    return total;
}

template <class T>
LossValue total_loss(const nn::Tensor<T>& p, const nn::Tensor<T>& g, const LossConfig& cfg, const WeightVector& w) {
    cfg.validate();
    loss_detail::check_inputs(p, g, w.w.size());
    const std::int64_t C = p.shape[1];
    LossValue out;
    out.per_class_dice.assign(C, 0.0);
    out.per_class_focal.assign(C, 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        out.per_class_dice[c] = loss_detail::tversky(loss_detail::class_sums(p, g, c), cfg.alpha, cfg.beta, cfg.epsilon);
        if (cfg.has_focal()) out.per_class_focal[c] = loss_detail::focal_term(p, g, c, cfg.focal_gamma(), cfg.epsilon);
        if (w.w[c] == 0.0) continue;
        out.dice += w.w[c] * (1.0 - out.per_class_dice[c]);
        out.focal += w.w[c] * out.per_class_focal[c];
    }
    out.total = out.dice + out.focal;
    return out;
}

/// dL_total / dp.
template <class T>
nn::Tensor<T> loss_grad_probs(const nn::Tensor<T>& p, const nn::Tensor<T>& g, const LossConfig& cfg, const WeightVector& w) {
    cfg.validate();
    loss_detail::check_inputs(p, g, w.w.size());
    const std::int64_t N = p.shape[0], C = p.shape[1], M = p.spatial();
    const double inv_count = 1.0 / double(N * M);
    const double gamma = cfg.focal_gamma(), eps = cfg.epsilon;
    nn::Tensor<T> grad(p.shape);
    for (std::int64_t c = 0; c < C; ++c) {
        const double wc = w.w[c];
        if (wc == 0.0) continue;
        const auto s = loss_detail::class_sums(p, g, c);
        const double num = s.tp + eps;
        const double den = s.tp + cfg.alpha * s.fn + cfg.beta * s.fp + eps;
        for (std::int64_t n = 0; n < N; ++n) {
            const T* pc = p.channel(n, c);
            const T* gc = g.channel(n, c);
            T* out = grad.channel(n, c);
            for (std::int64_t i = 0; i < M; ++i) {
                const double gv = gc[i];
                // d(num)/dp = g; d(den)/dp = g - alpha g + beta (1 - g)
                const double ddsc = (gv * den - num * (gv * (1.0 - cfg.alpha) + cfg.beta * (1.0 - gv))) / (den * den);
                double d = -ddsc;
                if (cfg.has_focal() && gv != 0.0) {
                    const double pv = pc[i];
                    if (pv > eps && pv < 1.0 - eps) {
                        const double lq = std::log(pv);
                        double dfl = std::pow(1.0 - pv, gamma) / pv;
                        if (gamma != 0.0) dfl -= gamma * std::pow(1.0 - pv, gamma - 1.0) * lq;
                        d += -inv_count * gv * dfl;
                    }
                }
                out[i] = T(wc * d);
            }
        }
    }
    return grad;
}

/// dL_total / dlogits, composing the probability gradient with the softmax
/// (channel axis) or element-wise sigmoid Jacobian.
template <class T>
nn::Tensor<T> loss_grad_logits(const nn::Tensor<T>& logits, const nn::Tensor<T>& g, const LossConfig& cfg,
                               const WeightVector& w, bool softmax) {
    const std::int64_t N = logits.shape.at(0), C = logits.shape.at(1), M = logits.spatial();
    nn::Tensor<T> p(logits.shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < M; ++i) {
            if (softmax) {
                T mx = logits.channel(n, 0)[i];
                for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, logits.channel(n, c)[i]);
                T sum = 0;
                for (std::int64_t c = 0; c < C; ++c) sum += (p.channel(n, c)[i] = std::exp(logits.channel(n, c)[i] - mx));
                for (std::int64_t c = 0; c < C; ++c) p.channel(n, c)[i] /= sum;
            } else {
                for (std::int64_t c = 0; c < C; ++c) p.channel(n, c)[i] = T(1) / (T(1) + std::exp(-logits.channel(n, c)[i]));
            }
        }
    const auto gp = loss_grad_probs(p, g, cfg, w);
    nn::Tensor<T> out(logits.shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < M; ++i) {
            if (softmax) {
                T dot = 0;
                for (std::int64_t c = 0; c < C; ++c) dot += gp.channel(n, c)[i] * p.channel(n, c)[i];
                for (std::int64_t c = 0; c < C; ++c)
                    out.channel(n, c)[i] = p.channel(n, c)[i] * (gp.channel(n, c)[i] - dot);
            } else {
                for (std::int64_t c = 0; c < C; ++c) {
                    const T pv = p.channel(n, c)[i];
                    out.channel(n, c)[i] = gp.channel(n, c)[i] * pv * (T(1) - pv);
                }
            }
        }
    return out;
}

/// Batch presence mask: class c is present when any voxel of g has it.
template <class T>
std::vector<bool> present_classes(const nn::Tensor<T>& g) {
    const std::int64_t N = g.shape.at(0), C = g.shape.at(1), M = g.spatial();
    std::vector<bool> present(std::size_t(C), false);
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t n = 0; n < N && !present[c]; ++n) {
            const T* gc = g.channel(n, c);
            for (std::int64_t i = 0; i < M; ++i)
                if (gc[i] > T(0)) {
                    present[c] = true;
                    break;
                }
        }
    return present;
}

}  // namespace renalseg
