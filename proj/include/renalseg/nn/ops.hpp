#pragma once

// Differentiable 3D ops on NCDHW tensors. Convolutions lower to GEMM through
// an im2col buffer that is rebuilt in the backward pass instead of stored.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>

#include "renalseg/nn/tensor.hpp"

namespace renalseg::nn {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<MatR<T>>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;

struct ConvGeom {
    std::int64_t cin, d, h, w;     // input
    std::int64_t k, stride, pad;
    std::int64_t od, oh, ow;       // output
    std::int64_t rows() const { return cin * k * k * k; }
    std::int64_t cols() const { return od * oh * ow; }
};

inline ConvGeom conv_geom(const Shape& x, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    ConvGeom g{x[1], x[2], x[3], x[4], k, stride, pad, 0, 0, 0};
    g.od = (g.d + 2 * pad - k) / stride + 1;
    g.oh = (g.h + 2 * pad - k) / stride + 1;
    g.ow = (g.w + 2 * pad - k) / stride + 1;
    if (g.od < 1 || g.oh < 1 || g.ow < 1) throw UsageError("conv3d: input too small for kernel");
    return g;
}

// Valid output range [lo, hi) along one axis for kernel offset `kk`.
inline void valid_range(std::int64_t kk, std::int64_t stride, std::int64_t pad, std::int64_t in, std::int64_t out,
                        std::int64_t& lo, std::int64_t& hi) {
    // i = o*stride + kk - pad must lie in [0, in).
    const std::int64_t off = kk - pad;
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    hi = in - off <= 0 ? 0 : std::min(out, (in - off + stride - 1) / stride);
    if (hi < lo) hi = lo;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::int64_t P = g.cols();
    const std::int64_t k3 = g.k * g.k * g.k;
    for (std::int64_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.d * g.h * g.w;
        for (std::int64_t kk = 0; kk < k3; ++kk) {
            const std::int64_t kz = kk / (g.k * g.k), ky = (kk / g.k) % g.k, kx = kk % g.k;
            T* row = col + (c * k3 + kk) * P;
            std::int64_t zlo, zhi, ylo, yhi, xlo, xhi;
            valid_range(kz, g.stride, g.pad, g.d, g.od, zlo, zhi);
            valid_range(ky, g.stride, g.pad, g.h, g.oh, ylo, yhi);
            valid_range(kx, g.stride, g.pad, g.w, g.ow, xlo, xhi);
            std::fill(row, row + P, T{});
            for (std::int64_t oz = zlo; oz < zhi; ++oz) {
                const std::int64_t iz = oz * g.stride + kz - g.pad;
                for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                    const std::int64_t iy = oy * g.stride + ky - g.pad;
                    const T* src = xc + (iz * g.h + iy) * g.w + kx - g.pad;
                    T* dst = row + (oz * g.oh + oy) * g.ow;
                    if (g.stride == 1) {
                        std::copy(src + xlo, src + xhi, dst + xlo);
                    } else {
                        for (std::int64_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
    const std::int64_t P = g.cols();
    const std::int64_t k3 = g.k * g.k * g.k;
    for (std::int64_t c = 0; c < g.cin; ++c) {
        T* xc = dx + c * g.d * g.h * g.w;
        for (std::int64_t kk = 0; kk < k3; ++kk) {
            const std::int64_t kz = kk / (g.k * g.k), ky = (kk / g.k) % g.k, kx = kk % g.k;
            const T* row = col + (c * k3 + kk) * P;
            std::int64_t zlo, zhi, ylo, yhi, xlo, xhi;
            valid_range(kz, g.stride, g.pad, g.d, g.od, zlo, zhi);
            valid_range(ky, g.stride, g.pad, g.h, g.oh, ylo, yhi);
            valid_range(kx, g.stride, g.pad, g.w, g.ow, xlo, xhi);
            for (std::int64_t oz = zlo; oz < zhi; ++oz) {
                const std::int64_t iz = oz * g.stride + kz - g.pad;
                for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                    const std::int64_t iy = oy * g.stride + ky - g.pad;
                    T* dst = xc + (iz * g.h + iy) * g.w + kx - g.pad;
                    const T* src = row + (oz * g.oh + oy) * g.ow;
                    for (std::int64_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride] += src[ox];
                }
            }
        }
    }
}

// Reused im2col buffer; conv forward and backward never nest.
template <class T>
T* scratch(std::size_t n) {
    thread_local std::vector<T> buf;
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

inline void require_rank5(const Shape& s, const char* op) {
    if (s.size() != 5) throw UsageError(std::string(op) + ": expected an NCDHW tensor, got " + shape_str(s));
}

template <class T>
std::vector<T>* grad_of(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace detail

/// Cross-correlation with a (Cout, Cin, k, k, k) kernel and optional (Cout) bias.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const std::type_identity_t<Var<T>>* bias, std::int64_t stride, std::int64_t pad) {
    using namespace detail;
    require_rank5(x.shape(), "conv3d");
    const Shape& ks = kernel.shape();
    if (ks.size() != 5 || ks[1] != x.shape()[1] || ks[2] != ks[3] || ks[3] != ks[4])
        throw UsageError("conv3d: kernel " + shape_str(ks) + " incompatible with input " + shape_str(x.shape()));
    if (stride < 1) throw UsageError("conv3d: stride must be positive");
    const ConvGeom g = conv_geom(x.shape(), ks[2], stride, pad);
    const std::int64_t N = x.shape()[0], Cout = ks[0], K = g.rows(), P = g.cols();
    Tensor<T> out({N, Cout, g.od, g.oh, g.ow});
    T* col = scratch<T>(static_cast<std::size_t>(K * P));
    CMap<T> W(kernel.value().data.data(), Cout, K);
    const std::int64_t in_stride = g.cin * g.d * g.h * g.w;
    for (std::int64_t n = 0; n < N; ++n) {
        im2col(x.value().data.data() + n * in_stride, g, col);
        Map<T> Y(out.data.data() + n * Cout * P, Cout, P);
        Y.noalias() = W * CMap<T>(col, K, P);
        if (bias)
            for (std::int64_t c = 0; c < Cout; ++c) Y.row(c).array() += bias->value().data[c];
    }
    std::vector<Var<T>> parents{x, kernel};
    if (bias) parents.push_back(*bias);
    const bool has_bias = bias != nullptr;
    return Var<T>::make(std::move(out), parents, [g, N, Cout, K, P, in_stride, has_bias](Node<T>& self) {
        const auto& xv = self.parents[0]->value.data;
        const auto& wv = self.parents[1]->value.data;
        auto* dx = grad_of(self, 0);
        auto* dw = grad_of(self, 1);
        auto* db = has_bias ? grad_of(self, 2) : nullptr;
        T* col = scratch<T>(static_cast<std::size_t>(K * P));
        for (std::int64_t n = 0; n < N; ++n) {
            CMap<T> dY(self.grad.data() + n * Cout * P, Cout, P);
            if (dw) {
                im2col(xv.data() + n * in_stride, g, col);
                Map<T>(dw->data(), Cout, K).noalias() += dY * CMap<T>(col, K, P).transpose();
            }
            if (db)
                for (std::int64_t c = 0; c < Cout; ++c) {
                    const T* r = self.grad.data() + (n * Cout + c) * P;
                    T acc{};
                    for (std::int64_t i = 0; i < P; ++i) acc += r[i];
                    (*db)[c] += acc;
                }
            if (dx) {
                Map<T>(col, K, P).noalias() = CMap<T>(wv.data(), Cout, K).transpose() * dY;
                col2im_add(col, g, dx->data() + n * in_stride);
            }
        }
    });
}

/// 2x2x2 up-convolution with stride 2; kernel shape (Cin, Cout, 2, 2, 2).
template <class T>
Var<T> transposed_conv3d(const Var<T>& x, const Var<T>& kernel) {
    using namespace detail;
    require_rank5(x.shape(), "transposed_conv3d");
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    if (ks.size() != 5 || ks[0] != xs[1] || ks[2] != 2 || ks[3] != 2 || ks[4] != 2)
        throw UsageError("transposed_conv3d: kernel " + shape_str(ks) + " incompatible with input " + shape_str(xs));
    const std::int64_t N = xs[0], Cin = xs[1], D = xs[2], H = xs[3], Wd = xs[4], Cout = ks[1], P = D * H * Wd;
    Tensor<T> out({N, Cout, 2 * D, 2 * H, 2 * Wd});
    MatR<T> Y8(Cout * 8, P);
    // Y8[(co, a, b, c), p] = sum_ci W[ci, (co, a, b, c)] * X[ci, p]
    CMap<T> Wm(kernel.value().data.data(), Cin, Cout * 8);
    auto scatter = [=](const MatR<T>& y8, T* dst) {
        for (std::int64_t co = 0; co < Cout; ++co)
            for (int a = 0; a < 8; ++a) {
                const int dz = a >> 2, dy = (a >> 1) & 1, dxo = a & 1;
                const T* row = y8.data() + (co * 8 + a) * P;
                T* oc = dst + co * 8 * P;
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t y = 0; y < H; ++y) {
                        const T* src = row + (z * H + y) * Wd;
                        T* o = oc + ((2 * z + dz) * 2 * H + (2 * y + dy)) * 2 * Wd + dxo;
                        for (std::int64_t xx = 0; xx < Wd; ++xx) o[2 * xx] = src[xx];
                    }
            }
    };
    for (std::int64_t n = 0; n < N; ++n) {
        Y8.noalias() = Wm.transpose() * CMap<T>(x.value().data.data() + n * Cin * P, Cin, P);
        scatter(Y8, out.data.data() + n * Cout * 8 * P);
    }
    return Var<T>::make(std::move(out), {x, kernel}, [=](Node<T>& self) {
        auto* dx = grad_of(self, 0);
        auto* dw = grad_of(self, 1);
        const auto& xv = self.parents[0]->value.data;
        const auto& wv = self.parents[1]->value.data;
        MatR<T> G8(Cout * 8, P);
        for (std::int64_t n = 0; n < N; ++n) {
            const T* go = self.grad.data() + n * Cout * 8 * P;
            for (std::int64_t co = 0; co < Cout; ++co)
                for (int a = 0; a < 8; ++a) {
                    const int dz = a >> 2, dy = (a >> 1) & 1, dxo = a & 1;
                    T* row = G8.data() + (co * 8 + a) * P;
                    const T* oc = go + co * 8 * P;
                    for (std::int64_t z = 0; z < D; ++z)
                        for (std::int64_t y = 0; y < H; ++y) {
                            T* dst = row + (z * H + y) * Wd;
                            const T* o = oc + ((2 * z + dz) * 2 * H + (2 * y + dy)) * 2 * Wd + dxo;
                            for (std::int64_t xx = 0; xx < Wd; ++xx) dst[xx] = o[2 * xx];
                        }
                }
            CMap<T> X(xv.data() + n * Cin * P, Cin, P);
            if (dw) Map<T>(dw->data(), Cin, Cout * 8).noalias() += X * G8.transpose();
            if (dx) Map<T>(dx->data() + n * Cin * P, Cin, P).noalias() += CMap<T>(wv.data(), Cin, Cout * 8) * G8;
        }
    });
}

/// Per-(sample, channel) normalization over spatial voxels, then scale/shift.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, T eps = T(1e-5)) {
    detail::require_rank5(x.shape(), "instance_norm");
    const std::int64_t N = x.shape()[0], C = x.shape()[1], M = x.value().spatial();
    if (std::int64_t(scale.value().size()) != C || std::int64_t(shift.value().size()) != C)
        throw UsageError("instance_norm: scale/shift length must equal channel count");
    Tensor<T> out(x.shape());
    std::vector<T> inv_std(static_cast<std::size_t>(N * C));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xi = x.value().channel(n, c);
            T* yo = out.channel(n, c);
            double mean = 0.0;
            for (std::int64_t i = 0; i < M; ++i) mean += xi[i];
            mean /= double(M);
            double var = 0.0;
            for (std::int64_t i = 0; i < M; ++i) var += (xi[i] - mean) * (xi[i] - mean);
            var /= double(M);
            const T inv = T(1.0 / std::sqrt(var + double(eps)));
            inv_std[n * C + c] = inv;
            const T s = scale.value().data[c], b = shift.value().data[c], m = T(mean);
            for (std::int64_t i = 0; i < M; ++i) yo[i] = (xi[i] - m) * inv * s + b;
        }
    return Var<T>::make(std::move(out), {x, scale, shift}, [N, C, M, inv_std](Node<T>& self) {
        auto* dx = detail::grad_of(self, 0);
        auto* ds = detail::grad_of(self, 1);
        auto* db = detail::grad_of(self, 2);
        const auto& xt = self.parents[0]->value;
        const auto& sv = self.parents[1]->value.data;
        std::vector<T> xhat(static_cast<std::size_t>(M));
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xi = xt.channel(n, c);
                const T* gy = self.grad.data() + (n * C + c) * M;
                const T inv = inv_std[n * C + c];
                double mean = 0.0;
                for (std::int64_t i = 0; i < M; ++i) mean += xi[i];
                mean /= double(M);
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t i = 0; i < M; ++i) {
                    xhat[i] = (xi[i] - T(mean)) * inv;
                    sum_g += gy[i];
                    sum_gx += double(gy[i]) * xhat[i];
                }
                if (ds) (*ds)[c] += T(sum_gx);
                if (db) (*db)[c] += T(sum_g);
                if (dx) {
                    const T s = sv[c];
                    T* gx = dx->data() + (n * C + c) * M;
                    const T mg = T(sum_g / double(M)), mgx = T(sum_gx / double(M));
                    for (std::int64_t i = 0; i < M; ++i) gx[i] += s * inv * (gy[i] - mg - xhat[i] * mgx);
                }
            }
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
    return Var<T>::make(std::move(out), {x}, [slope](Node<T>& self) {
        auto* dx = detail::grad_of(self, 0);
        if (!dx) return;
        const auto& xv = self.parents[0]->value.data;
        for (std::size_t i = 0; i < xv.size(); ++i) (*dx)[i] += xv[i] > T(0) ? self.grad[i] : slope * self.grad[i];
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) throw UsageError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (auto* d = detail::grad_of(self, p))
                for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
    });
}

/// 2x2x2 max pooling, stride 2 (odd trailing voxels dropped). Ties go to the
/// first voxel in z, y, x scan order.
template <class T>
Var<T> max_pool3d(const Var<T>& x) {
    detail::require_rank5(x.shape(), "max_pool3d");
    const Shape& s = x.shape();
    const std::int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const std::int64_t od = D / 2, oh = H / 2, ow = W / 2;
    if (od < 1 || oh < 1 || ow < 1) throw UsageError("max_pool3d: input smaller than window");
    Tensor<T> out({N, C, od, oh, ow});
    std::vector<std::int64_t> arg(out.size());
    std::size_t o = 0;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* xc = x.value().data.data() + nc * D * H * W;
        for (std::int64_t z = 0; z < od; ++z)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t bi = -1;
                    for (int a = 0; a < 8; ++a) {
                        const std::int64_t i = ((2 * z + (a >> 2)) * H + 2 * y + ((a >> 1) & 1)) * W + 2 * xx + (a & 1);
                        if (bi < 0 || xc[i] > best) best = xc[i], bi = i;
                    }
                    out.data[o] = best;
                    arg[o] = nc * D * H * W + bi;
                }
    }
    return Var<T>::make(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
        auto* dx = detail::grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < arg.size(); ++i) (*dx)[arg[i]] += self.grad[i];
    });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    detail::require_rank5(a.shape(), "concat_channels");
    detail::require_rank5(b.shape(), "concat_channels");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
        throw UsageError("concat_channels: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    const std::int64_t N = sa[0], Ca = sa[1], Cb = sb[1], M = a.value().spatial();
    Tensor<T> out({N, Ca + Cb, sa[2], sa[3], sa[4]});
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy_n(a.value().channel(n, 0), Ca * M, out.channel(n, 0));
        std::copy_n(b.value().channel(n, 0), Cb * M, out.channel(n, Ca));
    }
    return Var<T>::make(std::move(out), {a, b}, [N, Ca, Cb, M](Node<T>& self) {
        auto* da = detail::grad_of(self, 0);
        auto* db = detail::grad_of(self, 1);
        for (std::int64_t n = 0; n < N; ++n) {
            const T* g = self.grad.data() + n * (Ca + Cb) * M;
            if (da)
                for (std::int64_t i = 0; i < Ca * M; ++i) (*da)[n * Ca * M + i] += g[i];
            if (db)
                for (std::int64_t i = 0; i < Cb * M; ++i) (*db)[n * Cb * M + i] += g[Ca * M + i];
        }
    });
}

/// Softmax across the channel axis, per voxel.
template <class T>
Var<T> softmax_channels(const Var<T>& x) {
    detail::require_rank5(x.shape(), "softmax_channels");
    const std::int64_t N = x.shape()[0], C = x.shape()[1], M = x.value().spatial();
    Tensor<T> out(x.shape());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < M; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, x.value().channel(n, c)[i]);
            T sum = 0;
            for (std::int64_t c = 0; c < C; ++c) sum += (out.channel(n, c)[i] = std::exp(x.value().channel(n, c)[i] - mx));
            for (std::int64_t c = 0; c < C; ++c) out.channel(n, c)[i] /= sum;
        }
    return Var<T>::make(std::move(out), {x}, [N, C, M](Node<T>& self) {
        auto* dx = detail::grad_of(self, 0);
        if (!dx) return;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < M; ++i) {
                T dot = 0;
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::size_t k = (n * C + c) * M + i;
                    dot += self.grad[k] * self.value.data[k];
                }
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::size_t k = (n * C + c) * M + i;
                    (*dx)[k] += self.value.data[k] * (self.grad[k] - dot);
                }
            }
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = T(1) / (T(1) + std::exp(-x.value().data[i]));
    return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
        auto* dx = detail::grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < dx->size(); ++i) {
            const T p = self.value.data[i];
            (*dx)[i] += self.grad[i] * p * (T(1) - p);
        }
    });
}

}  // namespace renalseg::nn
