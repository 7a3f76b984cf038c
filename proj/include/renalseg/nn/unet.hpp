#pragma once

// 3D U-Net family: vanilla, conv_down, residual and full_residual designs
// share one topology and differ only in block and downsampler types.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "renalseg/nn/ops.hpp"

namespace renalseg::nn {

enum class BlockDesign { vanilla, conv_down, residual, full_residual };
enum class FinalActivation { softmax, sigmoid };

inline const char* to_string(BlockDesign d) {
    switch (d) {
        case BlockDesign::vanilla: return "vanilla";
        case BlockDesign::conv_down: return "conv_down";
        case BlockDesign::residual: return "residual";
        case BlockDesign::full_residual: return "full_residual";
    }
    return "?";
}

inline BlockDesign block_design_from(const std::string& s) {
    if (s == "vanilla") return BlockDesign::vanilla;
    if (s == "conv_down") return BlockDesign::conv_down;
    if (s == "residual") return BlockDesign::residual;
    if (s == "full_residual") return BlockDesign::full_residual;
    throw UsageError("unknown block design: " + s);
}

struct NetConfig {
    int levels = 5;
    std::vector<int> channels{30, 60, 120, 240, 480};
    std::vector<int> encoder_stacks{1, 2, 3, 4, 5};
    BlockDesign block_design = BlockDesign::full_residual;
    int in_channels = 1;
    int out_classes = 2;
    FinalActivation final_activation = FinalActivation::softmax;
    double lrelu_slope = 0.01;

    void validate() const {
        if (levels < 2) throw UsageError("net config: levels must be >= 2");
        if (int(channels.size()) != levels || int(encoder_stacks.size()) != levels)
            throw UsageError("net config: channels and encoder_stacks need one entry per level");
        for (int i = 0; i < levels; ++i)
            if (channels[i] < 1 || encoder_stacks[i] < 1) throw UsageError("net config: channels/stacks must be positive");
        if (out_classes < 1 || in_channels < 1) throw UsageError("net config: channel counts must be positive");
        if (final_activation == FinalActivation::softmax && out_classes < 2)
            throw UsageError("net config: softmax needs at least two output classes");
    }

    /// Smallest spatial extent that survives every downsampling step.
    std::int64_t divisor() const { return std::int64_t{1} << (levels - 1); }

    bool operator==(const NetConfig&) const = default;
};

/// Ordered name -> parameter registry shared by optimizer and checkpoints.
template <class T>
class ParamStore {
public:
    Var<T>& add(const std::string& name, Shape shape) {
        if (index_.count(name)) throw UsageError("duplicate parameter " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, Var<T>(Tensor<T>(std::move(shape)), true)});
        return entries_.back().second;
    }
    std::vector<std::pair<std::string, Var<T>>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
    Var<T>& at(const std::string& name) { return entries_.at(index_.at(name)).second; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }
    void zero_grad() {
        for (auto& [_, v] : entries_) v.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Var<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
struct ConvLayer {
    Var<T> kernel;
    Var<T> bias;  // invalid when the layer has no bias
    std::int64_t stride = 1;
    std::int64_t pad = 1;

    Var<T> operator()(const Var<T>& x) const {
        return conv3d(x, kernel, bias.valid() ? &bias : nullptr, stride, pad);
    }
};

template <class T>
struct NormLayer {
    Var<T> scale, shift;
    Var<T> operator()(const Var<T>& x) const { return instance_norm(x, scale, shift); }
};

/// conv-IN-lrelu, conv-IN, + shortcut, lrelu. The shortcut is the identity
/// when shapes match and a strided 1x1x1 conv otherwise.
template <class T>
struct ResidualBlock {
    ConvLayer<T> conv1, conv2;
    NormLayer<T> norm1, norm2;
    ConvLayer<T> projection;  // kernel invalid when identity
    T slope{};

    Var<T> operator()(const Var<T>& x) const {
        auto h = leaky_relu(norm1(conv1(x)), slope);
        h = norm2(conv2(h));
        const auto shortcut = projection.kernel.valid() ? projection(x) : x;
        return leaky_relu(add(h, shortcut), slope);
    }
};

/// Two padded convolutions, each followed by IN and lrelu.
template <class T>
struct PlainBlock {
    ConvLayer<T> conv1, conv2;
    NormLayer<T> norm1, norm2;
    T slope{};

    Var<T> operator()(const Var<T>& x) const {
        return leaky_relu(norm2(conv2(leaky_relu(norm1(conv1(x)), slope))), slope);
    }
};

/// Single stride-2 conv-IN-lrelu downsampler.
template <class T>
struct StridedConv {
    ConvLayer<T> conv;
    NormLayer<T> norm;
    T slope{};
    Var<T> operator()(const Var<T>& x) const { return leaky_relu(norm(conv(x)), slope); }
};

struct MaxPool {
    template <class T>
    Var<T> operator()(const Var<T>& x) const {
        return max_pool3d(x);
    }
};

template <class T>
using Block = std::variant<PlainBlock<T>, ResidualBlock<T>, StridedConv<T>, MaxPool>;

template <class T>
Var<T> apply_block(const Block<T>& b, const Var<T>& x) {
    return std::visit([&](const auto& blk) { return blk(x); }, b);
}

template <class T>
class UNet {
public:
    UNet(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const T slope = T(cfg_.lrelu_slope);
        const bool residual_blocks = cfg_.block_design == BlockDesign::residual ||
                                     cfg_.block_design == BlockDesign::full_residual;
        auto make_block = [&](const std::string& name, int cin, int cout, std::int64_t stride) -> Block<T> {
            if (residual_blocks || stride == 2) {
                ResidualBlock<T> b;
                b.slope = slope;
                b.conv1 = conv(name + ".conv1", cin, cout, 3, stride, false);
                b.norm1 = norm(name + ".norm1", cout);
                b.conv2 = conv(name + ".conv2", cout, cout, 3, 1, false);
                b.norm2 = norm(name + ".norm2", cout);
                if (cin != cout || stride != 1) b.projection = conv(name + ".shortcut", cin, cout, 1, stride, false);
                return b;
            }
            PlainBlock<T> b;
            b.slope = slope;
            b.conv1 = conv(name + ".conv1", cin, cout, 3, 1, false);
            b.norm1 = norm(name + ".norm1", cout);
            b.conv2 = conv(name + ".conv2", cout, cout, 3, 1, false);
            b.norm2 = norm(name + ".norm2", cout);
            return b;
        };

        int cin = cfg_.in_channels;
        for (int level = 0; level < cfg_.levels; ++level) {
            const std::string lname = "enc" + std::to_string(level);
            std::vector<Block<T>> stage;
            const int cout = cfg_.channels[level];
            if (level > 0) {
                switch (cfg_.block_design) {
                    case BlockDesign::vanilla:
                    case BlockDesign::residual: stage.push_back(MaxPool{}); break;
                    case BlockDesign::conv_down: {
                        StridedConv<T> d;
                        d.slope = slope;
                        d.conv = conv(lname + ".down.conv", cin, cout, 3, 2, false);
                        d.norm = norm(lname + ".down.norm", cout);
                        stage.push_back(d);
                        cin = cout;
                        break;
                    }
                    case BlockDesign::full_residual:
                        stage.push_back(make_block(lname + ".down", cin, cout, 2));
                        cin = cout;
                        break;
                }
            }
            for (int s = 0; s < cfg_.encoder_stacks[level]; ++s) {
                stage.push_back(make_block(lname + ".block" + std::to_string(s), cin, cout, 1));
                cin = cout;
            }
            encoder_.push_back(std::move(stage));
        }
        for (int level = cfg_.levels - 2; level >= 0; --level) {
            const std::string lname = "dec" + std::to_string(level);
            const int c = cfg_.channels[level];
            Decoder d;
            d.up = params_.add(lname + ".up", {cfg_.channels[level + 1], c, 2, 2, 2});
            init_he(d.up, cfg_.channels[level + 1]);
            d.block = make_block(lname + ".block0", 2 * c, c, 1);
            decoder_.push_back(std::move(d));
        }
        head_ = conv("head", cfg_.channels[0], cfg_.out_classes, 3, 1, true);
        // Initialize in registration order so the draw sequence is fixed.
        std::mt19937_64 rng(seed);
        for (auto& [name, v] : params_.entries()) {
            auto it = fan_in_.find(name);
            if (it == fan_in_.end()) continue;
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(it->second)));
            for (auto& w : v.mutable_value().data) w = T(dist(rng));
        }
    }

    const NetConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Pre-activation class scores.
    Var<T> logits(const Var<T>& x) const {
        detail::require_rank5(x.shape(), "unet");
        if (x.shape()[1] != cfg_.in_channels) throw UsageError("unet: input channel count mismatch");
        for (int a = 2; a < 5; ++a)
            if (x.shape()[a] % cfg_.divisor() != 0)
                throw UsageError("unet: patch extent " + std::to_string(x.shape()[a]) + " not divisible by " +
                                 std::to_string(cfg_.divisor()));
        std::vector<Var<T>> skips;
        Var<T> h = x;
        for (const auto& stage : encoder_) {
            for (const auto& b : stage) h = apply_block(b, h);
            skips.push_back(h);
        }
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            const auto& d = decoder_[i];
            const auto up = transposed_conv3d(h, d.up);
            h = apply_block(d.block, concat_channels(skips[skips.size() - 2 - i], up));
        }
        return head_(h);
    }

    Var<T> activate(const Var<T>& logits) const {
        return cfg_.final_activation == FinalActivation::softmax ? softmax_channels(logits) : sigmoid(logits);
    }

    /// Class probabilities, shape (N, out_classes, D, H, W).
    Var<T> forward(const Var<T>& x) const { return activate(logits(x)); }
    Var<T> forward(const Tensor<T>& x) const { return forward(Var<T>(x)); }

private:
    struct Decoder {
        Var<T> up;
        Block<T> block;
    };

    ConvLayer<T> conv(const std::string& name, int cin, int cout, int k, std::int64_t stride, bool bias) {
        ConvLayer<T> c;
        c.kernel = params_.add(name + ".weight", {cout, cin, k, k, k});
        init_he(c.kernel, std::int64_t(cin) * k * k * k);
        if (bias) c.bias = params_.add(name + ".bias", {cout});
        c.stride = stride;
        c.pad = k / 2;
        return c;
    }

    NormLayer<T> norm(const std::string& name, int c) {
        NormLayer<T> n{params_.add(name + ".scale", {c}), params_.add(name + ".shift", {c})};
        std::fill(n.scale.mutable_value().data.begin(), n.scale.mutable_value().data.end(), T(1));
        return n;
    }

    void init_he(Var<T>& v, std::int64_t fan_in) {
        for (auto& [name, p] : params_.entries())
            if (p.node() == v.node()) fan_in_[name] = fan_in;
    }

    NetConfig cfg_;
    ParamStore<T> params_;
    std::map<std::string, std::int64_t> fan_in_;
    std::vector<std::vector<Block<T>>> encoder_;
    std::vector<Decoder> decoder_;
    ConvLayer<T> head_;
};

}  // namespace renalseg::nn
