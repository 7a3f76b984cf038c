#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "renalseg/nn/checkpoint.hpp"
#include "renalseg/nn/unet.hpp"
#include "support/gradcheck.hpp"

using namespace renalseg;
using namespace renalseg::nn;

namespace {

NetConfig tiny(BlockDesign d, int classes = 2, FinalActivation act = FinalActivation::softmax) {
    NetConfig c;
    c.levels = 3;
    c.channels = {2, 3, 4};
    c.encoder_stacks = {1, 1, 2};
    c.block_design = d;
    c.out_classes = classes;
    c.final_activation = act;
    return c;
}

const BlockDesign kDesigns[] = {BlockDesign::vanilla, BlockDesign::conv_down, BlockDesign::residual,
                                BlockDesign::full_residual};

}  // namespace

TEST(NetConfig, Validation) {
    NetConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.divisor(), 16);
    c.channels.pop_back();
    EXPECT_THROW(c.validate(), UsageError);
    NetConfig s;
    s.out_classes = 1;
    EXPECT_THROW(s.validate(), UsageError);
    s.final_activation = FinalActivation::sigmoid;
    EXPECT_NO_THROW(s.validate());
    EXPECT_THROW(block_design_from("dense"), UsageError);
    for (auto d : kDesigns) EXPECT_EQ(block_design_from(to_string(d)), d);
}

TEST(UNet, OutputShapeAndSimplex) {
    for (auto d : kDesigns) {
        UNet<float> net(tiny(d, 3), 7);
        Tensor<float> x({2, 1, 8, 4, 12});
        std::mt19937_64 rng(1);
        std::normal_distribution<float> nd;
        for (auto& v : x.data) v = nd(rng);
        const auto y = net.forward(x);
        EXPECT_EQ(y.shape(), (Shape{2, 3, 8, 4, 12})) << to_string(d);
        for (std::int64_t i = 0; i < 8 * 4 * 12; ++i) {
            const float s = y.value().channel(1, 0)[i] + y.value().channel(1, 1)[i] + y.value().channel(1, 2)[i];
            EXPECT_NEAR(s, 1.0f, 1e-5f);
        }
    }
}

TEST(UNet, SigmoidHeadSingleChannel) {
    UNet<float> net(tiny(BlockDesign::full_residual, 1, FinalActivation::sigmoid), 3);
    const auto y = net.forward(Tensor<float>({1, 1, 4, 4, 4}, 0.5f));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
    for (float v : y.value().data) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(UNet, RejectsIndivisiblePatch) {
    UNet<float> net(tiny(BlockDesign::vanilla), 1);
    EXPECT_THROW(net.forward(Tensor<float>({1, 1, 6, 4, 4})), UsageError);
    EXPECT_THROW(net.forward(Tensor<float>({1, 2, 4, 4, 4})), UsageError);
}

TEST(UNet, SeedDeterminism) {
    UNet<float> a(tiny(BlockDesign::full_residual), 11), b(tiny(BlockDesign::full_residual), 11),
        c(tiny(BlockDesign::full_residual), 12);
    const auto& ea = a.params().entries();
    const auto& eb = b.params().entries();
    const auto& ec = c.params().entries();
    ASSERT_EQ(ea.size(), eb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        EXPECT_EQ(ea[i].first, eb[i].first);
        EXPECT_EQ(ea[i].second.value().data, eb[i].second.value().data);
        if (ea[i].second.value().data != ec[i].second.value().data) any_diff = true;
    }
    EXPECT_TRUE(any_diff);
}

TEST(UNet, ParameterNamesAndWidths) {
    UNet<float> vanilla(tiny(BlockDesign::vanilla), 1);
    EXPECT_TRUE(vanilla.params().contains("enc0.block0.conv1.weight"));
    EXPECT_FALSE(vanilla.params().contains("enc1.down.conv.weight"));
    EXPECT_TRUE(vanilla.params().contains("dec0.up"));
    EXPECT_TRUE(vanilla.params().contains("head.bias"));
    EXPECT_EQ(vanilla.params().at("dec1.up").shape(), (Shape{4, 3, 2, 2, 2}));
    EXPECT_EQ(vanilla.params().at("dec0.block0.conv1.weight").shape(), (Shape{2, 4, 3, 3, 3}));

    UNet<float> cd(tiny(BlockDesign::conv_down), 1);
    EXPECT_TRUE(cd.params().contains("enc1.down.conv.weight"));

    UNet<float> fr(tiny(BlockDesign::full_residual), 1);
    EXPECT_TRUE(fr.params().contains("enc2.down.shortcut.weight"));
    EXPECT_TRUE(fr.params().contains("enc0.block0.shortcut.weight"));  // 1 -> 2 channels
    EXPECT_FALSE(fr.params().contains("enc2.block1.shortcut.weight"));
}

TEST(UNet, WholeNetworkGradient) {
    for (auto d : kDesigns) {
        UNet<double> net(tiny(d, 3), 5);
        std::mt19937_64 rng(21);
        auto x = Var<double>(testsupport::random_tensor({1, 1, 8, 8, 8}, rng), true);
        std::vector<Var<double>> leaves{x};
        std::uniform_real_distribution<double> u(0.1, 0.5);
        for (auto& [name, p] : net.params().entries()) {
            // Nonzero shifts keep the lrelu inputs off the kink.
            if (name.ends_with(".shift"))
                for (auto& v : p.mutable_value().data) v = u(rng);
            leaves.push_back(p);
        }
        const auto r = testsupport::grad_check([&] { return net.forward(x); }, leaves, 9, 1e-5, 6);
        EXPECT_LT(r.max_rel_error, 1e-3) << to_string(d);
    }
}

TEST(Checkpoint, RoundTripBitExact) {
    UNet<float> a(tiny(BlockDesign::full_residual, 3), 4), b(tiny(BlockDesign::full_residual, 3), 99);
    const auto path = (std::filesystem::temp_directory_path() / "renalseg_ckpt.bin").string();
    save_checkpoint(a.params(), path);
    load_checkpoint(b.params(), path);
    Tensor<float> x({1, 1, 4, 8, 4}, 0.25f);
    x.data[17] = -2.0f;
    EXPECT_EQ(a.forward(x).value().data, b.forward(x).value().data);
}

TEST(Checkpoint, ArchitectureMismatchRejected) {
    UNet<float> a(tiny(BlockDesign::full_residual), 4), b(tiny(BlockDesign::vanilla), 4);
    const auto bytes = encode_checkpoint(a.params());
    EXPECT_THROW(decode_checkpoint(bytes, b.params()), DataError);
    auto cfg = tiny(BlockDesign::full_residual);
    cfg.channels = {2, 3, 5};
    UNet<float> c(cfg, 4);
    EXPECT_THROW(decode_checkpoint(bytes, c.params()), DataError);
    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    UNet<float> d(tiny(BlockDesign::full_residual), 4);
    EXPECT_THROW(decode_checkpoint(truncated, d.params()), DataError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic, d.params()), DataError);
}
