#include <gtest/gtest.h>

#include <filesystem>

#include "renalseg/train.hpp"

using namespace renalseg;
namespace fs = std::filesystem;

namespace {

TrainCase cube_case(Index3 shape, BBox box, std::uint8_t cls = 1) {
    TrainCase c;
    c.id = "cube";
    c.image = Volume(shape, {}, -1.0f);
    c.labels = LabelVolume(shape);
    for (std::int64_t z = box.lo[2]; z < box.hi[2]; ++z)
        for (std::int64_t y = box.lo[1]; y < box.hi[1]; ++y)
            for (std::int64_t x = box.lo[0]; x < box.hi[0]; ++x) {
                c.image.at(x, y, z) = 1.0f;
                c.labels.at(x, y, z) = cls;
            }
    return c;
}

TrainSetup tiny_setup(const std::vector<TrainCase>& cases) {
    TrainSetup s;
    s.net.levels = 2;
    s.net.channels = {4, 8};
    s.net.encoder_stacks = {1, 1};
    s.net.block_design = nn::BlockDesign::full_residual;
    s.train.patch_size = {8, 8, 8};
    s.train.batch_size = 2;
    s.train.lr0 = 1e-2;
    s.train.batches_per_epoch = 3;
    s.train.max_epochs = 4;
    s.train.seed = 5;
    s.augment = AugmentSpec::none();
    s.augment.p_mirror = 0.5;
    s.classes = {0, 1};
    std::vector<LabelVolume> labs;
    for (const auto& c : cases) labs.push_back(c.labels);
    s.freqs = class_frequencies(labs, s.classes);
    s.pad_value = -1.0f;
    return s;
}

std::vector<std::vector<float>> snapshot(const nn::ParamStore<float>& p) {
    std::vector<std::vector<float>> out;
    for (const auto& [_, v] : p.entries()) out.push_back(v.value().data);
    return out;
}

}  // namespace

TEST(SamplePatch, SmallVolumeFullyContained) {
    const auto c = cube_case({3, 4, 5}, {{0, 0, 0}, {3, 4, 5}});
    std::mt19937_64 rng(1);
    const auto p = sample_patch(c, {8, 8, 8}, 0.5, -7.0f, rng);
    EXPECT_EQ(p.image.shape, (Index3{8, 8, 8}));
    EXPECT_EQ(std::count(p.labels.data.begin(), p.labels.data.end(), 1), 60);
    EXPECT_EQ(std::count(p.image.data.begin(), p.image.data.end(), -7.0f), 512 - 60);
}

TEST(SamplePatch, SingleForegroundVoxelAlwaysIncluded) {
    const auto c = cube_case({30, 30, 30}, {{3, 25, 17}, {4, 26, 18}});
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const auto p = sample_patch(c, {6, 6, 6}, 1.0, 0.0f, rng);
        EXPECT_TRUE(p.fg_centered);
        EXPECT_EQ(std::count(p.labels.data.begin(), p.labels.data.end(), 1), 1);
    }
}

TEST(SamplePatch, OversampleFractionMonteCarlo) {
    const auto c = cube_case({10, 10, 10}, {{2, 2, 2}, {4, 4, 4}});
    std::mt19937_64 rng(3);
    for (double f : {0.2, 0.5, 0.8}) {
        int hits = 0;
        for (int i = 0; i < 10000; ++i) hits += sample_patch(c, {2, 2, 2}, f, 0.0f, rng).fg_centered;
        EXPECT_NEAR(hits / 10000.0, f, 0.02);
    }
}

TEST(Augment, DisabledIsIdentity) {
    auto c = cube_case({9, 8, 7}, {{2, 2, 2}, {5, 6, 4}});
    auto img = c.image;
    auto lab = c.labels;
    augment(img, lab, AugmentSpec::none(), 42, 0.0f);
    EXPECT_EQ(img.data, c.image.data);
    EXPECT_EQ(lab.data, c.labels.data);
}

TEST(Augment, MirrorTwiceIsIdentity) {
    auto c = cube_case({9, 8, 7}, {{1, 2, 3}, {5, 3, 4}});
    auto spec = AugmentSpec::none();
    spec.p_mirror = 1.0;
    auto img = c.image;
    auto lab = c.labels;
    const auto r = augment(img, lab, spec, 1, 0.0f);
    EXPECT_TRUE(r.mirrored[0] && r.mirrored[1] && r.mirrored[2]);
    EXPECT_NE(lab.data, c.labels.data);
    augment(img, lab, spec, 1, 0.0f);
    EXPECT_EQ(img.data, c.image.data);
    EXPECT_EQ(lab.data, c.labels.data);
}

TEST(Augment, RotationScaleTracksAnalyticVolume) {
    const Index3 s{40, 40, 40};
    TrainCase sphere;
    sphere.image = Volume(s);
    sphere.labels = LabelVolume(s);
    std::int64_t base = 0;
    for (std::int64_t z = 0; z < 40; ++z)
        for (std::int64_t y = 0; y < 40; ++y)
            for (std::int64_t x = 0; x < 40; ++x) {
                const double dx = x - 19.5, dy = y - 19.5, dz = z - 19.5;
                if (dx * dx + dy * dy + dz * dz <= 64.0) {
                    sphere.labels.at(x, y, z) = 1;
                    sphere.image.at(x, y, z) = 1.0f;
                    ++base;
                }
            }
    auto spec = AugmentSpec::none();
    spec.p_rotation = spec.p_scale = 1.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto img = sphere.image;
        auto lab = sphere.labels;
        const auto r = augment(img, lab, spec, seed, 0.0f);
        const double expected = double(base) * r.scale * r.scale * r.scale;
        const double got = double(std::count(lab.data.begin(), lab.data.end(), 1));
        EXPECT_LT(std::abs(got - expected) / expected, 0.2) << "scale " << r.scale;
        EXPECT_EQ(img.shape, s);
    }
}

TEST(Augment, DeterministicPerSeedAndKeepsClassSet) {
    auto c = cube_case({16, 16, 16}, {{4, 4, 4}, {12, 12, 12}}, 2);
    AugmentSpec spec;
    spec.p_rotation = spec.p_scale = spec.p_elastic = spec.p_gamma = spec.p_noise = 1.0;
    auto i1 = c.image, i2 = c.image;
    auto l1 = c.labels, l2 = c.labels;
    augment(i1, l1, spec, 9, -1.0f);
    augment(i2, l2, spec, 9, -1.0f);
    EXPECT_EQ(i1.data, i2.data);
    EXPECT_EQ(l1.data, l2.data);
    for (auto v : l1.data) EXPECT_TRUE(v == 0 || v == 2);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    nn::ParamStore<double> p;
    p.add("w", {3}).mutable_value().data = {1, -2, 3};
    p.zero_grad();
    AdamState st;
    adam_step(p, st, 0.1);
    EXPECT_EQ(p.at("w").value().data, (std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
    nn::ParamStore<double> p;
    p.add("w", {1}).mutable_value().data = {2.0};
    p.at("w").grad()[0] = 1.0;
    AdamState st;
    adam_step(p, st, 0.1);
    // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    EXPECT_NEAR(p.at("w").value().data[0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientAborts) {
    nn::ParamStore<double> p;
    p.add("enc0.w", {2});
    p.at("enc0.w").grad()[1] = std::numeric_limits<double>::quiet_NaN();
    AdamState st;
    try {
        adam_step(p, st, 0.1);
        FAIL();
    } catch (const TrainingDiverged& e) {
        EXPECT_NE(std::string(e.what()).find("enc0.w[1]"), std::string::npos);
    }
}

TEST(Schedule, StrictlyImprovingKeeps) {
    TrainConfig cfg;
    ScheduleState s;
    for (int e = 0; e < 200; ++e) EXPECT_EQ(schedule_tick(10.0 - 0.01 * e, 10.0 - 0.01 * e, cfg, s), ScheduleAction::keep);
}

TEST(Schedule, ConstantLossReducesAtEpoch25) {
    TrainConfig cfg;
    ScheduleState s;
    s.lr = 1e-4;
    for (int e = 0; e < 25; ++e) EXPECT_EQ(schedule_tick(1.0, 1.0 - 0.01 * e, cfg, s), ScheduleAction::keep) << e;
    EXPECT_EQ(schedule_tick(1.0, 0.5, cfg, s), ScheduleAction::reduce_lr);
    EXPECT_DOUBLE_EQ(s.lr, 2e-5);
}

TEST(Schedule, HandTracedReductionAt35) {
    TrainConfig cfg;
    ScheduleState s;
    int fired = -1;
    for (int e = 0; e < 40 && fired < 0; ++e) {
        const double train = e < 10 ? 1.0 : 0.99;
        if (schedule_tick(train, 1.0 - 0.01 * e, cfg, s) == ScheduleAction::reduce_lr) fired = e;
    }
    EXPECT_EQ(fired, 35);
}

TEST(Schedule, StopsOnValidationPlateauAndMaxEpochs) {
    TrainConfig cfg;
    ScheduleState s;
    int stop = -1;
    for (int e = 0; e < 100 && stop < 0; ++e)
        if (schedule_tick(1.0 - 0.01 * e, 1.0, cfg, s) == ScheduleAction::stop) stop = e;
    EXPECT_EQ(stop, 50);
    cfg.max_epochs = 3;
    ScheduleState t;
    schedule_tick(1, 1, cfg, t);
    schedule_tick(0.5, 0.5, cfg, t);
    EXPECT_EQ(schedule_tick(0.1, 0.1, cfg, t), ScheduleAction::stop);
}

TEST(TrainLoop, OneEpochRunsExactlyBatchesPerEpochSteps) {
    const std::vector<TrainCase> cases{cube_case({12, 12, 12}, {{3, 3, 3}, {9, 9, 9}})};
    auto s = tiny_setup(cases);
    s.train.max_epochs = 1;
    s.train.batches_per_epoch = 4;
    nn::UNet<float> net(s.net, 1);
    const auto r = train_loop(net, cases, {}, s);
    EXPECT_EQ(r.iterations, 4);
    ASSERT_EQ(r.log.size(), 1u);
    EXPECT_EQ(r.log[0].action, ScheduleAction::stop);
}

TEST(TrainLoop, LossDecreasesOnTinyProblem) {
    const std::vector<TrainCase> cases{cube_case({12, 12, 12}, {{3, 3, 3}, {9, 9, 9}})};
    auto s = tiny_setup(cases);
    s.train.max_epochs = 8;
    s.train.batches_per_epoch = 5;
    nn::UNet<float> net(s.net, 1);
    const auto r = train_loop(net, cases, cases, s);
    EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST(TrainLoop, BitwiseReproducibleAndResumable) {
    const std::vector<TrainCase> cases{cube_case({12, 12, 12}, {{3, 3, 3}, {9, 9, 9}}),
                                       cube_case({10, 14, 12}, {{2, 5, 1}, {6, 9, 8}})};
    auto s = tiny_setup(cases);
    const auto root = fs::temp_directory_path() / "renalseg_train_test";
    fs::remove_all(root);

    nn::UNet<float> a(s.net, 3);
    s.out_dir = (root / "a").string();
    const auto ra = train_loop(a, cases, {cases[1]}, s);

    nn::UNet<float> b(s.net, 3);
    s.out_dir = (root / "b").string();
    train_loop(b, cases, {cases[1]}, s);
    EXPECT_EQ(snapshot(a.params()), snapshot(b.params()));

    // Two epochs, then resume for the remaining two.
    nn::UNet<float> c(s.net, 3);
    s.out_dir = (root / "c").string();
    s.train.max_epochs = 2;
    train_loop(c, cases, {cases[1]}, s);
    nn::UNet<float> d(s.net, 99);
    s.train.max_epochs = 4;
    const auto rd = train_loop(d, cases, {cases[1]}, s, (root / "c").string());
    EXPECT_EQ(snapshot(a.params()), snapshot(d.params()));
    ASSERT_EQ(rd.log.size(), 2u);
    EXPECT_EQ(rd.log[1].train_loss, ra.log[3].train_loss);
    EXPECT_TRUE(fs::exists(root / "a" / "best.rsnet"));
    EXPECT_TRUE(fs::exists(root / "a" / "train_log.csv"));
}
