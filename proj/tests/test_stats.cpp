#include <gtest/gtest.h>

#include <random>

#include "renalseg/stats.hpp"

using namespace renalseg;

TEST(NormSpecEstimate, UniformForeground) {
    // 1001 foreground voxels holding 0..1000, plus unlabeled background.
    Volume img({1001, 2, 1}, {}, -1000.0f);
    LabelVolume lab({1001, 2, 1});
    for (int i = 0; i <= 1000; ++i) {
        img.at(i, 0, 0) = float(i);
        lab.at(i, 0, 0) = 1;
    }
    const IntensityCase c{&img, &lab};
    const auto spec = estimate_norm_spec(std::span(&c, 1));
    // Sort-based oracle: linear interpolation at rank q/100 * (n - 1).
    EXPECT_NEAR(spec.clip_lo, 5.0, 1e-9);
    EXPECT_NEAR(spec.clip_hi, 995.0, 1e-9);
    EXPECT_NEAR(spec.mean, 500.0, 1e-9);
    double ss = 0;
    for (int i = 0; i <= 1000; ++i) {
        const double v = std::clamp(double(i), 5.0, 995.0) - 500.0;
        ss += v * v;
    }
    EXPECT_NEAR(spec.std, std::sqrt(ss / 1001.0), 1e-9);
}

TEST(NormSpecEstimate, Errors) {
    Volume img({4, 4, 4}, {}, 50.0f);
    LabelVolume lab({4, 4, 4});
    const IntensityCase c{&img, &lab};
    EXPECT_THROW(estimate_norm_spec(std::span(&c, 1)), DataError);  // empty foreground
    std::fill(lab.data.begin(), lab.data.end(), 1);
    EXPECT_THROW(estimate_norm_spec(std::span(&c, 1)), DataError);  // zero variance
}

TEST(NormSpecEstimate, PresetsMatchPublishedConstants) {
    EXPECT_EQ(kStageINorm.clip_lo, -79.0);
    EXPECT_EQ(kStageINorm.clip_hi, 303.0);
    EXPECT_EQ(kStageINorm.mean, 100.2);
    EXPECT_EQ(kStageINorm.std, 76.6);
    EXPECT_EQ(kStageIINorm.clip_lo, -69.0);
    EXPECT_EQ(kStageIINorm.clip_hi, 426.0);
    EXPECT_EQ(kStageIINorm.mean, 137.5);
    EXPECT_EQ(kStageIINorm.std, 88.9);
}

TEST(ClassFrequencies, SingleVoxelClass) {
    LabelVolume l({10, 10, 10});
    l.data[123] = 1;
    const auto t = class_frequencies(std::span(&l, 1), {0, 1});
    EXPECT_DOUBLE_EQ(t.voxel_freq[0], 0.999);
    EXPECT_DOUBLE_EQ(t.voxel_freq[1], 0.001);
    EXPECT_DOUBLE_EQ(t.case_freq[0], 1.0);
    EXPECT_DOUBLE_EQ(t.case_freq[1], 1.0);
}

TEST(ClassFrequencies, AbsentClassAndCaseFraction) {
    std::vector<LabelVolume> cases(4, LabelVolume({4, 4, 4}));
    cases[0].data[0] = 1;
    cases[2].data[5] = 1;
    const auto t = class_frequencies(cases, {0, 1, 2});
    EXPECT_DOUBLE_EQ(t.case_freq[1], 0.5);
    EXPECT_DOUBLE_EQ(t.voxel_freq[2], 0.0);
    EXPECT_DOUBLE_EQ(t.case_freq[2], 0.0);
    EXPECT_NEAR(t.voxel_freq[0] + t.voxel_freq[1] + t.voxel_freq[2], 1.0, 1e-12);
}

TEST(ClassFrequencies, UnknownIdRejected) {
    LabelVolume l({2, 2, 2});
    l.data[0] = 4;
    EXPECT_THROW(class_frequencies(std::span(&l, 1), {0, 1}), DataError);
}

TEST(ClassWeights, TwoClassHandValue) {
    FreqTable t{{0, 1}, {0.9, 0.1}, {1.0, 1.0}};
    const auto w = class_weights(t, {true, true});
    // raw = (1/0.9, 1/0.1) -> normalized (0.1, 0.9)
    EXPECT_NEAR(w.w[0], 0.1, 1e-12);
    EXPECT_NEAR(w.w[1], 0.9, 1e-12);
}

TEST(ClassWeights, MaskedClassZeroAndRenormalized) {
    FreqTable t{{0, 1, 2}, {0.8, 0.15, 0.05}, {1.0, 1.0, 0.5}};
    const auto w = class_weights(t, {true, true, false});
    EXPECT_EQ(w.w[2], 0.0);
    EXPECT_NEAR(w.w[0] + w.w[1], 1.0, 1e-12);
}

TEST(ClassWeights, SymmetricIsUniform) {
    FreqTable t{{0, 1, 2, 3}, {0.25, 0.25, 0.25, 0.25}, {0.5, 0.5, 0.5, 0.5}};
    const auto w = class_weights(t, {true, true, true, true});
    for (double x : w.w) EXPECT_NEAR(x, 0.25, 1e-12);
}

TEST(ClassWeights, DegenerateBatch) {
    FreqTable t{{0, 1}, {0.5, 0.5}, {1, 1}};
    EXPECT_THROW(class_weights(t, {false, false}), DataError);
    FreqTable z{{0, 1}, {1.0, 0.0}, {1, 0}};
    EXPECT_THROW(class_weights(z, {true, true}), DataError);
}

TEST(ClassWeights, Properties) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int C = 2 + int(rng() % 5);
        FreqTable t;
        double s = 0;
        for (int c = 0; c < C; ++c) {
            t.classes.push_back(std::uint8_t(c));
            t.voxel_freq.push_back(u(rng));
            t.case_freq.push_back(u(rng));
            s += t.voxel_freq.back();
        }
        for (auto& v : t.voxel_freq) v /= s;
        std::vector<bool> all(C, true);
        const auto w = class_weights(t, all);
        // Scale-free: scaling every frequency by k leaves the weights unchanged.
        FreqTable scaled = t;
        for (auto& v : scaled.voxel_freq) v *= 0.5;
        const auto ws = class_weights(scaled, all);
        for (int c = 0; c < C; ++c) EXPECT_NEAR(w.w[c], ws.w[c], 1e-12);
        // Masking one class never decreases the others.
        auto partial = all;
        partial[rng() % C] = false;
        const auto wm = class_weights(t, partial);
        for (int c = 0; c < C; ++c)
            if (partial[c]) EXPECT_GE(wm.w[c], w.w[c] - 1e-15);
        // Rarer voxel frequency at equal case frequency gets more weight.
        FreqTable eq = t;
        for (auto& k : eq.case_freq) k = 0.7;
        const auto we = class_weights(eq, all);
        for (int a = 0; a < C; ++a)
            for (int b = 0; b < C; ++b)
                if (eq.voxel_freq[a] < eq.voxel_freq[b]) EXPECT_GT(we.w[a], we.w[b]);
    }
}

TEST(StatsJson, RoundTrip) {
    FreqTable t{{0, 4, 5}, {0.9, 0.06, 0.04}, {1, 1, 0.75}};
    const auto back = freq_table_from_json(to_json(t));
    EXPECT_EQ(back.classes, t.classes);
    EXPECT_EQ(back.voxel_freq, t.voxel_freq);
    const auto n = norm_spec_from_json(to_json(kStageINorm));
    EXPECT_EQ(n.mean, kStageINorm.mean);
}
