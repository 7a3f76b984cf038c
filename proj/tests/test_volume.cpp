#include <gtest/gtest.h>

#include <random>
#include <set>

#include "renalseg/volume.hpp"

using namespace renalseg;

namespace {

Volume ramp_volume(Index3 shape, Geometry g) {
    Volume v(shape, g);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = float(i);
    return v;
}

std::multiset<std::array<long long, 4>> world_voxel_set(const Volume& v) {
    // (world mm * 1000 rounded, value) per voxel; rounding absorbs float noise.
    std::multiset<std::array<long long, 4>> s;
    for (std::int64_t z = 0; z < v.shape[2]; ++z)
        for (std::int64_t y = 0; y < v.shape[1]; ++y)
            for (std::int64_t x = 0; x < v.shape[0]; ++x) {
                const auto w = v.world(x, y, z);
                s.insert({std::llround(w[0] * 1000), std::llround(w[1] * 1000), std::llround(w[2] * 1000),
                          std::llround(v.at(x, y, z))});
            }
    return s;
}

}  // namespace

TEST(Geometry, WorldAndInverse) {
    Geometry g;
    g.spacing = {0.7, 0.8, 1.5};
    g.origin = {-10, 5, 2};
    g.direction = {{{-1, 0, 0}, {0, -1, 0}, {0, 0, 1}}};
    const auto w = g.world(2, 3, 4);
    EXPECT_NEAR(w[0], -10 - 1.4, 1e-12);
    EXPECT_NEAR(w[1], 5 - 2.4, 1e-12);
    EXPECT_NEAR(w[2], 2 + 6.0, 1e-12);
    const auto idx = g.index_of(w);
    EXPECT_NEAR(idx[0], 2, 1e-12);
    EXPECT_NEAR(idx[1], 3, 1e-12);
    EXPECT_NEAR(idx[2], 4, 1e-12);
}

TEST(Geometry, RejectsBadSpacingAndDirection) {
    Geometry g;
    g.spacing = {1, 0, 1};
    EXPECT_THROW(g.validate(), DataError);
    g.spacing = {1, 1, 1};
    g.direction[0][0] = 2.0;
    EXPECT_THROW(g.validate(), DataError);
}

TEST(Reorient, RasIsUnchanged) {
    const auto v = ramp_volume({3, 4, 5}, {});
    const auto r = reorient_to_ras(v);
    EXPECT_EQ(r.shape, v.shape);
    EXPECT_EQ(r.data, v.data);
    EXPECT_EQ(r.geometry, v.geometry);
}

TEST(Reorient, LpsFlipsFirstTwoAxesAndPreservesWorld) {
    Geometry g;
    g.spacing = {0.5, 0.75, 2.0};
    g.origin = {30, 40, -5};
    g.direction = {{{-1, 0, 0}, {0, -1, 0}, {0, 0, 1}}};
    const auto v = ramp_volume({4, 3, 2}, g);
    const auto r = reorient_to_ras(v);
    EXPECT_EQ(r.geometry.direction, identity3());
    // Origin moves to the opposite corner along the flipped axes.
    EXPECT_NEAR(r.geometry.origin[0], 30 - 3 * 0.5, 1e-12);
    EXPECT_NEAR(r.geometry.origin[1], 40 - 2 * 0.75, 1e-12);
    EXPECT_NEAR(r.geometry.origin[2], -5, 1e-12);
    EXPECT_EQ(r.at(0, 0, 0), v.at(3, 2, 0));
    EXPECT_EQ(world_voxel_set(r), world_voxel_set(v));
}

TEST(Reorient, PermutedAxesPreserveWorld) {
    Geometry g;
    g.spacing = {1, 2, 3};
    g.origin = {1, 2, 3};
    // index x -> world -z, index y -> world x, index z -> world y
    g.direction = {{{0, 1, 0}, {0, 0, 1}, {-1, 0, 0}}};
    const auto v = ramp_volume({2, 3, 4}, g);
    const auto r = reorient_to_ras(v);
    EXPECT_EQ(r.shape, (Index3{3, 4, 2}));
    EXPECT_EQ(r.geometry.direction, identity3());
    EXPECT_EQ(r.geometry.spacing, (Vec3{2, 3, 1}));
    EXPECT_EQ(world_voxel_set(r), world_voxel_set(v));
}

TEST(Reorient, ObliqueRejected) {
    Geometry g;
    const double c = std::sqrt(0.5);
    g.direction = {{{c, -c, 0}, {c, c, 0}, {0, 0, 1}}};
    const auto v = ramp_volume({2, 2, 2}, g);
    EXPECT_THROW(reorient_to_ras(v), DataError);
}

TEST(Resample, IdentityAtSameSpacing) {
    Geometry g;
    g.spacing = {0.7, 0.7, 1.0};
    const auto v = ramp_volume({5, 6, 7}, g);
    const auto r = resample(v, g.spacing, Interp::trilinear);
    EXPECT_EQ(r.shape, v.shape);
    EXPECT_EQ(r.data, v.data);
}

TEST(Resample, ConstantStaysConstant) {
    Geometry g;
    g.spacing = {0.9, 1.3, 2.1};
    Volume v({7, 5, 6}, g, 42.0f);
    for (auto interp : {Interp::trilinear, Interp::nearest}) {
        const auto r = resample(v, {0.5, 2.4, 1.1}, interp);
        for (auto x : r.data) EXPECT_FLOAT_EQ(x, 42.0f);
    }
}

TEST(Resample, ShapeIsCeilOfExtent) {
    Geometry g;
    g.spacing = {1.0, 1.0, 1.0};
    Volume v({10, 10, 10}, g);
    const auto r = resample(v, {2.4, 2.4, 3.0}, Interp::trilinear);
    EXPECT_EQ(r.shape, (Index3{5, 5, 4}));
    EXPECT_EQ(r.geometry.origin, v.geometry.origin);
}

TEST(Resample, TrilinearExactOnAffineFunction) {
    Geometry g;
    g.spacing = {1.1, 0.9, 1.7};
    g.origin = {3, -2, 5};
    Volume v({9, 11, 7}, g);
    auto f = [](const Vec3& w) { return w[0] + 2 * w[1] + 3 * w[2]; };
    for (std::int64_t z = 0; z < 7; ++z)
        for (std::int64_t y = 0; y < 11; ++y)
            for (std::int64_t x = 0; x < 9; ++x) v.at(x, y, z) = float(f(v.world(x, y, z)));
    const auto r = resample(v, {0.7, 0.7, 1.0}, Interp::trilinear);
    std::size_t checked = 0;
    for (std::int64_t z = 0; z < r.shape[2]; ++z)
        for (std::int64_t y = 0; y < r.shape[1]; ++y)
            for (std::int64_t x = 0; x < r.shape[0]; ++x) {
                const auto idx = v.geometry.index_of(r.world(x, y, z));
                // Beyond the last input center the border is clamped, not extrapolated.
                if (idx[0] > 8 || idx[1] > 10 || idx[2] > 6) continue;
                EXPECT_NEAR(r.at(x, y, z), f(r.world(x, y, z)), 1e-4 * std::max(1.0, std::abs(f(r.world(x, y, z)))));
                ++checked;
            }
    EXPECT_GT(checked, 1000u);
}

TEST(Resample, NearestIsIdempotent) {
    Geometry g;
    g.spacing = {0.8, 0.8, 1.2};
    LabelVolume l({12, 9, 8}, g);
    std::mt19937 rng(3);
    for (auto& v : l.data) v = std::uint8_t(rng() % 6);
    const auto once = resample(l, {1.5, 1.5, 2.0}, Interp::nearest);
    const auto twice = resample(once, {1.5, 1.5, 2.0}, Interp::nearest);
    EXPECT_EQ(once.data, twice.data);
    EXPECT_EQ(once.shape, twice.shape);
}

TEST(Resample, LabelsRequireNearest) {
    LabelVolume l({2, 2, 2});
    EXPECT_THROW(resample(l, {2, 2, 2}, Interp::trilinear), UsageError);
}

TEST(ForegroundBBox, AllAirIsError) {
    Volume v({5, 5, 5}, {}, -1000.0f);
    EXPECT_THROW(foreground_bbox(v, -200.0, 0), DataError);
}

TEST(ForegroundBBox, BlockAtOffset) {
    Volume v({20, 20, 20}, {}, -1000.0f);
    for (int z = 3; z < 13; ++z)
        for (int y = 3; y < 13; ++y)
            for (int x = 3; x < 13; ++x) v.at(x, y, z) = 50.0f;
    const auto b = foreground_bbox(v, -200.0, 0);
    EXPECT_EQ(b.lo, (Index3{3, 3, 3}));
    EXPECT_EQ(b.hi, (Index3{13, 13, 13}));
}

TEST(ForegroundBBox, MatchesBruteForceWithMargin) {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Volume v({13, 9, 11}, {}, -1000.0f);
        for (auto& x : v.data)
            if (rng() % 40 == 0) x = float(rng() % 400) - 150.0f;
        v.data[rng() % v.size()] = 10.0f;
        Index3 lo{100, 100, 100}, hi{-1, -1, -1};
        for (std::size_t i = 0; i < v.size(); ++i)
            if (v.data[i] > -200.0f) {
                const auto c = v.coords(i);
                for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], c[a]), hi[a] = std::max(hi[a], c[a] + 1);
            }
        for (int a = 0; a < 3; ++a) lo[a] = std::max<std::int64_t>(0, lo[a] - 2), hi[a] = std::min(v.shape[a], hi[a] + 2);
        const auto b = foreground_bbox(v, -200.0, 2);
        EXPECT_EQ(b.lo, lo);
        EXPECT_EQ(b.hi, hi);
    }
}

TEST(Crop, FullExtentIsIdentity) {
    const auto v = ramp_volume({4, 5, 6}, {});
    const auto c = crop(v, BBox{{0, 0, 0}, v.shape});
    EXPECT_EQ(c.data, v.data);
    EXPECT_EQ(c.geometry, v.geometry);
}

TEST(Crop, OriginAndVoxelsFollowBox) {
    Geometry g;
    g.spacing = {0.5, 1.0, 2.0};
    g.origin = {1, 2, 3};
    g.direction = {{{-1, 0, 0}, {0, 1, 0}, {0, 0, -1}}};
    const auto v = ramp_volume({8, 7, 6}, g);
    const BBox box{{2, 1, 3}, {7, 5, 6}};
    const auto c = crop(v, box);
    EXPECT_EQ(c.shape, (Index3{5, 4, 3}));
    EXPECT_EQ(c.at(0, 0, 0), v.at(2, 1, 3));
    const auto all = world_voxel_set(v);
    for (const auto& e : world_voxel_set(c)) EXPECT_TRUE(all.count(e));
}

TEST(Crop, OutOfRangeRejected) {
    const auto v = ramp_volume({4, 4, 4}, {});
    EXPECT_THROW(crop(v, BBox{{0, 0, 0}, {5, 4, 4}}), DataError);
    EXPECT_THROW(crop(v, BBox{{2, 0, 0}, {2, 4, 4}}), DataError);
}

TEST(Crop, ForegroundBoxKeepsEveryForegroundVoxel) {
    std::mt19937 rng(5);
    Volume v({16, 12, 10}, {}, -1000.0f);
    for (auto& x : v.data)
        if (rng() % 30 == 0) x = 100.0f;
    const auto b = foreground_bbox(v, -200.0, 0);
    const auto c = crop(v, b);
    auto count = [](const Volume& img) { return std::count_if(img.data.begin(), img.data.end(), [](float x) { return x > -200; }); };
    EXPECT_EQ(count(c), count(v));
}

TEST(Normalize, StageIPreset) {
    Volume v({2, 1, 1});
    v.data = {100.2f, -500.0f};
    const auto n = normalize(v, kStageINorm);
    EXPECT_NEAR(n.data[0], 0.0, 1e-6);
    EXPECT_NEAR(n.data[1], (-79.0 - 100.2) / 76.6, 1e-6);
    EXPECT_NEAR(n.data[1], -2.3394, 1e-4);
}

TEST(Normalize, StageIIPreset) {
    Volume v({1, 1, 1});
    v.data = {426.0f};
    EXPECT_NEAR(normalize(v, kStageIINorm).data[0], 3.2452, 1e-4);
}

TEST(Normalize, MeanEqualToConstantGivesZero) {
    Volume v({3, 3, 3}, {}, 55.0f);
    const auto n = normalize(v, NormSpec{0, 100, 55, 3});
    for (auto x : n.data) EXPECT_EQ(x, 0.0f);
}

TEST(Normalize, MonotoneInIntensity) {
    Volume v({200, 1, 1});
    for (int i = 0; i < 200; ++i) v.data[i] = float(-300 + 4 * i);
    const auto n = normalize(v, kStageIINorm);
    for (int i = 1; i < 200; ++i) EXPECT_LE(n.data[i - 1], n.data[i]);
}
