#include <gtest/gtest.h>

#include <random>

#include "renalseg/postprocess.hpp"
#include "support/oracles.hpp"

using namespace renalseg;

namespace {

std::set<std::vector<std::size_t>> as_partition(const std::vector<Component>& comps) {
    std::set<std::vector<std::size_t>> out;
    for (const auto& c : comps) out.insert(c.voxels);
    return out;
}

void fill_box(LabelVolume& v, BBox b, std::uint8_t cls) {
    for (std::int64_t z = b.lo[2]; z < b.hi[2]; ++z)
        for (std::int64_t y = b.lo[1]; y < b.hi[1]; ++y)
            for (std::int64_t x = b.lo[0]; x < b.hi[0]; ++x) v.at(x, y, z) = cls;
}

}  // namespace

TEST(Components, SingleVoxel) {
    LabelVolume m({5, 5, 5});
    m.at(2, 3, 4) = 1;
    const auto c = connected_components(m);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].voxel_count, 1);
    EXPECT_EQ(c[0].bbox, (BBox{{2, 3, 4}, {3, 4, 5}}));
}

TEST(Components, DiagonalCornerConnectivity) {
    LabelVolume m({3, 3, 3});
    m.at(0, 0, 0) = 1;
    m.at(1, 1, 1) = 1;
    EXPECT_EQ(connected_components(m, 26).size(), 1u);
    EXPECT_EQ(connected_components(m, 6).size(), 2u);
    EXPECT_THROW(connected_components(m, 18), UsageError);
}

TEST(Components, OrderingBySizeThenIndex) {
    LabelVolume m({10, 1, 1});
    m.at(0, 0, 0) = 1;              // size 1 at index 0
    m.at(2, 0, 0) = m.at(3, 0, 0) = 1;  // size 2
    m.at(5, 0, 0) = 1;              // size 1 at index 5
    m.at(7, 0, 0) = m.at(8, 0, 0) = 1;  // size 2 at index 7
    const auto c = connected_components(m);
    ASSERT_EQ(c.size(), 4u);
    EXPECT_EQ(c[0].voxels.front(), 2u);
    EXPECT_EQ(c[1].voxels.front(), 7u);
    EXPECT_EQ(c[2].voxels.front(), 0u);
    EXPECT_EQ(c[3].voxels.front(), 5u);
}

TEST(Components, MatchesUnionFindOracle) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        LabelVolume m({16, 16, 16});
        const double density = 0.1 + 0.3 * (trial % 4) / 3.0;
        std::bernoulli_distribution b(density);
        for (auto& v : m.data) v = b(rng);
        for (int conn : {6, 26}) EXPECT_EQ(as_partition(connected_components(m, conn)), testsupport::union_find_partition(m, conn));
    }
}

TEST(Prune, VolumeThresholdDependsOnSpacing) {
    LabelVolume v({20, 20, 20});
    fill_box(v, {{0, 0, 0}, {10, 10, 1}}, kArtery);  // 100 voxels
    fill_box(v, {{0, 5, 5}, {10, 10, 10}}, kKidney);
    const auto a = prune_small_vessels(v);
    EXPECT_EQ(std::count(a.data.begin(), a.data.end(), kArtery), 0);
    EXPECT_EQ(std::count(a.data.begin(), a.data.end(), kKidney), 250);

    v.geometry.spacing = {2.0, 1.0, 1.0};
    const auto b = prune_small_vessels(v);
    EXPECT_EQ(std::count(b.data.begin(), b.data.end(), kArtery), 100);
}

TEST(Prune, ExactlyAtThresholdIsKept) {
    LabelVolume v({20, 20, 20});
    fill_box(v, {{0, 0, 0}, {15, 10, 1}}, kVein);  // 150 mm3
    fill_box(v, {{0, 0, 5}, {149, 1, 6}}, kVein);
    std::vector<CensusEntry> census;
    const auto out = prune_small_vessels(v, 150.0, 26, &census);
    EXPECT_EQ(std::count(out.data.begin(), out.data.end(), kVein), 150);
    ASSERT_EQ(census.size(), 2u);
    EXPECT_TRUE(census[0].kept);
}

TEST(Prune, PerClassNotJoint) {
    // Artery and vein touch; each alone is under the threshold.
    LabelVolume v({20, 20, 20});
    fill_box(v, {{0, 0, 0}, {10, 10, 1}}, kArtery);
    fill_box(v, {{0, 0, 1}, {10, 10, 2}}, kVein);
    const auto out = prune_small_vessels(v);
    EXPECT_EQ(std::count(out.data.begin(), out.data.end(), 0), std::int64_t(out.size()));
}

TEST(DropOffKidney, Rules) {
    LabelVolume kidney({20, 20, 20});
    fill_box(kidney, {{5, 5, 5}, {10, 10, 10}}, 1);
    LabelVolume v({20, 20, 20});
    fill_box(v, {{10, 7, 7}, {18, 8, 8}}, kArtery);
    v.at(9, 7, 7) = kArtery;               // one voxel inside the kidney
    fill_box(v, {{0, 15, 15}, {5, 18, 18}}, kVein);  // disjoint blob
    const auto out = drop_vessels_off_kidney(v, kidney);
    EXPECT_EQ(std::count(out.data.begin(), out.data.end(), kArtery), 9);
    EXPECT_EQ(std::count(out.data.begin(), out.data.end(), kVein), 0);
    const auto none = drop_vessels_off_kidney(v, LabelVolume({20, 20, 20}));
    EXPECT_EQ(std::count(none.data.begin(), none.data.end(), 0), std::int64_t(none.size()));
    EXPECT_THROW(drop_vessels_off_kidney(v, LabelVolume({20, 20, 19})), GeometryMismatch);
}

TEST(Rescale, IdentityAndSingleVoxel) {
    Geometry g;
    g.spacing = {0.7, 0.7, 1.0};
    g.origin = {-3, 4, 10};
    LabelVolume v({9, 8, 7}, g);
    v.at(4, 5, 6) = kTumor;
    const auto out = rescale_to_original(v, v.shape, g);
    EXPECT_EQ(out.data, v.data);
}

TEST(Rescale, SphereRoundTripDice) {
    Geometry g;
    LabelVolume v({64, 64, 64}, g);
    for (std::int64_t z = 0; z < 64; ++z)
        for (std::int64_t y = 0; y < 64; ++y)
            for (std::int64_t x = 0; x < 64; ++x) {
                const double dx = x - 31.5, dy = y - 31.5, dz = z - 31.5;
                if (dx * dx + dy * dy + dz * dz <= 400.0) v.at(x, y, z) = kKidney;
            }
    const auto low = resample(v, {2.4, 2.4, 3.0}, Interp::nearest);
    const auto back = rescale_to_original(low, v.shape, v.geometry);
    EXPECT_EQ(back.shape, v.shape);
    EXPECT_GT(testsupport::dice(back, v, kKidney), 0.9);
}

TEST(Rescale, DisjointExtentsRejected) {
    LabelVolume v({4, 4, 4});
    Geometry far;
    far.origin = {100, 0, 0};
    EXPECT_THROW(rescale_to_original(v, {4, 4, 4}, far), DataError);
}

TEST(PostprocessInvariants, NeverAddsForegroundAndMonotoneInThreshold) {
    std::mt19937_64 rng(4);
    LabelVolume kidney({16, 16, 16});
    fill_box(kidney, {{4, 4, 4}, {12, 12, 12}}, 1);
    for (int trial = 0; trial < 20; ++trial) {
        LabelVolume v({16, 16, 16});
        std::discrete_distribution<int> d({80, 5, 0, 0, 8, 7});
        for (auto& x : v.data) x = std::uint8_t(d(rng));
        const auto out = drop_vessels_off_kidney(prune_small_vessels(v, 5.0), kidney);
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_TRUE(out.data[i] == v.data[i] || out.data[i] == 0);
        std::int64_t prev = std::numeric_limits<std::int64_t>::max();
        for (double t : {0.0, 2.0, 5.0, 20.0, 100.0}) {
            const auto p = prune_small_vessels(v, t);
            const auto kept = std::count_if(p.data.begin(), p.data.end(), [](auto x) { return x == kArtery || x == kVein; });
            EXPECT_LE(kept, prev);
            prev = kept;
        }
    }
}
