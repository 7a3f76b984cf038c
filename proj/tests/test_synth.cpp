#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "renalseg/postprocess.hpp"
#include "renalseg/stats.hpp"
#include "renalseg/synth.hpp"

using namespace renalseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("renalseg_" + name);
    fs::remove_all(p);
    return p;
}

std::int64_t count(const LabelVolume& v, std::uint8_t c) { return std::count(v.data.begin(), v.data.end(), c); }

}  // namespace

TEST(Synth, SameSeedIsBitIdentical) {
    auto spec = default_phantom_spec();
    spec.seed = 42;
    const auto a = generate(spec), b = generate(spec);
    EXPECT_EQ(a.image.data, b.image.data);
    EXPECT_EQ(a.tissue.data, b.tissue.data);
    EXPECT_EQ(a.vessel.data, b.vessel.data);
    spec.seed = 43;
    EXPECT_NE(generate(spec).image.data, a.image.data);
}

TEST(Synth, SphereVolumeMatchesAnalytic) {
    PhantomSpec s;
    s.shape = {48, 48, 32};
    s.spacing = {1.0, 1.0, 1.5};
    s.kidneys = {{{24.3, 23.8, 24.1}, {10, 10, 10}}};
    const auto ph = generate(s);
    const double vol = double(count(ph.tissue, kKidney)) * 1.5;
    const double ref = 4.0 / 3.0 * M_PI * 1000.0;
    EXPECT_NEAR(vol, ref, 0.05 * ref);
}

TEST(Synth, AirOutsideBodyAndLabelsExclusive) {
    const auto ph = generate(default_phantom_spec());
    EXPECT_LT(ph.image.at(0, 0, 0), -200.0f);
    EXPECT_LT(ph.image.at(ph.image.shape[0] - 1, ph.image.shape[1] - 1, 5), -200.0f);
    for (std::size_t i = 0; i < ph.tissue.size(); ++i) {
        EXPECT_FALSE(ph.tissue.data[i] != 0 && ph.vessel.data[i] != 0);
        if (ph.tissue.data[i] || ph.vessel.data[i]) EXPECT_GT(ph.image.data[i], -200.0f);
    }
    EXPECT_GT(count(ph.tissue, kKidney), 0);
    EXPECT_GT(count(ph.tissue, kTumor), 0);
    EXPECT_GT(count(ph.tissue, kCyst), 0);
}

TEST(Synth, VesselTreesAreConnected) {
    const auto ph = generate(default_phantom_spec());
    EXPECT_EQ(class_components(ph.vessel, kArtery, 26).size(), 1u);
    EXPECT_EQ(class_components(ph.vessel, kVein, 26).size(), 1u);
}

TEST(Synth, DefaultVesselsLieNearKidneys) {
    // Every vessel voxel sits within 20 mm of some kidney's bounding box.
    const auto spec = default_phantom_spec();
    const auto ph = generate(spec);
    for (std::size_t i = 0; i < ph.vessel.size(); ++i) {
        if (!ph.vessel.data[i]) continue;
        const auto c = ph.vessel.coords(i);
        const Vec3 w = ph.vessel.geometry.world(double(c[0]), double(c[1]), double(c[2]));
        bool near = false;
        for (const auto& k : spec.kidneys) {
            bool in = true;
            for (int a = 0; a < 3; ++a) in = in && std::abs(w[a] - k.center[a]) <= k.radii[a] + 20.0;
            near = near || in;
        }
        ASSERT_TRUE(near) << "voxel " << c[0] << "," << c[1] << "," << c[2];
    }
}

TEST(Synth, ValidationRejectsBadSpecs) {
    auto s = default_phantom_spec();
    s.vessels[0].radius = 1.0;  // below the 1.5 mm slice spacing
    EXPECT_THROW(generate(s), UsageError);
    s = default_phantom_spec();
    s.kidneys[0].center[0] = 2.0;
    EXPECT_THROW(generate(s), UsageError);
    s = default_phantom_spec();
    s.tumors[0].kidney = 7;
    EXPECT_THROW(generate(s), UsageError);
}

TEST(Synth, VariationPlacesLesionsInsideKidneys) {
    const auto base = default_phantom_spec();
    int tumors = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        bool t = false, c = false;
        const auto s = vary_phantom(base, {}, seed, &t, &c);
        EXPECT_NO_THROW(s.validate());
        EXPECT_EQ(t, !s.tumors.empty());
        EXPECT_EQ(c, !s.cysts.empty());
        tumors += t;
    }
    EXPECT_GT(tumors, 8);
    EXPECT_LT(tumors, 32);
}

TEST(Synth, SmallSpecForOverfitting) {
    const auto ph = generate(small_phantom_spec());
    EXPECT_EQ(ph.image.shape, (Index3{32, 32, 32}));
    EXPECT_GT(count(ph.tissue, kKidney), 1000);
    EXPECT_GT(count(ph.tissue, kTumor), 100);
}

TEST(SynthDataset, ManifestMatchesFilesOnDisk) {
    const auto dir = fresh_dir("synth_dataset");
    const auto cases = generate_dataset(3, dir, 7);
    ASSERT_EQ(cases.size(), 3u);
    std::ifstream in(dir / "dataset.json");
    const auto manifest = nlohmann::json::parse(in);
    ASSERT_EQ(manifest["cases"].size(), 3u);
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& entry = manifest["cases"][i];
        EXPECT_EQ(entry["id"], cases[i].id);
        const auto img = read_nifti<float>((cases[i].dir / "image.nii.gz").string());
        const auto tissue = read_labels((cases[i].dir / "tissue.nii.gz").string());
        const auto vessel = read_labels((cases[i].dir / "vessel.nii.gz").string());
        EXPECT_EQ(img.shape, tissue.shape);
        EXPECT_EQ(entry["tumor"].get<bool>(), count(tissue, kTumor) > 0);
        EXPECT_EQ(entry["cyst"].get<bool>(), count(tissue, kCyst) > 0);
        const auto& vc = entry["voxel_counts"];
        EXPECT_EQ(vc["kidney"].get<std::int64_t>(), count(tissue, kKidney));
        EXPECT_EQ(vc["artery"].get<std::int64_t>(), count(vessel, kArtery));
        EXPECT_EQ(vc["vein"].get<std::int64_t>(), count(vessel, kVein));
    }
    // Regenerating with the same seed reproduces the files.
    const auto dir2 = fresh_dir("synth_dataset2");
    generate_dataset(3, dir2, 7);
    for (const auto& c : cases)
        EXPECT_EQ(read_nifti<float>((c.dir / "image.nii.gz").string()).data,
                  read_nifti<float>((dir2 / c.id / "image.nii.gz").string()).data);
    fs::remove_all(dir);
    fs::remove_all(dir2);
}
