#include <gtest/gtest.h>

#include <cstdlib>

#include "renalseg/config.hpp"

using namespace renalseg;
using nlohmann::json;

TEST(Config, EmptyObjectGivesDefaults) {
    unsetenv("RENALSEG_DATA_ROOT");
    const auto c = parse_run_config(json::object());
    EXPECT_EQ(c.stage1.classes, (std::vector<std::uint8_t>{0, 1}));
    EXPECT_EQ(c.tissue.net.out_classes, 4);
    EXPECT_EQ(c.vessel.net.out_classes, 3);
    EXPECT_EQ(c.pipeline.connectivity, 26);
}

TEST(Config, UnknownKeyNamesPath) {
    try {
        parse_run_config(json{{"stages", {{"IIB", {{"net", {{"levles", 4}}}}}}}});
        FAIL() << "expected UsageError";
    } catch (const UsageError& e) {
        EXPECT_NE(std::string(e.what()).find("levles"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_run_config(json{{"trian", json::object()}}), UsageError);
}

TEST(Config, WrongTypeAndBadValues) {
    EXPECT_THROW(parse_run_config(json{{"seed", "seven"}}), UsageError);
    EXPECT_THROW(parse_run_config(json{{"loss", {{"alpha", -0.5}}}}), UsageError);
    EXPECT_THROW(parse_run_config(json{{"loss", {{"strategy", "dice_mse"}}}}), UsageError);
    EXPECT_THROW(parse_run_config(json{{"pipeline", {{"connectivity", 18}}}}), UsageError);
    EXPECT_THROW(parse_run_config(json{{"experiment", {{"kind", "nope"}}}}), UsageError);
}

TEST(Config, RoundTrip) {
    unsetenv("RENALSEG_DATA_ROOT");
    auto c = toy_run_config();
    c.seed = 11;
    c.loss.alpha = 0.7;
    c.loss.beta = 0.3;
    c.vessel.net.block_design = nn::BlockDesign::conv_down;
    c.experiment.kind = ExperimentKind::weighting;
    c.experiment.stages = {StageId::IIA};
    const auto j = to_json(c);
    const auto back = parse_run_config(j);
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.vessel.net.block_design, nn::BlockDesign::conv_down);
    EXPECT_EQ(back.stage1.patch, c.stage1.patch);
}

TEST(Config, EnvironmentOverridesDataRoot) {
    setenv("RENALSEG_DATA_ROOT", "/data/phantoms", 1);
    const auto c = parse_run_config(json{{"data_root", "/elsewhere"}});
    unsetenv("RENALSEG_DATA_ROOT");
    EXPECT_EQ(c.data_root, "/data/phantoms");
    EXPECT_EQ(parse_run_config(json{{"data_root", "/elsewhere"}}).data_root, "/elsewhere");
}

TEST(Config, MissingFileIsDataError) {
    EXPECT_THROW(load_run_config("/nonexistent/renalseg.json"), DataError);
}
