#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ttrx/config.hpp"
#include "ttrx/errors.hpp"

using namespace ttrx;

TEST(ShotCells, ParseAndLabel) {
    EXPECT_EQ(parse_shot_cell("3/1"), (ShotCell{3, 1}));
    EXPECT_EQ(parse_shot_cell("5,2"), (ShotCell{5, 2}));
    EXPECT_EQ(parse_shot_cell(" 1 / 0 "), (ShotCell{1, 0}));
    EXPECT_EQ(shot_label({5, 2}), "5/2");
    EXPECT_THROW(parse_shot_cell("3"), ConfigError);
    EXPECT_THROW(parse_shot_cell("a/b"), ConfigError);
}

TEST(Config, EmptyTextGivesDefaults) {
    const ExperimentConfig c = parse_config("");
    const ExperimentConfig d;
    EXPECT_EQ(to_config_text(c), to_config_text(d));
    EXPECT_EQ(c.repeats, 10u);
    EXPECT_EQ(c.shot_grid.size(), 3u);
    EXPECT_EQ(c.strategies.size(), 5u);
}

TEST(Config, ShippedDefaultFileMatchesBuiltInDefaults) {
    const auto path = std::filesystem::path(TTRX_SOURCE_DIR) / "configs" / "default.ini";
    EXPECT_EQ(config_hash(load_config(path)), config_hash(ExperimentConfig{}));
}

TEST(Config, ParsesEverySection) {
    const ExperimentConfig c = parse_config(R"(
; comment
[experiment]
seed = 99
repeats = 2
shot_grid = 1/0, 2/1
strategies = WarmupFT, scratch
output_dir = out/x
threads = 3
regression_uses_val = true

[cohort]
height = 32
width = 48
correlation = 0.5
fewshot_val = 1

[model]
feature_channels = 8

[train]
learning_rate = 0.02
select_on = training

[warmup]
plateau_patience = 0

[regression]
iterations = 50
standardize = false
)");
    EXPECT_EQ(c.seed, 99u);
    EXPECT_EQ(c.repeats, 2u);
    EXPECT_EQ(c.shot_grid, (std::vector<ShotCell>{{1, 0}, {2, 1}}));
    EXPECT_EQ(c.strategies, (std::vector<TransferStrategy>{TransferStrategy::WarmupFT, TransferStrategy::Scratch}));
    EXPECT_EQ(c.output_dir, "out/x");
    EXPECT_EQ(c.threads, 3u);
    EXPECT_TRUE(c.regression_uses_val);
    EXPECT_EQ(c.cohort.height, 32u);
    EXPECT_EQ(c.cohort.width, 48u);
    EXPECT_EQ(c.cohort.correlation, 0.5);
    EXPECT_EQ(c.arch.feature_channels, 8u);
    EXPECT_EQ(c.train.learning_rate, 0.02);
    EXPECT_EQ(c.train.select_on, SelectOn::TrainingDice);
    EXPECT_EQ(c.warmup.plateau_patience, 0u);
    EXPECT_EQ(c.regression.iterations, 50u);
    EXPECT_FALSE(c.regression.standardize);
    const auto so = c.strategy_options();
    EXPECT_EQ(so.finetune.learning_rate, 0.02);
    EXPECT_TRUE(so.regression_uses_val);
    EXPECT_EQ(so.arch.feature_channels, 8u);
}

TEST(Config, CanonicalTextRoundTrips) {
    ExperimentConfig c;
    c.seed = 123;
    c.cohort.correlation = 0.1;
    c.train.learning_rate = 0.1 + 0.2;
    c.shot_grid = {{2, 0}};
    const std::string text = to_config_text(c);
    const ExperimentConfig back = parse_config(text);
    EXPECT_EQ(to_config_text(back), text);
    EXPECT_EQ(back.train.learning_rate, c.train.learning_rate);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_EQ(config_hash(c).size(), 40u);
    c.seed = 124;
    EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, RejectsUnknownOrMalformedEntries) {
    EXPECT_THROW(parse_config("[experiment]\nsed = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[nonsense]\nx = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[experiment]\nseed = -1\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nlearning_rate = fast\n"), ConfigError);
    EXPECT_THROW(parse_config("[experiment]\nregression_uses_val = maybe\n"), ConfigError);
    EXPECT_THROW(parse_config("[experiment]\nstrategies = Ours3\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nselect_on = test\n"), ConfigError);
    EXPECT_THROW(parse_config("[experiment\nseed = 1\n"), ConfigError);
}

TEST(Config, ValidationRejectsInconsistentSettings) {
    auto bad = [](auto mutate) {
        ExperimentConfig c;
        mutate(c);
        return c;
    };
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.shot_grid = {{6, 0}}; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.shot_grid = {{1, 3}}; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.shot_grid = {{0, 0}}; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.repeats = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.strategies.clear(); }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.arch.kernel = 2; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.cohort.height = 36; c.arch.pool_levels = 3; }).validate(), ConfigError);
    EXPECT_THROW(bad([](ExperimentConfig& c) { c.train.learning_rate = 0; }).validate(), ConfigError);
    EXPECT_NO_THROW(ExperimentConfig{}.validate());
}

TEST(Config, MissingFileIsAFileError) {
    EXPECT_THROW(load_config("/nonexistent/ttrx.ini"), FileError);
}
