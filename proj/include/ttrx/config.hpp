#pragma once

// Experiment configuration and its INI-style file format.
//
//   [experiment]  seed, repeats, shot_grid ("1/0, 3/1, 5/2"), strategies
//                 (comma separated names), output_dir, threads,
//                 regression_uses_val
//   [cohort]      CohortConfig fields
//   [model]       ArchitectureDescriptor fields
//   [pretrain] [train] [warmup] [upper_bound]
//                 TrainOptions fields: learning_rate, epochs, dropout_rate,
//                 batch, beta1, beta2, epsilon, select_on (validation |
//                 training), plateau_patience, threshold
//   [regression]  iterations, step, step_growth, logit_cap, standardize,
//                 tolerance
//
// Every key is optional; unknown sections or keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ttrx/model.hpp"
#include "ttrx/synthdata.hpp"
#include "ttrx/train.hpp"
#include "ttrx/transfer.hpp"

namespace ttrx {

struct ShotCell {
    std::size_t k_train = 1;
    std::size_t k_val = 0;
    friend bool operator==(const ShotCell&, const ShotCell&) = default;
};

std::string shot_label(const ShotCell& cell);  // "5/2"
ShotCell parse_shot_cell(const std::string& text);

struct ExperimentConfig {
    CohortConfig cohort;
    ArchitectureDescriptor arch;
    /// Existing-tract model.
    TrainOptions pretrain = [] {
        TrainOptions o;
        o.learning_rate = 0.03;
        o.epochs = 100;
        o.batch = 4;
        return o;
    }();
    /// Few-shot fine-tuning, shared by every strategy except UpperBound.
    TrainOptions train = [] {
        TrainOptions o;
        o.learning_rate = 0.01;
        o.epochs = 100;
        o.batch = 1;
        return o;
    }();
    /// Head-only stage of WarmupFT.
    TrainOptions warmup = [] {
        TrainOptions o;
        o.learning_rate = 0.1;
        o.epochs = 100;
        o.batch = 1;
        o.plateau_patience = 20;
        return o;
    }();
    TrainOptions upper_bound = pretrain;
    FitOptions regression;
    bool regression_uses_val = false;

    std::vector<TransferStrategy> strategies{kAllStrategies.begin(), kAllStrategies.end()};
    std::vector<ShotCell> shot_grid{{1, 0}, {3, 1}, {5, 2}};
    std::size_t repeats = 10;
    std::uint64_t seed = 7;
    std::filesystem::path output_dir = "results";
    /// Worker threads for the benchmark; 0 uses the hardware concurrency.
    std::size_t threads = 0;

    void validate() const;
    StrategyOptions strategy_options() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical text form; parse_config(to_config_text(c)) reproduces c.
std::string to_config_text(const ExperimentConfig& config);

/// SHA-1 of the canonical text form.
std::string config_hash(const ExperimentConfig& config);

}  // namespace ttrx
