#pragma once

// End-to-end experiment commands behind the CLI. Every command reads and
// writes files under an output directory:
//
//   cohort.ttrx            generated subjects (generate)
//   pretrained.ttrx        existing-tract model (pretrain)
//   pretrain_history.csv   epoch,loss,dice
//   results.csv            shots,repeat,strategy,tract,subject,dice,rvd
//   histories.csv          shots,repeat,strategy,stage,epoch,loss,dice
//   init_losses.csv        shots,repeat,strategy,split,loss
//   summary.md             per (shots, strategy) means and paired tests
//                          against WarmupFT, recomputed from results.csv

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ttrx/config.hpp"
#include "ttrx/metrics.hpp"
#include "ttrx/model.hpp"
#include "ttrx/synthdata.hpp"

namespace ttrx {

struct OutputPaths {
    std::filesystem::path dir;

    std::filesystem::path cohort() const { return dir / "cohort.ttrx"; }
    std::filesystem::path pretrained() const { return dir / "pretrained.ttrx"; }
    std::filesystem::path pretrain_history() const { return dir / "pretrain_history.csv"; }
    std::filesystem::path results() const { return dir / "results.csv"; }
    std::filesystem::path histories() const { return dir / "histories.csv"; }
    std::filesystem::path init_losses() const { return dir / "init_losses.csv"; }
    std::filesystem::path summary() const { return dir / "summary.md"; }
};

/// Generates the cohort and writes cohort.ttrx.
Cohort cmd_generate(const ExperimentConfig& config);

struct PretrainOutcome {
    SegmentationModel model;
    TrainHistory history;
    double validation_dice = 0.0;
};

/// Trains the existing-tract model on the persisted cohort and writes
/// pretrained.ttrx and pretrain_history.csv. Zero pretraining epochs are
/// rejected with a ConfigError.
PretrainOutcome cmd_pretrain(const ExperimentConfig& config);

struct BenchmarkFilter {
    std::optional<TransferStrategy> strategy;
    std::optional<ShotCell> cell;
};

/// Runs every (shot cell, repeat, strategy) of the config, writes the CSV
/// files and summary.md, and returns the summary text.
std::string cmd_benchmark(const ExperimentConfig& config, const BenchmarkFilter& filter = {});

struct EvaluateRequest {
    /// Evaluate this checkpoint; otherwise run `strategy` on `cell` with the
    /// seeds of benchmark repeat `repeat` and save the resulting model.
    std::optional<std::filesystem::path> checkpoint;
    TransferStrategy strategy = TransferStrategy::WarmupFT;
    std::optional<ShotCell> cell;
    std::size_t repeat = 0;
};

struct EvaluateOutcome {
    std::string label;
    EvalReport report;
    std::filesystem::path csv;
    std::optional<std::filesystem::path> saved_model;
};

EvaluateOutcome cmd_evaluate(const ExperimentConfig& config, const EvaluateRequest& request);

/// Rebuilds summary.md from results.csv alone and returns it.
std::string cmd_report(const std::filesystem::path& output_dir);

// ---- results tables ----------------------------------------------------------

struct ResultRow {
    std::string shots;
    std::size_t repeat = 0;
    std::string strategy;
    std::size_t tract = 0;
    std::uint64_t subject = 0;
    double dice = 0.0;
    double rvd = 0.0;
};

std::string results_csv_header();
std::string format_result_row(const ResultRow& row);
std::vector<ResultRow> parse_results_csv(const std::string& text);

struct SummaryEntry {
    std::string shots;
    std::string strategy;
    double mean_dice = 0.0;
    double mean_rvd = 0.0;
    /// Paired over (repeat, tract) against the reference strategy; empty
    /// for the reference row or when the test is undefined.
    std::optional<TTestResult> test;
    std::optional<double> effect_size;
    std::size_t pairs = 0;
};

inline constexpr const char* kReferenceStrategy = "WarmupFT";

/// Rows in first-appearance order of shots, then strategy.
std::vector<SummaryEntry> summarize(const std::vector<ResultRow>& rows);
std::string summary_markdown(const std::vector<SummaryEntry>& entries);

/// Shortest text that parses back to the same double.
std::string format_number(double v);

}  // namespace ttrx
