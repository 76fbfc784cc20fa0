#pragma once

// Knowledge transfer from a model trained on existing tracts to a head for
// novel tracts.
//
// The novel tracts are predicted from the existing head's logits with a
// logistic regression  p = sigmoid(W h + b),  h = W_e F + b_e.  Folding the
// regression into the existing head gives a head on the shared features,
//   W_n = W W_e,   b_n = W b_e + b,
// which initializes fine-tuning (ComposedInit). Training a fresh head on the
// frozen features searches the same family directly and is the warmup stage
// of WarmupFT.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ttrx/model.hpp"
#include "ttrx/rng.hpp"
#include "ttrx/synthdata.hpp"
#include "ttrx/train.hpp"

namespace ttrx {

enum class TransferStrategy { Scratch, ClassicFT, ComposedInit, WarmupFT, UpperBound };

inline constexpr std::array kAllStrategies{TransferStrategy::Scratch, TransferStrategy::ClassicFT,
                                           TransferStrategy::ComposedInit, TransferStrategy::WarmupFT,
                                           TransferStrategy::UpperBound};

std::string_view strategy_name(TransferStrategy s);
/// Inverse of strategy_name (case-insensitive). Throws ConfigError.
TransferStrategy parse_strategy(std::string_view name);
bool needs_pretrained(TransferStrategy s);

/// Logit-regression parameters: weight [N x M], bias [N].
struct RegressionParams {
    Tensor weight;
    Tensor bias;
};

/// Per-voxel (existing-head logits, novel labels) pairs, row-major.
struct LogitPairs {
    std::size_t existing = 0;  // M
    std::size_t novel = 0;     // N
    std::vector<double> logits;
    std::vector<double> labels;

    std::size_t count() const { return existing == 0 ? 0 : logits.size() / existing; }
};

/// Evaluation-mode logits of the pretrained existing head at every voxel of
/// every subject, paired with the subjects' novel labels.
LogitPairs collect_logits(const std::vector<SyntheticSubject>& subjects, const SegmentationModel& pretrained);

struct FitOptions {
    std::size_t iterations = 300;
    /// Initial step; halved when a step would raise the loss, grown by
    /// step_growth after each accepted step.
    double step = 1.0;
    double step_growth = 1.25;
    /// |bias| used for rows whose labels are all identical.
    double logit_cap = 15.0;
    /// Fit on z-scored logits and map back; the model family is unchanged.
    bool standardize = true;
    /// Stop a row early once max |gradient| falls below this.
    double tolerance = 1e-9;
};

struct FitResult {
    RegressionParams params;
    std::vector<std::size_t> degenerate_tracts;
    /// Per novel tract: training loss before and after fitting.
    std::vector<double> initial_loss;
    std::vector<double> final_loss;
};

/// Full-batch gradient descent on the mean cross-entropy of each novel tract
/// from zero initialization; a step that would raise the loss is rejected
/// and the step size halved.
FitResult fit_logit_regression(const LogitPairs& pairs, const FitOptions& opts = {});

/// W_n = W W_e, b_n = W b_e + b.
HeadParams compose_head_init(const RegressionParams& reg, const HeadParams& existing_head);

struct WarmupResult {
    HeadParams head;
    TrainHistory history;
};

/// Trains a randomly initialized novel head on the frozen pretrained backbone.
WarmupResult warmup_fit(const SegmentationModel& pretrained, const TrainData& data, const TrainOptions& opts,
                        RngState& rng);

struct StrategyOptions {
    ArchitectureDescriptor arch;
    TrainOptions finetune;
    /// Head-only stage of WarmupFT.
    TrainOptions warmup = [] {
        TrainOptions o;
        o.epochs = 100;
        o.plateau_patience = 20;
        return o;
    }();
    /// Training recipe for the abundant-annotation reference model.
    TrainOptions upper_bound;
    FitOptions regression;
    /// Fit the logit regression on validation voxels too.
    bool regression_uses_val = false;
};

struct StrategyRun {
    TransferStrategy strategy;
    /// Parameters before fine-tuning (after warmup for WarmupFT).
    SegmentationModel init;
    SegmentationModel model;
    TrainHistory history;
    std::optional<TrainHistory> warmup_history;
    std::optional<FitResult> regression;
};

/// Builds the initialization for `strategy` and fine-tunes it on `split`.
/// `pretrained` is required for ClassicFT, ComposedInit and WarmupFT;
/// `abundant` (subjects with novel annotations) is required for UpperBound,
/// which trains from scratch on them together with the few-shot scans.
StrategyRun run_strategy(TransferStrategy strategy, const SegmentationModel* pretrained, const FewShotSplit& split,
                         const ExistingSplits* abundant, const StrategyOptions& opts, RngState& rng);

}  // namespace ttrx
