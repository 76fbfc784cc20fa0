#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ttrx/model.hpp"
#include "ttrx/rng.hpp"
#include "ttrx/synthdata.hpp"

namespace ttrx {

enum class SelectOn { ValidationDice, TrainingDice };

struct TrainOptions {
    double learning_rate = 0.001;
    std::size_t epochs = 200;
    double dropout_rate = 0.4;
    /// Subjects per optimizer step; 0 means the whole training set.
    std::size_t batch = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    SelectOn select_on = SelectOn::ValidationDice;
    /// Stop when the selection Dice has not improved for this many epochs
    /// (counted once it is above zero); 0 disables.
    std::size_t plateau_patience = 0;
    double threshold = 0.5;

    void validate() const;
};

struct TrainHistory {
    std::vector<double> loss;
    std::vector<double> selection_dice;
    /// 1-based epoch whose parameters were returned; 0 when no epoch ran.
    std::size_t best_epoch = 0;
    /// Set when the epoch loss rose more than 5% above its running minimum.
    bool convergence_warning = false;
};

struct AdamaxOptions {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamaxState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> infinity_norm;
    std::size_t step = 0;
};

/// One Adamax update of every tensor in `params` using the matching entry of
/// `grads`. State buffers are created as zeros on the first call.
void adamax_step(std::span<Tensor* const> params, std::span<const std::span<const double>> grads, AdamaxState& state,
                 const AdamaxOptions& opts);

struct TrainData {
    std::vector<SyntheticSubject> train;
    std::vector<SyntheticSubject> val;
    LabelSet labels = LabelSet::Novel;
};

struct TrainResult {
    SegmentationModel model;
    TrainHistory history;
};

/// Minimizes the mean binary cross-entropy of the parameters accepted by
/// `trainable` with Adamax and returns the parameters of the epoch with the
/// best selection Dice (earliest on ties). Parameters rejected by the filter
/// are left bit-unchanged.
TrainResult train(const SegmentationModel& init, const TrainData& data, const TrainOptions& opts,
                  const ParamFilter& trainable, RngState& rng);

/// Evaluation-mode mean cross-entropy over `subjects`.
double dataset_loss(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects, LabelSet labels);

}  // namespace ttrx
