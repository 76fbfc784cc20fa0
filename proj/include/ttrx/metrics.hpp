#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ttrx/model.hpp"
#include "ttrx/synthdata.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx {

inline constexpr double kDefaultThreshold = 0.5;

/// Elementwise P > threshold as {0, 1}. threshold must lie in (0, 1).
Tensor binarize(const Tensor& probabilities, double threshold = kDefaultThreshold);

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice(std::span<const double> pred, std::span<const double> ref);
double dice(const Tensor& pred, const Tensor& ref);

/// | |pred| - |ref| | / |ref|. Throws UndefinedMetricError for an empty reference.
double rvd(std::span<const double> pred, std::span<const double> ref);
double rvd(const Tensor& pred, const Tensor& ref);

struct TTestResult {
    double t;
    double p;  // two-sided
    double df;
};

/// Paired Student's t-test on a - b.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Paired-design effect size: mean(a - b) / sd(a - b), sample sd.
double cohens_d(std::span<const double> a, std::span<const double> b);

/// Two-sided tail probability P(|T| >= |t|) for Student's t with df degrees of freedom.
double student_t_two_sided_p(double t, double df);

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double regularized_incomplete_beta(double x, double a, double b);

struct EvalReport {
    std::vector<std::uint64_t> subject_ids;
    /// [tract][subject]
    std::vector<std::vector<double>> dice;
    std::vector<std::vector<double>> rvd;
    std::vector<double> tract_mean_dice;
    std::vector<double> tract_mean_rvd;
    /// Means of the per-tract averages.
    double mean_dice = 0.0;
    double mean_rvd = 0.0;

    std::size_t tracts() const { return dice.size(); }
};

/// Scores binary predictions (one [T x H x W] mask per subject) against the
/// subjects' labels.
EvalReport evaluate_predictions(const std::vector<Tensor>& masks, const std::vector<SyntheticSubject>& subjects,
                                LabelSet labels);

/// Evaluation-mode inference, binarization and scoring.
EvalReport evaluate_model(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects,
                          LabelSet labels, double threshold = kDefaultThreshold);

/// Mean Dice over tracts and subjects; the model-selection score.
double mean_dice(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects, LabelSet labels,
                 double threshold = kDefaultThreshold);

}  // namespace ttrx
