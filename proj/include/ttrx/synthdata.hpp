#pragma once

// Deterministic generator of synthetic multi-label "tract" subjects.
//
// Each tract is a ribbon around a quadratic Bezier centreline. Existing
// tracts share a cohort-level template that is jittered per subject. Each
// novel tract blends a set combination (intersection or union) of two
// crossing existing tracts with an independent ribbon:
//
//   s_novel(x) = rho * s_combined(x) + (1 - rho) * s_independent(x)
//
// where s is a signed ribbon distance (positive inside) and rho is the
// configured correlation. Every ribbon carries a 3-D fibre direction (its
// in-plane tangent tilted by a per-tract elevation). The input stacks the
// directions of up to three bundles present at each pixel into 9 channels,
// novel bundles first, then existing ones; unused slots are zero.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ttrx/rng.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx {

inline constexpr std::size_t kInputChannels = 9;
inline constexpr std::size_t kMaxOrientations = 3;

struct SyntheticSubject {
    std::uint64_t id = 0;
    Tensor input;            // [9 x H x W]
    Tensor existing_labels;  // [M x H x W], values in {0, 1}
    Tensor novel_labels;     // [N x H x W], values in {0, 1}
};

enum class LabelSet { Existing, Novel };

inline const Tensor& labels_of(const SyntheticSubject& s, LabelSet set) {
    return set == LabelSet::Existing ? s.existing_labels : s.novel_labels;
}

struct CohortConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t existing_tracts = 12;  // M
    std::size_t novel_tracts = 4;      // N
    double correlation = 0.75;
    std::size_t existing_train = 24;
    std::size_t existing_val = 6;
    std::size_t fewshot_train = 5;
    std::size_t fewshot_val = 2;
    std::size_t test = 10;
    std::uint64_t seed = 20210927;
    double noise_std = 0.1;
    /// Scale of per-subject geometric jitter (pixels); 0 disables it.
    double jitter = 0.5;

    void validate() const;
};

/// How a novel tract combines its two parent tracts.
enum class Combination { Intersection, Union };

struct NovelTractSpec {
    std::size_t parent_a = 0;
    std::size_t parent_b = 0;
    Combination combination = Combination::Union;
};

struct ExistingSplits {
    std::vector<SyntheticSubject> train;
    std::vector<SyntheticSubject> val;
};

struct FewShotSplit {
    std::vector<SyntheticSubject> train;
    std::vector<SyntheticSubject> val;
    std::vector<SyntheticSubject> test;
};

struct Cohort {
    CohortConfig config;
    std::vector<NovelTractSpec> novel_specs;
    ExistingSplits existing;
    FewShotSplit fewshot;
};

Cohort generate_cohort(const CohortConfig& config);

/// Seeded subset of the few-shot pool; the test split is passed through.
FewShotSplit subsample_fewshot(const FewShotSplit& split, std::size_t k_train, std::size_t k_val, std::uint64_t seed);

/// Number of 8-connected foreground components of channel `channel` of a
/// binary [T x H x W] mask.
std::size_t count_components(const Tensor& masks, std::size_t channel);

/// Matthews correlation between two binary masks given as channels.
double mask_mcc(const Tensor& a, std::size_t channel_a, const Tensor& b, std::size_t channel_b);

}  // namespace ttrx
