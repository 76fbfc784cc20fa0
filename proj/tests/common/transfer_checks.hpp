#pragma once

// Checks of the head-composition algebra shared by the unit and acceptance
// tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ttrx/autodiff.hpp"
#include "ttrx/model.hpp"
#include "ttrx/transfer.hpp"

namespace ttrx::testing {

/// Largest |p_composed - p_regression| over every voxel and novel tract,
/// where p_composed = sigmoid(W_n F + b_n) from the composed head and
/// p_regression = sigmoid(W h + b) applied to the existing logits h.
inline double composition_identity_error(const SegmentationModel& pretrained, const RegressionParams& reg,
                                         const std::vector<SyntheticSubject>& subjects) {
    const HeadParams composed = compose_head_init(reg, pretrained.head);
    const std::size_t n = reg.weight.dim(0), m = reg.weight.dim(1);
    double worst = 0.0;
    for (const auto& s : subjects) {
        const Tensor f = compute_features(s.input, pretrained.backbone);
        const Tensor direct = compute_head_logits(f, composed);
        const Tensor h = compute_head_logits(f, pretrained.head);
        const std::size_t v = h.size() / m;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < v; ++p) {
                double z = reg.bias[j];
                for (std::size_t i = 0; i < m; ++i) z += reg.weight[j * m + i] * h[i * v + p];
                worst = std::max(worst, std::abs(ad::stable_sigmoid(direct[j * v + p]) - ad::stable_sigmoid(z)));
            }
    }
    return worst;
}

/// True when composing the identity regression (N = M, zero bias) returns
/// the existing head bit for bit.
inline bool identity_composition_is_exact(const HeadParams& head) {
    const std::size_t m = head.tracts();
    RegressionParams id{Tensor(Shape{m, m}), Tensor(Shape{m})};
    for (std::size_t i = 0; i < m; ++i) id.weight[i * m + i] = 1.0;
    const HeadParams out = compose_head_init(id, head);
    return bit_identical(out.weight, head.weight) && bit_identical(out.bias, head.bias);
}

inline bool same_backbone(const BackboneParams& a, const BackboneParams& b) {
    if (a.params.size() != b.params.size() || !(a.arch == b.arch)) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i)
        if (a.params[i].name != b.params[i].name || !bit_identical(a.params[i].tensor, b.params[i].tensor))
            return false;
    return true;
}

}  // namespace ttrx::testing
