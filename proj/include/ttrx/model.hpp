#pragma once

// Segmentation network: a shared feature extractor followed by per-task
// heads that classify each voxel with an affine map and a sigmoid.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "ttrx/autodiff.hpp"
#include "ttrx/rng.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx {

/// Layer layout of the feature extractor:
///   conv(k, in -> encoder) relu ─┬─ pool^levels conv(k, encoder -> middle) relu dropout upsample^levels ─┐
///                                └────────────────────── skip ──────────────────────────────────────────── concat
///   conv(decoder_kernel, middle + encoder -> features)
struct ArchitectureDescriptor {
    std::size_t in_channels = 9;
    std::size_t encoder_channels = 16;
    std::size_t middle_channels = 32;
    std::size_t feature_channels = 16;
    std::size_t kernel = 3;
    std::size_t decoder_kernel = 1;
    std::size_t pool_levels = 2;

    std::size_t spatial_divisor() const { return std::size_t{1} << pool_levels; }
    friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct BackboneParams {
    ArchitectureDescriptor arch;
    std::vector<NamedTensor> params;

    Tensor& at(std::string_view name);
    const Tensor& at(std::string_view name) const;
};

/// One task head: weight [T x C], bias [T].
struct HeadParams {
    Tensor weight;
    Tensor bias;

    std::size_t tracts() const { return weight.empty() ? 0 : weight.dim(0); }
    std::size_t channels() const { return weight.empty() ? 0 : weight.dim(1); }
};

struct SegmentationModel {
    BackboneParams backbone;
    HeadParams head;
    /// Set once the parameters have been fitted by at least one training epoch.
    bool trained = false;
};

/// Parameter names in a stable order: backbone parameters, then
/// "head.weight", "head.bias".
struct ParamRef {
    std::string name;
    Tensor* tensor;
};
std::vector<ParamRef> parameters(SegmentationModel& model);

using ParamFilter = std::function<bool(std::string_view name)>;
bool all_params(std::string_view name);
bool head_only(std::string_view name);

/// Fan-in scaled uniform initialization; biases zero.
BackboneParams random_backbone(const ArchitectureDescriptor& arch, RngState& rng);
BackboneParams zero_backbone(const ArchitectureDescriptor& arch);

/// Weights uniform in +-1/sqrt(C), biases zero.
HeadParams random_head(std::size_t tracts, std::size_t channels, RngState& rng);
HeadParams zero_head(std::size_t tracts, std::size_t channels);

struct ForwardMode {
    bool training = false;
    double dropout_rate = 0.4;
};

/// Feature map [C x H x W] of input [9 x H x W]. H and W must be divisible
/// by arch.spatial_divisor(). Dropout is applied only in training mode.
ad::Var extract_features(ad::Graph& graph, const Tensor& input, BackboneParams& backbone, const ForwardMode& mode,
                         RngState& rng);

/// Per-voxel W F^v + b, shaped [T x H x W].
ad::Var head_logits(ad::Var features, HeadParams& head);

/// sigmoid(head_logits(F, head)).
ad::Var head_forward(ad::Var features, HeadParams& head);

// Graph-free evaluation-mode helpers.
Tensor compute_features(const Tensor& input, const BackboneParams& backbone);
Tensor compute_head_logits(const Tensor& features, const HeadParams& head);
Tensor compute_probabilities(const Tensor& input, const SegmentationModel& model);

}  // namespace ttrx
