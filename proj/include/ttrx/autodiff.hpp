#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Graph records operations in insertion order; backward() walks them in
// exact reverse order. Parameters enter the graph through Graph::parameter(),
// which binds the leaf to an external Tensor: after backward() the leaf's
// gradient is added into that tensor's grad buffer (when it requires grad).
// A graph and the tensors bound to it must stay on one thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "ttrx/rng.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx::ad {

enum class OpTag : std::uint8_t {
    Input,
    Parameter,
    Matmul,
    Conv2d,
    Sigmoid,
    Relu,
    BceWithLogits,
    Dropout,
    AvgPool2,
    Upsample2,
    ConcatChannels,
    AddBias,
    Reshape,
    Add,
    Mul,
    Sum,
};

std::string_view op_name(OpTag tag);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Constant leaf; never receives a gradient.
    Var input(Tensor value);

    /// Leaf bound to `param`. `param` must outlive backward().
    Var parameter(Tensor& param);

    std::size_t size() const noexcept { return nodes_.size(); }
    OpTag tag(std::size_t id) const { return nodes_.at(id).tag; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    /// Gradient of the last backward() target with respect to node `id`.
    /// Empty when the node does not lie on a differentiable path.
    std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }

    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Propagate d(loss)/d(node) to every node; accumulate into bound
    /// parameters. `loss` must be a single-element tensor.
    void backward(Var loss);

    // Used by operation implementations.
    Var record(OpTag tag, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn);
    Buffer& grad_buffer(std::size_t id);

private:
    struct Node {
        OpTag tag;
        std::vector<std::size_t> inputs;
        Tensor value;
        Buffer grad;
        Tensor* bound = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

/// [P x Q] * [Q x R] -> [P x R].
Var matmul(Var a, Var b);

/// Same-padded, stride-1 cross-correlation. input [Cin x H x W],
/// kernel [Cout x Cin x k x k] with k odd, bias [Cout].
Var conv2d(Var input, Var kernel, Var bias);

Var sigmoid(Var x);
Var relu(Var x);

/// Mean binary cross-entropy of sigmoid(logits) against `targets`, taken over
/// elements where `mask` is nonzero (all elements when no mask is given).
Var bce_with_logits(Var logits, const Tensor& targets, const Tensor* mask = nullptr);

/// Inverted dropout. Identity when !training or rate == 0.
Var dropout(Var x, double rate, RngState& rng, bool training);

/// 2x2 average pooling over the spatial dims of [C x H x W].
Var avg_pool2(Var x);

/// Nearest-neighbour 2x upsampling of [C x H x W].
Var upsample2(Var x);

/// [C1 x H x W] ++ [C2 x H x W] -> [(C1+C2) x H x W].
Var concat_channels(Var a, Var b);

/// [T x V] + bias[T] broadcast along columns.
Var add_bias(Var x, Var bias);

Var reshape(Var x, Shape shape);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var sum(Var x);

// ---- numerically stable scalar helpers -------------------------------------

double stable_sigmoid(double x) noexcept;

/// log(1 + exp(x)) without overflow.
double softplus(double x) noexcept;

}  // namespace ttrx::ad
