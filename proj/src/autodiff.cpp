#include "ttrx/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "ttrx/errors.hpp"

namespace ttrx::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Graph& graph_of(Var a) {
    if (a.graph == nullptr) throw ContractError("variable is not attached to a graph");
    return *a.graph;
}

Graph& same_graph(Var a, Var b) {
    if (a.graph == nullptr || a.graph != b.graph) throw ContractError("variables belong to different graphs");
    return *a.graph;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

}  // namespace

std::string_view op_name(OpTag tag) {
    switch (tag) {
        case OpTag::Input: return "input";
        case OpTag::Parameter: return "parameter";
        case OpTag::Matmul: return "matmul";
        case OpTag::Conv2d: return "conv2d";
        case OpTag::Sigmoid: return "sigmoid";
        case OpTag::Relu: return "relu";
        case OpTag::BceWithLogits: return "bce_with_logits";
        case OpTag::Dropout: return "dropout";
        case OpTag::AvgPool2: return "avg_pool2";
        case OpTag::Upsample2: return "upsample2";
        case OpTag::ConcatChannels: return "concat_channels";
        case OpTag::AddBias: return "add_bias";
        case OpTag::Reshape: return "reshape";
        case OpTag::Add: return "add";
        case OpTag::Mul: return "mul";
        case OpTag::Sum: return "sum";
    }
    return "unknown";
}

const Tensor& Var::value() const {
    if (graph == nullptr) throw ContractError("variable is not attached to a graph");
    return graph->value(id);
}

double stable_sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// ---- Graph -----------------------------------------------------------------

Var Graph::input(Tensor value) {
    value.set_requires_grad(false);
    value.clear_grad();
    nodes_.push_back(Node{OpTag::Input, {}, std::move(value), {}, nullptr, false, {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor& param) {
    Tensor copy(param.shape());
    std::copy(param.data().begin(), param.data().end(), copy.data().begin());
    nodes_.push_back(Node{OpTag::Parameter, {}, std::move(copy), {}, &param, param.requires_grad(), {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(OpTag tag, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) {
        if (i >= nodes_.size()) throw ContractError("operation input was not produced by an earlier node");
        needs = needs || nodes_[i].needs_grad;
    }
    nodes_.push_back(Node{tag, std::move(inputs), std::move(value), {}, nullptr, needs, needs ? std::move(fn) : nullptr});
    return Var{this, nodes_.size() - 1};
}

Buffer& Graph::grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to a different graph");
    if (nodes_.at(loss.id).value.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_string(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.needs_grad) continue;
        if (n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
        if (n.tag != OpTag::Parameter || n.bound == nullptr || !n.needs_grad || n.grad.empty()) continue;
        n.bound->ensure_grad();
        auto g = n.bound->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
}

// ---- operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph& g = same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank(av, 2, "matmul");
    require_rank(bv, 2, "matmul");
    const std::size_t p = av.dim(0), q = av.dim(1), r = bv.dim(1);
    if (bv.dim(0) != q)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
    Tensor out(Shape{p, r});
    MatMap(out.data().data(), p, r).noalias() = ConstMatMap(av.data().data(), p, q) * ConstMatMap(bv.data().data(), q, r);
    const std::size_t ia = a.id, ib = b.id;
    return g.record(OpTag::Matmul, {ia, ib}, std::move(out), [ia, ib, p, q, r](Graph& gr, std::size_t self) {
        ConstMatMap go(gr.grad(self).data(), p, r);
        if (gr.needs_grad(ia)) {
            auto& ga = gr.grad_buffer(ia);
            MatMap(ga.data(), p, q).noalias() += go * ConstMatMap(gr.value(ib).data().data(), q, r).transpose();
        }
        if (gr.needs_grad(ib)) {
            auto& gb = gr.grad_buffer(ib);
            MatMap(gb.data(), q, r).noalias() += ConstMatMap(gr.value(ia).data().data(), p, q).transpose() * go;
        }
    });
}

namespace {

// Column matrix [Cin*k*k x H*W] for same-padded stride-1 correlation.
Buffer im2col(std::span<const double> in, std::size_t cin, std::size_t h, std::size_t w, std::size_t k) {
    const long r = static_cast<long>(k / 2);
    const std::size_t hw = h * w;
    Buffer cols(cin * k * k * hw, 0.0);
    for (std::size_t c = 0; c < cin; ++c) {
        const double* plane = in.data() + c * hw;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols.data() + ((c * k + ky) * k + kx) * hw;
                const long dy = static_cast<long>(ky) - r, dx = static_cast<long>(kx) - r;
                const long x0 = std::max(0L, -dx), x1 = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
                for (long y = std::max(0L, -dy); y < std::min(static_cast<long>(h), static_cast<long>(h) - dy); ++y) {
                    const double* src = plane + (y + dy) * static_cast<long>(w) + dx;
                    double* dst = row + y * static_cast<long>(w);
                    for (long x = x0; x < x1; ++x) dst[x] = src[x];
                }
            }
        }
    }
    return cols;
}

void col2im_add(std::span<const double> cols, std::span<double> in, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t k) {
    const long r = static_cast<long>(k / 2);
    const std::size_t hw = h * w;
    for (std::size_t c = 0; c < cin; ++c) {
        double* plane = in.data() + c * hw;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = cols.data() + ((c * k + ky) * k + kx) * hw;
                const long dy = static_cast<long>(ky) - r, dx = static_cast<long>(kx) - r;
                const long x0 = std::max(0L, -dx), x1 = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
                for (long y = std::max(0L, -dy); y < std::min(static_cast<long>(h), static_cast<long>(h) - dy); ++y) {
                    double* dst = plane + (y + dy) * static_cast<long>(w) + dx;
                    const double* src = row + y * static_cast<long>(w);
                    for (long x = x0; x < x1; ++x) dst[x] += src[x];
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Var input, Var kernel, Var bias) {
    Graph& g = same_graph(input, kernel);
    same_graph(input, bias);
    const Tensor& xv = input.value();
    const Tensor& kv = kernel.value();
    const Tensor& bv = bias.value();
    require_rank(xv, 3, "conv2d input");
    require_rank(kv, 4, "conv2d kernel");
    const std::size_t cin = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const std::size_t cout = kv.dim(0), k = kv.dim(2);
    if (kv.dim(1) != cin)
        throw ShapeError("conv2d: channel mismatch: input " + shape_string(xv.shape()) + ", kernel " +
                         shape_string(kv.shape()));
    if (kv.dim(3) != k || k % 2 == 0)
        throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_string(kv.shape()));
    if (bv.size() != cout)
        throw ShapeError("conv2d: bias " + shape_string(bv.shape()) + " does not match kernel " +
                         shape_string(kv.shape()));

    const std::size_t hw = h * w, patch = cin * k * k;
    // For 1x1 kernels the column matrix is the input itself.
    auto cols = std::make_shared<Buffer>(
        k == 1 ? Buffer(xv.data().begin(), xv.data().end()) : im2col(xv.data(), cin, h, w, k));

    Tensor out(Shape{cout, h, w});
    MatMap om(out.data().data(), cout, hw);
    om.noalias() = ConstMatMap(kv.data().data(), cout, patch) * ConstMatMap(cols->data(), patch, hw);
    for (std::size_t c = 0; c < cout; ++c) om.row(c).array() += bv[c];

    const std::size_t ix = input.id, ik = kernel.id, ib = bias.id;
    return g.record(OpTag::Conv2d, {ix, ik, ib}, std::move(out),
                    [=](Graph& gr, std::size_t self) {
                        ConstMatMap go(gr.grad(self).data(), cout, hw);
                        if (gr.needs_grad(ik)) {
                            auto& gk = gr.grad_buffer(ik);
                            MatMap(gk.data(), cout, patch).noalias() +=
                                go * ConstMatMap(cols->data(), patch, hw).transpose();
                        }
                        if (gr.needs_grad(ib)) {
                            auto& gb = gr.grad_buffer(ib);
                            for (std::size_t c = 0; c < cout; ++c) gb[c] += go.row(c).sum();
                        }
                        if (gr.needs_grad(ix)) {
                            auto& gx = gr.grad_buffer(ix);
                            const ConstMatMap km(gr.value(ik).data().data(), cout, patch);
                            if (k == 1) {
                                MatMap(gx.data(), patch, hw).noalias() += km.transpose() * go;
                            } else {
                                Buffer gcols(patch * hw);
                                MatMap(gcols.data(), patch, hw).noalias() = km.transpose() * go;
                                col2im_add(gcols, gx, cin, h, w, k);
                            }
                        }
                    });
}

Var sigmoid(Var x) {
    Graph& g = graph_of(x);
    Tensor out(x.shape());
    const auto in = x.value().data();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = stable_sigmoid(in[i]);
    const std::size_t ix = x.id;
    return g.record(OpTag::Sigmoid, {ix}, std::move(out), [ix](Graph& gr, std::size_t self) {
        const auto y = gr.value(self).data();
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
    });
}

Var relu(Var x) {
    Graph& g = graph_of(x);
    Tensor out(x.shape());
    const auto in = x.value().data();
    // std::max keeps a NaN input (it compares false) so divergence stays visible.
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(in[i], 0.0);
    const std::size_t ix = x.id;
    return g.record(OpTag::Relu, {ix}, std::move(out), [ix](Graph& gr, std::size_t self) {
        const auto in = gr.value(ix).data();
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t i = 0; i < in.size(); ++i)
            if (in[i] > 0.0) gx[i] += go[i];
    });
}

Var bce_with_logits(Var logits, const Tensor& targets, const Tensor* mask) {
    Graph& g = graph_of(logits);
    const Tensor& z = logits.value();
    if (targets.shape() != z.shape())
        throw ShapeError("bce_with_logits: logits " + shape_string(z.shape()) + " vs targets " +
                         shape_string(targets.shape()));
    if (mask != nullptr && mask->shape() != z.shape())
        throw ShapeError("bce_with_logits: logits " + shape_string(z.shape()) + " vs mask " +
                         shape_string(mask->shape()));
    std::size_t count = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (mask != nullptr && (*mask)[i] == 0.0) continue;
        ++count;
        total += softplus(z[i]) - z[i] * targets[i];
    }
    if (count == 0) throw ContractError("bce_with_logits: mask excludes every element");
    const double inv = 1.0 / static_cast<double>(count);
    auto y = std::make_shared<Tensor>(targets);
    std::shared_ptr<Tensor> m = mask ? std::make_shared<Tensor>(*mask) : nullptr;
    const std::size_t iz = logits.id;
    return g.record(OpTag::BceWithLogits, {iz}, Tensor::scalar(total * inv), [iz, y, m, inv](Graph& gr, std::size_t self) {
        const double go = gr.grad(self)[0] * inv;
        const auto zv = gr.value(iz).data();
        auto& gz = gr.grad_buffer(iz);
        for (std::size_t i = 0; i < zv.size(); ++i) {
            if (m && (*m)[i] == 0.0) continue;
            gz[i] += go * (stable_sigmoid(zv[i]) - (*y)[i]);
        }
    });
}

Var dropout(Var x, double rate, RngState& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    Graph& g = graph_of(x);
    const auto in = x.value().data();
    const double scale = 1.0 / (1.0 - rate);
    auto keep = std::make_shared<std::vector<double>>(in.size());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < in.size(); ++i) {
        (*keep)[i] = rng.uniform() < rate ? 0.0 : scale;
        out[i] = in[i] * (*keep)[i];
    }
    const std::size_t ix = x.id;
    return g.record(OpTag::Dropout, {ix}, std::move(out), [ix, keep](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*keep)[i];
    });
}

Var avg_pool2(Var x) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.value();
    require_rank(xv, 3, "avg_pool2");
    const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    if (h % 2 || w % 2) throw ShapeError("avg_pool2: spatial size must be even, got " + shape_string(xv.shape()));
    const std::size_t ho = h / 2, wo = w / 2;
    Tensor out(Shape{c, ho, wo});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx) {
                const std::size_t base = (ch * h + 2 * y) * w + 2 * xx;
                out[(ch * ho + y) * wo + xx] = 0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
            }
    const std::size_t ix = x.id;
    return g.record(OpTag::AvgPool2, {ix}, std::move(out), [=](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx) {
                    const double v = 0.25 * go[(ch * ho + y) * wo + xx];
                    const std::size_t base = (ch * h + 2 * y) * w + 2 * xx;
                    gx[base] += v;
                    gx[base + 1] += v;
                    gx[base + w] += v;
                    gx[base + w + 1] += v;
                }
    });
}

Var upsample2(Var x) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.value();
    require_rank(xv, 3, "upsample2");
    const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const std::size_t ho = 2 * h, wo = 2 * w;
    Tensor out(Shape{c, ho, wo});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx) out[(ch * ho + y) * wo + xx] = xv[(ch * h + y / 2) * w + xx / 2];
    const std::size_t ix = x.id;
    return g.record(OpTag::Upsample2, {ix}, std::move(out), [=](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx) gx[(ch * h + y / 2) * w + xx / 2] += go[(ch * ho + y) * wo + xx];
    });
}

Var concat_channels(Var a, Var b) {
    Graph& g = same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank(av, 3, "concat_channels");
    require_rank(bv, 3, "concat_channels");
    if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
        throw ShapeError("concat_channels: spatial mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
    std::vector<double> joined(av.data().begin(), av.data().end());
    joined.insert(joined.end(), bv.data().begin(), bv.data().end());
    const std::size_t na = av.size();
    const std::size_t ia = a.id, ib = b.id;
    return g.record(OpTag::ConcatChannels, {ia, ib},
                    Tensor(Shape{av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(joined)),
                    [ia, ib, na](Graph& gr, std::size_t self) {
                        const auto go = gr.grad(self);
                        if (gr.needs_grad(ia)) {
                            auto& ga = gr.grad_buffer(ia);
                            for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
                        }
                        if (gr.needs_grad(ib)) {
                            auto& gb = gr.grad_buffer(ib);
                            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
                        }
                    });
}

Var add_bias(Var x, Var bias) {
    Graph& g = same_graph(x, bias);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    require_rank(xv, 2, "add_bias");
    const std::size_t t = xv.dim(0), v = xv.dim(1);
    if (bv.size() != t)
        throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " vs rows of " + shape_string(xv.shape()));
    Tensor out = xv;
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < v; ++c) out[r * v + c] += bv[r];
    const std::size_t ix = x.id, ib = bias.id;
    return g.record(OpTag::AddBias, {ix, ib}, std::move(out), [ix, ib, t, v](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        if (gr.needs_grad(ix)) {
            auto& gx = gr.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        }
        if (gr.needs_grad(ib)) {
            auto& gb = gr.grad_buffer(ib);
            for (std::size_t r = 0; r < t; ++r)
                for (std::size_t c = 0; c < v; ++c) gb[r] += go[r * v + c];
        }
    });
}

Var reshape(Var x, Shape shape) {
    Graph& g = graph_of(x);
    Tensor out = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id;
    return g.record(OpTag::Reshape, {ix}, std::move(out), [ix](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        auto& gx = gr.grad_buffer(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

Var add(Var a, Var b) {
    Graph& g = same_graph(a, b);
    if (a.shape() != b.shape())
        throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const std::size_t ia = a.id, ib = b.id;
    return g.record(OpTag::Add, {ia, ib}, std::move(out), [ia, ib](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        for (auto id : {ia, ib}) {
            if (!gr.needs_grad(id)) continue;
            auto& gi = gr.grad_buffer(id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = same_graph(a, b);
    if (a.shape() != b.shape())
        throw ShapeError("mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const std::size_t ia = a.id, ib = b.id;
    return g.record(OpTag::Mul, {ia, ib}, std::move(out), [ia, ib](Graph& gr, std::size_t self) {
        const auto go = gr.grad(self);
        // Read both operands before writing: a and b may be the same node.
        const auto av = gr.value(ia).data();
        const auto bv = gr.value(ib).data();
        if (gr.needs_grad(ia)) {
            auto& ga = gr.grad_buffer(ia);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (gr.needs_grad(ib)) {
            auto& gb = gr.grad_buffer(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

Var sum(Var x) {
    Graph& g = graph_of(x);
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const std::size_t ix = x.id;
    return g.record(OpTag::Sum, {ix}, Tensor::scalar(s), [ix](Graph& gr, std::size_t self) {
        const double go = gr.grad(self)[0];
        auto& gx = gr.grad_buffer(ix);
        for (auto& v : gx) v += go;
    });
}

}  // namespace ttrx::ad
