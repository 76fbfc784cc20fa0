#include "ttrx/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ttrx/errors.hpp"
#include "ttrx/metrics.hpp"

namespace ttrx {

void TrainOptions::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("train: dropout_rate must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("train: beta1 and beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be > 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train: threshold must lie in (0, 1)");
}

void adamax_step(std::span<Tensor* const> params, std::span<const std::span<const double>> grads, AdamaxState& state,
                 const AdamaxOptions& opts) {
    if (params.size() != grads.size())
        throw ShapeError("adamax: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    if (state.step == 0 && state.first_moment.empty()) {
        for (auto* p : params) {
            state.first_moment.emplace_back(p->size(), 0.0);
            state.infinity_norm.emplace_back(p->size(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size())
        throw ShapeError("adamax: state holds " + std::to_string(state.first_moment.size()) + " buffers for " +
                         std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i]->size() || state.first_moment[i].size() != params[i]->size())
            throw ShapeError("adamax: size mismatch for parameter " + std::to_string(i) + " " +
                             shape_string(params[i]->shape()));
    }
    ++state.step;
    const double step_size = opts.learning_rate / (1.0 - std::pow(opts.beta1, static_cast<double>(state.step)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        auto& m = state.first_moment[i];
        auto& u = state.infinity_norm[i];
        const auto g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = opts.beta1 * m[k] + (1.0 - opts.beta1) * g[k];
            u[k] = std::max(opts.beta2 * u[k], std::abs(g[k]));
            p[k] -= step_size * m[k] / (u[k] + opts.epsilon);
        }
    }
}

double dataset_loss(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects, LabelSet labels) {
    if (subjects.empty()) throw DataError("dataset_loss: no subjects");
    double total = 0.0;
    for (const auto& s : subjects) {
        ad::Graph g;
        RngState unused(0);
        auto& m = const_cast<SegmentationModel&>(model);
        auto f = extract_features(g, s.input, m.backbone, ForwardMode{false, 0.0}, unused);
        total += ad::bce_with_logits(head_logits(f, m.head), labels_of(s, labels)).value()[0];
    }
    return total / static_cast<double>(subjects.size());
}

TrainResult train(const SegmentationModel& init, const TrainData& data, const TrainOptions& opts,
                  const ParamFilter& trainable, RngState& rng) {
    opts.validate();
    if (data.train.empty()) throw DataError("train: empty training split");
    TrainResult result{init, {}};
    if (opts.epochs == 0) return result;

    const bool on_val = opts.select_on == SelectOn::ValidationDice && !data.val.empty();
    const auto& selection = on_val ? data.val : data.train;

    SegmentationModel model = init;
    std::vector<Tensor*> active;
    for (auto& ref : parameters(model)) {
        const bool on = trainable(ref.name);
        ref.tensor->set_requires_grad(on);
        ref.tensor->clear_grad();
        if (on) active.push_back(ref.tensor);
    }

    const std::size_t n = data.train.size();
    const std::size_t batch = opts.batch == 0 ? n : std::min(opts.batch, n);
    const AdamaxOptions adamax{opts.learning_rate, opts.beta1, opts.beta2, opts.epsilon};
    AdamaxState state;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    double best = -std::numeric_limits<double>::infinity();
    double lowest_loss = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
        if (batch < n)
            for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t stop = std::min(start + batch, n);
            for (auto* p : active) p->zero_grad();
            for (std::size_t i = start; i < stop; ++i) {
                const auto& s = data.train[order[i]];
                ad::Graph g;
                auto f = extract_features(g, s.input, model.backbone, ForwardMode{true, opts.dropout_rate}, rng);
                auto loss = ad::bce_with_logits(head_logits(f, model.head), labels_of(s, data.labels));
                const double value = loss.value()[0];
                if (!std::isfinite(value))
                    throw DivergenceError("training diverged at epoch " + std::to_string(epoch), static_cast<int>(epoch));
                epoch_loss += value;
                if (!active.empty()) g.backward(loss);
            }
            if (active.empty()) continue;
            const double scale = 1.0 / static_cast<double>(stop - start);
            std::vector<std::span<const double>> grads;
            for (auto* p : active) {
                for (auto& v : p->grad()) v *= scale;
                grads.push_back(p->grad());
            }
            adamax_step(active, grads, state, adamax);
        }
        epoch_loss /= static_cast<double>(n);
        result.history.loss.push_back(epoch_loss);
        if (epoch_loss > 1.05 * lowest_loss) result.history.convergence_warning = true;
        lowest_loss = std::min(lowest_loss, epoch_loss);

        const double score = mean_dice(model, selection, data.labels, opts.threshold);
        result.history.selection_dice.push_back(score);
        if (score > best) {
            best = score;
            result.history.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else if (opts.plateau_patience > 0 && best > 0.0 && ++since_best >= opts.plateau_patience) {
            break;
        }
    }

    for (auto& ref : parameters(result.model)) {
        ref.tensor->set_requires_grad(false);
        ref.tensor->clear_grad();
    }
    result.model.trained = true;
    return result;
}

}  // namespace ttrx
