#include "ttrx/transfer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>

#include "ttrx/autodiff.hpp"
#include "ttrx/errors.hpp"

namespace ttrx {

std::string_view strategy_name(TransferStrategy s) {
    switch (s) {
        case TransferStrategy::Scratch: return "Scratch";
        case TransferStrategy::ClassicFT: return "ClassicFT";
        case TransferStrategy::ComposedInit: return "ComposedInit";
        case TransferStrategy::WarmupFT: return "WarmupFT";
        case TransferStrategy::UpperBound: return "UpperBound";
    }
    return "unknown";
}

TransferStrategy parse_strategy(std::string_view name) {
    auto lower = [](std::string_view s) {
        std::string out(s);
        std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
        return out;
    };
    for (auto s : kAllStrategies)
        if (lower(strategy_name(s)) == lower(name)) return s;
    throw ConfigError("unknown strategy '" + std::string(name) +
                      "' (expected Scratch, ClassicFT, ComposedInit, WarmupFT or UpperBound)");
}

bool needs_pretrained(TransferStrategy s) {
    return s == TransferStrategy::ClassicFT || s == TransferStrategy::ComposedInit || s == TransferStrategy::WarmupFT;
}

LogitPairs collect_logits(const std::vector<SyntheticSubject>& subjects, const SegmentationModel& pretrained) {
    if (!pretrained.trained || pretrained.head.weight.empty() || pretrained.backbone.params.empty())
        throw StateError("collect_logits: the existing-tract model has not been trained");
    if (subjects.empty()) throw DataError("collect_logits: no subjects");
    LogitPairs pairs;
    pairs.existing = pretrained.head.tracts();
    pairs.novel = subjects.front().novel_labels.dim(0);
    for (const auto& s : subjects) {
        const Tensor h = compute_head_logits(compute_features(s.input, pretrained.backbone), pretrained.head);
        const std::size_t v = h.size() / pairs.existing;
        if (s.novel_labels.dim(0) != pairs.novel || s.novel_labels.size() / pairs.novel != v)
            throw ShapeError("collect_logits: subject " + std::to_string(s.id) + " has mismatched label shape " +
                             shape_string(s.novel_labels.shape()));
        for (std::size_t p = 0; p < v; ++p) {
            for (std::size_t i = 0; i < pairs.existing; ++i) pairs.logits.push_back(h[i * v + p]);
            for (std::size_t j = 0; j < pairs.novel; ++j) pairs.labels.push_back(s.novel_labels[j * v + p]);
        }
    }
    return pairs;
}

namespace {

// Mean BCE and its gradient for one row: z_k = b + w . x_k.
struct RowObjective {
    const std::vector<double>& x;  // count x m
    std::vector<double> y;         // count
    std::size_t m;

    double loss(const std::vector<double>& w, double b) const {
        double total = 0.0;
        const std::size_t n = y.size();
        for (std::size_t k = 0; k < n; ++k) {
            double z = b;
            const double* row = x.data() + k * m;
            for (std::size_t i = 0; i < m; ++i) z += w[i] * row[i];
            total += ad::softplus(z) - y[k] * z;
        }
        return total / static_cast<double>(n);
    }

    void gradient(const std::vector<double>& w, double b, std::vector<double>& gw, double& gb) const {
        std::fill(gw.begin(), gw.end(), 0.0);
        gb = 0.0;
        const std::size_t n = y.size();
        for (std::size_t k = 0; k < n; ++k) {
            double z = b;
            const double* row = x.data() + k * m;
            for (std::size_t i = 0; i < m; ++i) z += w[i] * row[i];
            const double r = ad::stable_sigmoid(z) - y[k];
            gb += r;
            for (std::size_t i = 0; i < m; ++i) gw[i] += r * row[i];
        }
        const double inv = 1.0 / static_cast<double>(n);
        gb *= inv;
        for (auto& g : gw) g *= inv;
    }
};

}  // namespace

FitResult fit_logit_regression(const LogitPairs& pairs, const FitOptions& opts) {
    const std::size_t m = pairs.existing, nv = pairs.novel, count = pairs.count();
    if (m == 0 || nv == 0 || count == 0) throw DataError("fit_logit_regression: no voxel pairs");
    if (pairs.labels.size() != count * nv) throw ShapeError("fit_logit_regression: label count mismatch");

    // Column statistics for standardization.
    std::vector<double> mean(m, 0.0), scale(m, 1.0);
    if (opts.standardize) {
        for (std::size_t k = 0; k < count; ++k)
            for (std::size_t i = 0; i < m; ++i) mean[i] += pairs.logits[k * m + i];
        for (auto& v : mean) v /= static_cast<double>(count);
        for (std::size_t i = 0; i < m; ++i) {
            double ss = 0.0;
            for (std::size_t k = 0; k < count; ++k) {
                const double d = pairs.logits[k * m + i] - mean[i];
                ss += d * d;
            }
            const double sd = std::sqrt(ss / static_cast<double>(count));
            scale[i] = sd > 1e-12 ? sd : 0.0;  // 0 marks a constant column
        }
    }
    std::vector<double> x(pairs.logits.size());
    for (std::size_t k = 0; k < count; ++k)
        for (std::size_t i = 0; i < m; ++i) {
            const double raw = pairs.logits[k * m + i];
            x[k * m + i] = !opts.standardize ? raw : (scale[i] == 0.0 ? 0.0 : (raw - mean[i]) / scale[i]);
        }

    FitResult result;
    result.params.weight = Tensor(Shape{nv, m});
    result.params.bias = Tensor(Shape{nv});
    for (std::size_t j = 0; j < nv; ++j) {
        RowObjective obj{x, std::vector<double>(count), m};
        double positives = 0.0;
        for (std::size_t k = 0; k < count; ++k) {
            obj.y[k] = pairs.labels[k * nv + j];
            positives += obj.y[k];
        }
        std::vector<double> w(m, 0.0), gw(m, 0.0), trial(m, 0.0);
        double b = 0.0, gb = 0.0;
        double loss = obj.loss(w, b);
        result.initial_loss.push_back(loss);
        if (positives == 0.0 || positives == static_cast<double>(count)) {
            std::cerr << "warning: novel tract " << j << " has identical labels on every voxel; using a constant row\n";
            result.degenerate_tracts.push_back(j);
            result.params.bias[j] = positives == 0.0 ? -opts.logit_cap : opts.logit_cap;
            result.final_loss.push_back(obj.loss(w, result.params.bias[j]));
            continue;
        }
        double step = opts.step;
        for (std::size_t it = 0; it < opts.iterations; ++it) {
            obj.gradient(w, b, gw, gb);
            double gmax = std::abs(gb);
            for (double g : gw) gmax = std::max(gmax, std::abs(g));
            if (gmax < opts.tolerance) break;
            bool accepted = false;
            for (int halvings = 0; halvings < 60 && !accepted; ++halvings) {
                for (std::size_t i = 0; i < m; ++i) trial[i] = w[i] - step * gw[i];
                const double tb = b - step * gb;
                const double tl = obj.loss(trial, tb);
                if (tl <= loss) {
                    w.swap(trial);
                    b = tb;
                    loss = tl;
                    accepted = true;
                    step *= opts.step_growth;
                } else {
                    step *= 0.5;
                }
            }
            if (!accepted) break;
        }
        result.final_loss.push_back(loss);
        // Undo the standardization: w_raw = w / sd, b_raw = b - sum w mean / sd.
        double bias = b;
        for (std::size_t i = 0; i < m; ++i) {
            double wi = w[i];
            if (opts.standardize) {
                wi = scale[i] == 0.0 ? 0.0 : w[i] / scale[i];
                bias -= wi * mean[i];
            }
            result.params.weight[j * m + i] = wi;
        }
        result.params.bias[j] = bias;
    }
    return result;
}

HeadParams compose_head_init(const RegressionParams& reg, const HeadParams& existing_head) {
    if (reg.weight.rank() != 2 || existing_head.weight.rank() != 2)
        throw ShapeError("compose_head_init: weights must be matrices");
    const std::size_t n = reg.weight.dim(0), m = reg.weight.dim(1), c = existing_head.weight.dim(1);
    if (existing_head.weight.dim(0) != m || existing_head.bias.size() != m)
        throw ShapeError("compose_head_init: regression weight " + shape_string(reg.weight.shape()) +
                         " does not match existing head " + shape_string(existing_head.weight.shape()));
    if (reg.bias.size() != n)
        throw ShapeError("compose_head_init: regression bias " + shape_string(reg.bias.shape()) + " vs weight " +
                         shape_string(reg.weight.shape()));
    HeadParams out{Tensor(Shape{n, c}), Tensor(Shape{n})};
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t col = 0; col < c; ++col) {
            double acc = reg.weight[j * m] * existing_head.weight[col];
            for (std::size_t i = 1; i < m; ++i) acc += reg.weight[j * m + i] * existing_head.weight[i * c + col];
            out.weight[j * c + col] = acc;
        }
        double acc = reg.weight[j * m] * existing_head.bias[0];
        for (std::size_t i = 1; i < m; ++i) acc += reg.weight[j * m + i] * existing_head.bias[i];
        out.bias[j] = acc + reg.bias[j];
    }
    return out;
}

WarmupResult warmup_fit(const SegmentationModel& pretrained, const TrainData& data, const TrainOptions& opts,
                        RngState& rng) {
    if (data.train.empty()) throw DataError("warmup_fit: empty training split");
    if (!pretrained.trained) throw StateError("warmup_fit: the existing-tract model has not been trained");
    SegmentationModel start;
    start.backbone = pretrained.backbone;
    start.head = random_head(data.train.front().novel_labels.dim(0), pretrained.backbone.arch.feature_channels, rng);
    start.trained = true;
    auto result = train(start, data, opts, head_only, rng);
    return {std::move(result.model.head), std::move(result.history)};
}

StrategyRun run_strategy(TransferStrategy strategy, const SegmentationModel* pretrained, const FewShotSplit& split,
                         const ExistingSplits* abundant, const StrategyOptions& opts, RngState& rng) {
    if (needs_pretrained(strategy) && pretrained == nullptr)
        throw ConfigError(std::string(strategy_name(strategy)) + " requires a pretrained existing-tract model");
    if (needs_pretrained(strategy) && !pretrained->trained)
        throw StateError(std::string(strategy_name(strategy)) + ": the existing-tract model has not been trained");
    if (strategy == TransferStrategy::UpperBound && abundant == nullptr)
        throw ConfigError("UpperBound requires the abundantly annotated cohort");
    if (split.train.empty()) throw DataError("run_strategy: empty training split");

    const std::size_t novel = split.train.front().novel_labels.dim(0);
    TrainData data{split.train, split.val, LabelSet::Novel};
    StrategyRun run;
    run.strategy = strategy;
    const TrainOptions* recipe = &opts.finetune;

    switch (strategy) {
        case TransferStrategy::Scratch:
        case TransferStrategy::UpperBound: {
            run.init.backbone = random_backbone(opts.arch, rng);
            run.init.head = random_head(novel, opts.arch.feature_channels, rng);
            if (strategy == TransferStrategy::UpperBound) {
                data.train = abundant->train;
                data.train.insert(data.train.end(), split.train.begin(), split.train.end());
                data.val = abundant->val;
                data.val.insert(data.val.end(), split.val.begin(), split.val.end());
                recipe = &opts.upper_bound;
            }
            break;
        }
        case TransferStrategy::ClassicFT:
            run.init.backbone = pretrained->backbone;
            run.init.head = random_head(novel, pretrained->backbone.arch.feature_channels, rng);
            break;
        case TransferStrategy::ComposedInit: {
            auto fit_subjects = split.train;
            if (opts.regression_uses_val) fit_subjects.insert(fit_subjects.end(), split.val.begin(), split.val.end());
            run.regression = fit_logit_regression(collect_logits(fit_subjects, *pretrained), opts.regression);
            run.init.backbone = pretrained->backbone;
            run.init.head = compose_head_init(run.regression->params, pretrained->head);
            break;
        }
        case TransferStrategy::WarmupFT: {
            auto warm = warmup_fit(*pretrained, data, opts.warmup, rng);
            run.init.backbone = pretrained->backbone;
            run.init.head = std::move(warm.head);
            run.warmup_history = std::move(warm.history);
            break;
        }
    }
    run.init.trained = false;
    auto trained = train(run.init, data, *recipe, all_params, rng);
    run.model = std::move(trained.model);
    run.history = std::move(trained.history);
    return run;
}

}  // namespace ttrx
