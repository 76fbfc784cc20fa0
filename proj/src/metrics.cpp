#include "ttrx/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ttrx/errors.hpp"

namespace ttrx {

Tensor binarize(const Tensor& probabilities, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ParameterError("binarize: threshold must lie in (0, 1), got " + std::to_string(threshold));
    Tensor out(probabilities.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probabilities[i] > threshold ? 1.0 : 0.0;
    return out;
}

namespace {

struct Counts {
    double pred = 0, ref = 0, both = 0;
};

Counts count(std::span<const double> pred, std::span<const double> ref) {
    if (pred.size() != ref.size())
        throw ShapeError("mask sizes differ: " + std::to_string(pred.size()) + " vs " + std::to_string(ref.size()));
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0.0, r = ref[i] != 0.0;
        c.pred += p;
        c.ref += r;
        c.both += p && r;
    }
    return c;
}

void require_same_shape(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mask shapes differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

struct DiffStats {
    double n, mean, sd;
};

DiffStats paired_differences(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("paired samples differ in length: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.size() < 2) throw DataError("paired statistics need at least two pairs");
    const double n = static_cast<double>(a.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    return {n, mean, std::sqrt(ss / (n - 1.0))};
}

double beta_continued_fraction(double x, double a, double b) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double dice(std::span<const double> pred, std::span<const double> ref) {
    const Counts c = count(pred, ref);
    if (c.pred + c.ref == 0.0) return 1.0;
    return 2.0 * c.both / (c.pred + c.ref);
}

double dice(const Tensor& pred, const Tensor& ref) {
    require_same_shape(pred, ref);
    return dice(pred.data(), ref.data());
}

double rvd(std::span<const double> pred, std::span<const double> ref) {
    const Counts c = count(pred, ref);
    if (c.ref == 0.0) throw UndefinedMetricError("rvd: reference mask is empty");
    return std::abs(c.pred - c.ref) / c.ref;
}

double rvd(const Tensor& pred, const Tensor& ref) {
    require_same_shape(pred, ref);
    return rvd(pred.data(), ref.data());
}

double regularized_incomplete_beta(double x, double a, double b) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(x, a, b) / a;
    return 1.0 - std::exp(log_front) * beta_continued_fraction(1.0 - x, b, a) / b;
}

double student_t_two_sided_p(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    return regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5);
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    const DiffStats s = paired_differences(a, b);
    if (s.sd == 0.0) throw DegenerateError("paired t-test: differences have zero variance");
    const double t = s.mean / (s.sd / std::sqrt(s.n));
    const double df = s.n - 1.0;
    return {t, student_t_two_sided_p(t, df), df};
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
    const DiffStats s = paired_differences(a, b);
    if (s.sd == 0.0) throw DegenerateError("cohen's d: differences have zero variance");
    return s.mean / s.sd;
}

EvalReport evaluate_predictions(const std::vector<Tensor>& masks, const std::vector<SyntheticSubject>& subjects,
                                LabelSet labels) {
    if (subjects.empty()) throw DataError("evaluate: no subjects");
    if (masks.size() != subjects.size()) throw ContractError("evaluate: one prediction per subject required");
    const std::size_t t = labels_of(subjects.front(), labels).dim(0);
    EvalReport r;
    r.dice.assign(t, {});
    r.rvd.assign(t, {});
    for (std::size_t s = 0; s < subjects.size(); ++s) {
        const Tensor& ref = labels_of(subjects[s], labels);
        require_same_shape(masks[s], ref);
        r.subject_ids.push_back(subjects[s].id);
        const std::size_t v = ref.size() / t;
        for (std::size_t k = 0; k < t; ++k) {
            const auto p = masks[s].data().subspan(k * v, v);
            const auto q = ref.data().subspan(k * v, v);
            r.dice[k].push_back(dice(p, q));
            r.rvd[k].push_back(rvd(p, q));
        }
    }
    const double ns = static_cast<double>(subjects.size());
    for (std::size_t k = 0; k < t; ++k) {
        double sd = 0.0, sr = 0.0;
        for (std::size_t s = 0; s < subjects.size(); ++s) {
            sd += r.dice[k][s];
            sr += r.rvd[k][s];
        }
        r.tract_mean_dice.push_back(sd / ns);
        r.tract_mean_rvd.push_back(sr / ns);
    }
    double md = 0.0, mr = 0.0;
    for (std::size_t k = 0; k < t; ++k) {
        md += r.tract_mean_dice[k];
        mr += r.tract_mean_rvd[k];
    }
    r.mean_dice = md / static_cast<double>(t);
    r.mean_rvd = mr / static_cast<double>(t);
    return r;
}

EvalReport evaluate_model(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects,
                          LabelSet labels, double threshold) {
    std::vector<Tensor> masks;
    masks.reserve(subjects.size());
    for (const auto& s : subjects) masks.push_back(binarize(compute_probabilities(s.input, model), threshold));
    return evaluate_predictions(masks, subjects, labels);
}

double mean_dice(const SegmentationModel& model, const std::vector<SyntheticSubject>& subjects, LabelSet labels,
                 double threshold) {
    if (subjects.empty()) throw DataError("mean_dice: no subjects");
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : subjects) {
        const Tensor mask = binarize(compute_probabilities(s.input, model), threshold);
        const Tensor& ref = labels_of(s, labels);
        const std::size_t t = ref.dim(0), v = ref.size() / t;
        for (std::size_t k = 0; k < t; ++k, ++n) total += dice(mask.data().subspan(k * v, v), ref.data().subspan(k * v, v));
    }
    return total / static_cast<double>(n);
}

}  // namespace ttrx
