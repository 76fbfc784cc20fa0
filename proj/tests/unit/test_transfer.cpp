#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "transfer_checks.hpp"
#include "ttrx/errors.hpp"
#include "ttrx/metrics.hpp"
#include "ttrx/train.hpp"
#include "ttrx/transfer.hpp"

using namespace ttrx;
using ttrx::testing::random_tensor;

namespace {

struct Fixture {
    Cohort cohort;
    SegmentationModel pretrained;
};

CohortConfig fixture_cohort() {
    auto c = ttrx::testing::small_cohort(11);
    c.existing_train = 8;
    c.fewshot_train = 3;
    c.fewshot_val = 1;
    c.test = 3;
    return c;
}

// A briefly pretrained existing-tract model on a small cohort.
const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture out;
        out.cohort = generate_cohort(fixture_cohort());
        RngState rng(1);
        ArchitectureDescriptor arch;
        SegmentationModel init{random_backbone(arch, rng), random_head(6, arch.feature_channels, rng), false};
        TrainOptions o;
        o.learning_rate = 0.03;
        o.epochs = 100;
        o.batch = 4;
        out.pretrained = train(init, {out.cohort.existing.train, out.cohort.existing.val, LabelSet::Existing}, o,
                               all_params, rng)
                             .model;
        return out;
    }();
    return f;
}

StrategyOptions quick_options() {
    StrategyOptions o;
    o.finetune.epochs = 3;
    o.finetune.learning_rate = 0.01;
    o.finetune.batch = 1;
    o.warmup.epochs = 5;
    o.warmup.learning_rate = 0.1;
    o.warmup.batch = 1;
    o.upper_bound = o.finetune;
    return o;
}

double binary_entropy(double p) { return -(p * std::log(p) + (1 - p) * std::log(1 - p)); }

double fitted_probability(const FitResult& r, std::size_t row, const double* x, std::size_t m) {
    double z = r.params.bias[row];
    for (std::size_t i = 0; i < m; ++i) z += r.params.weight[row * m + i] * x[i];
    return ad::stable_sigmoid(z);
}

}  // namespace

TEST(Strategies, NamesRoundTrip) {
    for (auto s : kAllStrategies) EXPECT_EQ(parse_strategy(strategy_name(s)), s);
    EXPECT_EQ(parse_strategy("warmupft"), TransferStrategy::WarmupFT);
    EXPECT_THROW(parse_strategy("Ours3"), ConfigError);
    EXPECT_FALSE(needs_pretrained(TransferStrategy::Scratch));
    EXPECT_FALSE(needs_pretrained(TransferStrategy::UpperBound));
    EXPECT_TRUE(needs_pretrained(TransferStrategy::ComposedInit));
}

TEST(CollectLogits, CountsAndRecomputation) {
    const auto& f = fixture();
    const auto& subjects = f.cohort.fewshot.train;
    const auto pairs = collect_logits(subjects, f.pretrained);
    const std::size_t v = 32 * 32;
    EXPECT_EQ(pairs.existing, 6u);
    EXPECT_EQ(pairs.novel, 2u);
    ASSERT_EQ(pairs.count(), v * subjects.size());
    for (std::size_t s = 0; s < subjects.size(); ++s) {
        ad::Graph g;
        RngState unused(0);
        auto model = f.pretrained;
        const Tensor h = head_logits(extract_features(g, subjects[s].input, model.backbone, {}, unused), model.head).value();
        for (std::size_t p = 0; p < v; ++p) {
            for (std::size_t i = 0; i < 6; ++i)
                ASSERT_NEAR(pairs.logits[(s * v + p) * 6 + i], h[i * v + p], 1e-12);
            for (std::size_t j = 0; j < 2; ++j)
                ASSERT_EQ(pairs.labels[(s * v + p) * 2 + j], subjects[s].novel_labels[j * v + p]);
        }
    }
}

TEST(CollectLogits, ZeroHeadGivesBias) {
    auto model = fixture().pretrained;
    model.head.weight = Tensor(model.head.weight.shape());
    for (std::size_t i = 0; i < 6; ++i) model.head.bias[i] = 0.5 * static_cast<double>(i);
    const auto pairs = collect_logits({fixture().cohort.fewshot.train.front()}, model);
    for (std::size_t k = 0; k < pairs.count(); ++k)
        for (std::size_t i = 0; i < 6; ++i) ASSERT_EQ(pairs.logits[k * 6 + i], 0.5 * static_cast<double>(i));
}

TEST(CollectLogits, UntrainedModelIsAStateError) {
    auto model = fixture().pretrained;
    model.trained = false;
    EXPECT_THROW(collect_logits(fixture().cohort.fewshot.train, model), StateError);
    EXPECT_THROW(collect_logits({}, fixture().pretrained), DataError);
}

TEST(LogitRegression, IdentityCoupledTractIsRecovered) {
    // Novel label equals existing tract 1, whose logit separates the classes.
    RngState rng(2);
    LogitPairs train{3, 1, {}, {}}, held{3, 1, {}, {}};
    for (LogitPairs* set : {&train, &held})
        for (int k = 0; k < 2000; ++k) {
            const bool inside = rng.bernoulli(0.3);
            const double x1 = inside ? rng.uniform(0.5, 6.0) : rng.uniform(-6.0, -0.5);
            set->logits.insert(set->logits.end(), {rng.uniform(-4, 4), x1, rng.uniform(-4, 4)});
            set->labels.push_back(inside ? 1.0 : 0.0);
        }
    const auto r = fit_logit_regression(train);
    std::size_t correct = 0;
    for (std::size_t k = 0; k < held.count(); ++k)
        correct += (fitted_probability(r, 0, &held.logits[k * 3], 3) > 0.5) == (held.labels[k] == 1.0);
    EXPECT_GT(static_cast<double>(correct) / held.count(), 0.99);
    EXPECT_GT(std::abs(r.params.weight[1]), std::abs(r.params.weight[0]));
    EXPECT_GT(std::abs(r.params.weight[1]), std::abs(r.params.weight[2]));
    EXPECT_LT(r.final_loss[0], r.initial_loss[0]);
}

TEST(LogitRegression, IndependentLabelsGivePrevalence) {
    RngState rng(3);
    LogitPairs pairs{4, 1, {}, {}};
    double positives = 0;
    const int n = 20000;
    for (int k = 0; k < n; ++k) {
        for (int i = 0; i < 4; ++i) pairs.logits.push_back(rng.uniform(-3, 3));
        const bool y = rng.bernoulli(0.3);
        pairs.labels.push_back(y);
        positives += y;
    }
    const auto r = fit_logit_regression(pairs);
    const double prevalence = positives / n;
    EXPECT_NEAR(r.final_loss[0], binary_entropy(prevalence), 0.01);
    double mean_p = 0;
    for (int k = 0; k < n; ++k) mean_p += fitted_probability(r, 0, &pairs.logits[k * 4], 4);
    EXPECT_NEAR(mean_p / n, prevalence, 0.01);
}

TEST(LogitRegression, OneDimensionalSign) {
    LogitPairs pairs{1, 1, {-1.0, 1.0}, {0.0, 1.0}};
    const auto r = fit_logit_regression(pairs);
    EXPECT_GT(r.params.weight[0], 0.0);
    EXPECT_TRUE(r.degenerate_tracts.empty());
}

TEST(LogitRegression, ConstantLabelsAreDegenerate) {
    LogitPairs pairs{2, 2, {-1.0, 2.0, 1.0, 0.5, 0.0, -3.0}, {0.0, 1.0, 0.0, 1.0, 0.0, 1.0}};
    const auto r = fit_logit_regression(pairs);
    ASSERT_EQ(r.degenerate_tracts, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(r.params.bias[0], -15.0);
    EXPECT_EQ(r.params.bias[1], 15.0);
    for (double w : r.params.weight.data()) EXPECT_EQ(w, 0.0);
    EXPECT_THROW(fit_logit_regression(LogitPairs{}), DataError);
}

TEST(LogitRegression, LossNeverRisesAboveStart) {
    const auto pairs = collect_logits(fixture().cohort.fewshot.train, fixture().pretrained);
    const auto r = fit_logit_regression(pairs);
    for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_NEAR(r.initial_loss[j], std::log(2.0), 1e-12);
        EXPECT_LT(r.final_loss[j], r.initial_loss[j]);
    }
    FitOptions raw;
    raw.standardize = false;
    const auto r2 = fit_logit_regression(pairs, raw);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_LE(r2.final_loss[j], r2.initial_loss[j]);
}

TEST(Composition, IdentityRegressionIsExact) {
    RngState rng(4);
    HeadParams head{random_tensor({5, 16}, rng), random_tensor({5}, rng)};
    EXPECT_TRUE(ttrx::testing::identity_composition_is_exact(head));
    EXPECT_TRUE(ttrx::testing::identity_composition_is_exact(fixture().pretrained.head));
}

TEST(Composition, ZeroRegressionGivesItsBias) {
    RngState rng(5);
    HeadParams head{random_tensor({4, 16}, rng), random_tensor({4}, rng)};
    RegressionParams reg{Tensor(Shape{2, 4}), random_tensor({2}, rng)};
    const auto out = compose_head_init(reg, head);
    for (double w : out.weight.data()) EXPECT_EQ(w, 0.0);
    EXPECT_TRUE(bit_identical(out.bias, reg.bias));
}

TEST(Composition, MatchesMatrixProduct) {
    RngState rng(6);
    HeadParams head{random_tensor({4, 16}, rng), random_tensor({4}, rng)};
    RegressionParams reg{random_tensor({3, 4}, rng), random_tensor({3}, rng)};
    const auto out = compose_head_init(reg, head);
    ASSERT_EQ(out.weight.shape(), (Shape{3, 16}));
    for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t c = 0; c < 16; ++c) {
            long double acc = 0;
            for (std::size_t i = 0; i < 4; ++i) acc += static_cast<long double>(reg.weight[j * 4 + i]) * head.weight[i * 16 + c];
            EXPECT_NEAR(out.weight[j * 16 + c], static_cast<double>(acc), 1e-14);
        }
        long double b = reg.bias[j];
        for (std::size_t i = 0; i < 4; ++i) b += static_cast<long double>(reg.weight[j * 4 + i]) * head.bias[i];
        EXPECT_NEAR(out.bias[j], static_cast<double>(b), 1e-14);
    }
    RegressionParams wrong{random_tensor({3, 5}, rng), random_tensor({3}, rng)};
    EXPECT_THROW(compose_head_init(wrong, head), ShapeError);
}

TEST(Composition, LinearInRegressionWeight) {
    RngState rng(7);
    HeadParams head{random_tensor({4, 16}, rng), random_tensor({4}, rng)};
    const Tensor w1 = random_tensor({2, 4}, rng), w2 = random_tensor({2, 4}, rng);
    const double alpha = 0.7, beta = -1.3;
    Tensor mix(Shape{2, 4});
    for (std::size_t i = 0; i < 8; ++i) mix[i] = alpha * w1[i] + beta * w2[i];
    const Tensor zero(Shape{2});
    const auto a = compose_head_init({w1, zero}, head), b = compose_head_init({w2, zero}, head),
               c = compose_head_init({mix, zero}, head);
    for (std::size_t i = 0; i < c.weight.size(); ++i)
        EXPECT_NEAR(c.weight[i], alpha * a.weight[i] + beta * b.weight[i], 1e-12);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(c.bias[i], alpha * a.bias[i] + beta * b.bias[i], 1e-12);
}

TEST(Composition, ComposedHeadEqualsRegressionOnLogits) {
    const auto& f = fixture();
    const auto fit = fit_logit_regression(collect_logits(f.cohort.fewshot.train, f.pretrained));
    std::vector<SyntheticSubject> five(f.cohort.existing.train.begin(), f.cohort.existing.train.begin() + 5);
    EXPECT_LT(ttrx::testing::composition_identity_error(f.pretrained, fit.params, five), 1e-10);
    RngState rng(8);
    RegressionParams random{random_tensor({2, 6}, rng), random_tensor({2}, rng)};
    EXPECT_LT(ttrx::testing::composition_identity_error(f.pretrained, random, five), 1e-12);
}

TEST(Warmup, LeavesBackboneBitIdentical) {
    const auto& f = fixture();
    const auto before = f.pretrained.backbone;
    TrainOptions o = quick_options().warmup;
    RngState rng(9);
    const auto w = warmup_fit(f.pretrained, {f.cohort.fewshot.train, f.cohort.fewshot.val, LabelSet::Novel}, o, rng);
    EXPECT_TRUE(ttrx::testing::same_backbone(before, f.pretrained.backbone));
    EXPECT_EQ(w.head.weight.shape(), (Shape{2, 16}));
    EXPECT_GE(w.history.best_epoch, 1u);
}

TEST(Warmup, LearnsALabelEqualToAnExistingTract) {
    const auto& f = fixture();
    std::vector<SyntheticSubject> subjects(f.cohort.existing.train.begin(), f.cohort.existing.train.begin() + 3);
    for (auto& s : subjects) {
        const std::size_t v = 32 * 32;
        s.novel_labels = Tensor(Shape{1, 32, 32});
        for (std::size_t p = 0; p < v; ++p) s.novel_labels[p] = s.existing_labels[2 * v + p];
    }
    TrainOptions o;
    o.learning_rate = 0.1;
    o.epochs = 100;
    o.batch = 1;
    o.select_on = SelectOn::TrainingDice;
    RngState rng(10);
    const auto w = warmup_fit(f.pretrained, {subjects, {}, LabelSet::Novel}, o, rng);
    SegmentationModel m{f.pretrained.backbone, w.head, true};
    EXPECT_GT(mean_dice(m, subjects, LabelSet::Novel), 0.95);
}

TEST(Warmup, ReachesNoHigherLossThanComposedHead) {
    const auto& f = fixture();
    const auto& train_set = f.cohort.fewshot.train;
    const auto fit = fit_logit_regression(collect_logits(train_set, f.pretrained));
    const SegmentationModel composed{f.pretrained.backbone, compose_head_init(fit.params, f.pretrained.head), true};
    TrainOptions o;
    o.learning_rate = 0.1;
    o.epochs = 100;
    o.batch = 1;
    o.select_on = SelectOn::TrainingDice;
    RngState rng(11);
    const auto w = warmup_fit(f.pretrained, {train_set, {}, LabelSet::Novel}, o, rng);
    const SegmentationModel warm{f.pretrained.backbone, w.head, true};
    EXPECT_LE(dataset_loss(warm, train_set, LabelSet::Novel), dataset_loss(composed, train_set, LabelSet::Novel));
}

TEST(RunStrategy, DeterministicForEveryStrategy) {
    const auto& f = fixture();
    const auto opts = quick_options();
    for (auto s : kAllStrategies) {
        auto once = [&] {
            RngState rng(12);
            return run_strategy(s, &f.pretrained, f.cohort.fewshot, &f.cohort.existing, opts, rng);
        };
        const auto a = once(), b = once();
        auto pa = parameters(const_cast<SegmentationModel&>(a.model)), pb = parameters(const_cast<SegmentationModel&>(b.model));
        for (std::size_t i = 0; i < pa.size(); ++i)
            EXPECT_TRUE(bit_identical(*pa[i].tensor, *pb[i].tensor)) << strategy_name(s) << " " << pa[i].name;
    }
}

TEST(RunStrategy, ZeroEpochsReturnInitialization) {
    const auto& f = fixture();
    auto opts = quick_options();
    opts.finetune.epochs = 0;
    for (auto s : {TransferStrategy::ClassicFT, TransferStrategy::ComposedInit, TransferStrategy::WarmupFT}) {
        RngState rng(13);
        const auto run = run_strategy(s, &f.pretrained, f.cohort.fewshot, nullptr, opts, rng);
        EXPECT_TRUE(ttrx::testing::same_backbone(run.model.backbone, run.init.backbone));
        EXPECT_TRUE(bit_identical(run.model.head.weight, run.init.head.weight));
        EXPECT_TRUE(run.history.loss.empty());
    }
}

TEST(RunStrategy, StagingContracts) {
    const auto& f = fixture();
    const auto opts = quick_options();
    RngState rng(14);
    const auto warm = run_strategy(TransferStrategy::WarmupFT, &f.pretrained, f.cohort.fewshot, nullptr, opts, rng);
    EXPECT_TRUE(ttrx::testing::same_backbone(warm.init.backbone, f.pretrained.backbone));
    ASSERT_TRUE(warm.warmup_history.has_value());
    EXPECT_FALSE(warm.warmup_history->loss.empty());

    RngState rng2(14);
    const auto comp = run_strategy(TransferStrategy::ComposedInit, &f.pretrained, f.cohort.fewshot, nullptr, opts, rng2);
    ASSERT_TRUE(comp.regression.has_value());
    const auto expected = compose_head_init(comp.regression->params, f.pretrained.head);
    EXPECT_TRUE(bit_identical(comp.init.head.weight, expected.weight));
    EXPECT_TRUE(bit_identical(comp.init.head.bias, expected.bias));
    EXPECT_TRUE(ttrx::testing::same_backbone(comp.init.backbone, f.pretrained.backbone));
}

TEST(RunStrategy, ComposedInitStartsBelowClassicFineTuning) {
    const auto& f = fixture();
    auto opts = quick_options();
    opts.finetune.epochs = 0;
    RngState r1(15), r2(15);
    const auto classic = run_strategy(TransferStrategy::ClassicFT, &f.pretrained, f.cohort.fewshot, nullptr, opts, r1);
    const auto composed = run_strategy(TransferStrategy::ComposedInit, &f.pretrained, f.cohort.fewshot, nullptr, opts, r2);
    EXPECT_LT(dataset_loss(composed.init, f.cohort.fewshot.val, LabelSet::Novel),
              dataset_loss(classic.init, f.cohort.fewshot.val, LabelSet::Novel));
}

TEST(RunStrategy, MissingInputsAreReported) {
    const auto& f = fixture();
    const auto opts = quick_options();
    RngState rng(16);
    EXPECT_THROW(run_strategy(TransferStrategy::ClassicFT, nullptr, f.cohort.fewshot, nullptr, opts, rng), ConfigError);
    EXPECT_THROW(run_strategy(TransferStrategy::UpperBound, nullptr, f.cohort.fewshot, nullptr, opts, rng), ConfigError);
    auto untrained = f.pretrained;
    untrained.trained = false;
    EXPECT_THROW(run_strategy(TransferStrategy::WarmupFT, &untrained, f.cohort.fewshot, nullptr, opts, rng), StateError);
    FewShotSplit empty;
    EXPECT_THROW(run_strategy(TransferStrategy::Scratch, nullptr, empty, nullptr, opts, rng), DataError);
}

TEST(RunStrategy, UpperBoundTrainsOnAbundantAndFewShotScans) {
    const auto& f = fixture();
    auto opts = quick_options();
    opts.upper_bound.epochs = 1;
    opts.upper_bound.batch = 0;
    RngState rng(17);
    const auto run = run_strategy(TransferStrategy::UpperBound, nullptr, f.cohort.fewshot, &f.cohort.existing, opts, rng);
    EXPECT_EQ(run.history.loss.size(), 1u);
    // The recorded epoch loss averages over every abundant and few-shot scan.
    EXPECT_TRUE(std::isfinite(run.history.loss[0]));
}
