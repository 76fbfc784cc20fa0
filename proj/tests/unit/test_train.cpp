#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "ttrx/errors.hpp"
#include "ttrx/metrics.hpp"
#include "ttrx/train.hpp"

using namespace ttrx;

namespace {

SegmentationModel fresh_model(std::size_t tracts, std::uint64_t seed) {
    RngState rng(seed);
    ArchitectureDescriptor arch;
    return {random_backbone(arch, rng), random_head(tracts, arch.feature_channels, rng), false};
}

bool same_parameters(SegmentationModel a, SegmentationModel b) {
    auto pa = parameters(a), pb = parameters(b);
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bit_identical(*pa[i].tensor, *pb[i].tensor)) return false;
    return true;
}

const Cohort& small() {
    static const Cohort c = generate_cohort(ttrx::testing::small_cohort(21));
    return c;
}

// One tract that is exactly the positive half of input channel 0.
SyntheticSubject separable_subject() {
    SyntheticSubject s;
    const std::size_t h = 16, w = 16, v = h * w;
    s.input = Tensor(Shape{9, h, w});
    s.novel_labels = Tensor(Shape{1, h, w});
    s.existing_labels = Tensor(Shape{1, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = x - 7.5, dy = y - 7.5;
            const bool inside = dx * dx + dy * dy < 25.0;
            s.input[y * w + x] = inside ? 1.0 : -1.0;
            s.novel_labels[y * w + x] = inside ? 1.0 : 0.0;
        }
    (void)v;
    return s;
}

}  // namespace

TEST(Adamax, MatchesScalarReferenceOverTenSteps) {
    // Minimize (x - 3)^2 + (y + 1)^4 from (0, 0).
    Tensor x(Shape{2}, 0.0);
    AdamaxState state;
    const AdamaxOptions opts{0.1, 0.9, 0.999, 1e-8};
    long double rx[2] = {0, 0}, m[2] = {0, 0}, u[2] = {0, 0};
    for (int step = 1; step <= 10; ++step) {
        const std::vector<double> g{2.0 * (x[0] - 3.0), 4.0 * std::pow(x[1] + 1.0, 3)};
        Tensor* params[] = {&x};
        const std::span<const double> grads[] = {g};
        adamax_step(params, grads, state, opts);

        const long double rg[2] = {2.0L * (rx[0] - 3.0L), 4.0L * (rx[1] + 1.0L) * (rx[1] + 1.0L) * (rx[1] + 1.0L)};
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9L * m[i] + 0.1L * rg[i];
            u[i] = std::max(0.999L * u[i], std::fabs(rg[i]));
            rx[i] -= (0.1L / (1.0L - std::pow(0.9L, step))) * m[i] / (u[i] + 1e-8L);
        }
        EXPECT_NEAR(x[0], static_cast<double>(rx[0]), 1e-12) << "step " << step;
        EXPECT_NEAR(x[1], static_cast<double>(rx[1]), 1e-12) << "step " << step;
    }
    EXPECT_EQ(state.step, 10u);
}

TEST(Adamax, FirstStepMovesByLearningRate) {
    Tensor x(Shape{3}, std::vector<double>{1.0, 1.0, 1.0});
    AdamaxState state;
    const std::vector<double> g{0.5, -2.0, 0.0};
    Tensor* params[] = {&x};
    const std::span<const double> grads[] = {g};
    adamax_step(params, grads, state, AdamaxOptions{0.01, 0.9, 0.999, 1e-300});
    EXPECT_NEAR(x[0], 0.99, 1e-15);
    EXPECT_NEAR(x[1], 1.01, 1e-15);
    EXPECT_EQ(x[2], 1.0);
}

TEST(Adamax, SizeMismatchThrows) {
    Tensor x(Shape{3});
    AdamaxState state;
    const std::vector<double> g{1.0};
    Tensor* params[] = {&x};
    const std::span<const double> grads[] = {g};
    EXPECT_THROW(adamax_step(params, grads, state, {}), ShapeError);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
    const auto init = fresh_model(2, 1);
    TrainOptions o;
    o.epochs = 0;
    RngState rng(1);
    const auto r = train(init, {small().fewshot.train, small().fewshot.val, LabelSet::Novel}, o, all_params, rng);
    EXPECT_TRUE(same_parameters(r.model, init));
    EXPECT_TRUE(r.history.loss.empty());
    EXPECT_EQ(r.history.best_epoch, 0u);
}

TEST(Train, FilterExcludingEverythingLeavesParametersBitIdentical) {
    const auto init = fresh_model(2, 2);
    TrainOptions o;
    o.epochs = 3;
    RngState rng(2);
    const auto r = train(init, {small().fewshot.train, {}, LabelSet::Novel}, o,
                         [](std::string_view) { return false; }, rng);
    EXPECT_TRUE(same_parameters(r.model, init));
    EXPECT_EQ(r.history.loss.size(), 3u);
}

TEST(Train, FilterComplementIsUnchanged) {
    const auto init = fresh_model(2, 3);
    TrainOptions o;
    o.epochs = 3;
    o.learning_rate = 0.05;
    RngState rng(3);
    auto r = train(init, {small().fewshot.train, {}, LabelSet::Novel}, o, head_only, rng);
    auto before = init;
    auto pa = parameters(r.model), pb = parameters(before);
    bool head_moved = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (head_only(pa[i].name))
            head_moved |= !bit_identical(*pa[i].tensor, *pb[i].tensor);
        else
            EXPECT_TRUE(bit_identical(*pa[i].tensor, *pb[i].tensor)) << pa[i].name;
    }
    EXPECT_TRUE(head_moved);
}

TEST(Train, SeparableSingleSubjectIsLearned) {
    const auto s = separable_subject();
    TrainOptions o;
    o.epochs = 200;
    o.learning_rate = 0.01;
    o.dropout_rate = 0.0;
    o.select_on = SelectOn::TrainingDice;
    RngState rng(4);
    const auto r = train(fresh_model(1, 4), {{s}, {}, LabelSet::Novel}, o, all_params, rng);
    EXPECT_GT(mean_dice(r.model, {s}, LabelSet::Novel), 0.99);
}

TEST(Train, ReturnedModelReproducesRecordedBestDice) {
    TrainOptions o;
    o.epochs = 8;
    o.learning_rate = 0.01;
    o.batch = 1;
    RngState rng(5);
    const auto& c = small();
    const auto r = train(fresh_model(2, 5), {c.fewshot.train, c.fewshot.val, LabelSet::Novel}, o, all_params, rng);
    const auto& d = r.history.selection_dice;
    ASSERT_EQ(d.size(), 8u);
    ASSERT_GE(r.history.best_epoch, 1u);
    const double best = *std::max_element(d.begin(), d.end());
    const auto first = std::find(d.begin(), d.end(), best) - d.begin() + 1;
    EXPECT_EQ(static_cast<std::size_t>(first), r.history.best_epoch);
    EXPECT_NEAR(mean_dice(r.model, c.fewshot.val, LabelSet::Novel), best, 1e-9);
    EXPECT_TRUE(r.model.trained);
}

TEST(Train, FullBatchLossIsNonIncreasingAtSmallStep) {
    TrainOptions o;
    o.epochs = 15;
    o.learning_rate = 1e-4;
    o.dropout_rate = 0.0;
    o.batch = 0;
    RngState rng(6);
    const auto& c = small();
    const auto r = train(fresh_model(6, 6), {c.existing.train, c.existing.val, LabelSet::Existing}, o, all_params, rng);
    for (std::size_t e = 1; e < r.history.loss.size(); ++e) EXPECT_LE(r.history.loss[e], r.history.loss[e - 1]);
    EXPECT_FALSE(r.history.convergence_warning);
}

TEST(Train, RunsAreDeterministic) {
    TrainOptions o;
    o.epochs = 3;
    o.batch = 1;
    auto run = [&] {
        RngState rng(7);
        return train(fresh_model(2, 7), {small().fewshot.train, {}, LabelSet::Novel}, o, all_params, rng);
    };
    const auto a = run(), b = run();
    EXPECT_TRUE(same_parameters(a.model, b.model));
    EXPECT_EQ(a.history.loss, b.history.loss);
}

TEST(Train, EmptySplitAndNonFiniteLossAreReported) {
    RngState rng(8);
    TrainOptions o;
    o.epochs = 2;
    EXPECT_THROW(train(fresh_model(2, 8), {{}, {}, LabelSet::Novel}, o, all_params, rng), DataError);
    auto s = small().fewshot.train.front();
    s.input[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(fresh_model(2, 8), {{s}, {}, LabelSet::Novel}, o, all_params, rng);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.epoch, 1);
    }
}

TEST(Train, InvalidOptionsAreConfigErrors) {
    RngState rng(9);
    auto bad = [](auto mutate) {
        TrainOptions o;
        mutate(o);
        return o;
    };
    const TrainData d{small().fewshot.train, {}, LabelSet::Novel};
    const auto m = fresh_model(2, 9);
    EXPECT_THROW(train(m, d, bad([](TrainOptions& o) { o.learning_rate = 0; }), all_params, rng), ConfigError);
    EXPECT_THROW(train(m, d, bad([](TrainOptions& o) { o.dropout_rate = 1; }), all_params, rng), ConfigError);
    EXPECT_THROW(train(m, d, bad([](TrainOptions& o) { o.threshold = 1; }), all_params, rng), ConfigError);
}

TEST(Train, DatasetLossIsMeanOfSubjectLosses) {
    const auto m = fresh_model(2, 10);
    const auto& subjects = small().fewshot.train;
    double total = 0;
    for (const auto& s : subjects) total += dataset_loss(m, {s}, LabelSet::Novel);
    EXPECT_NEAR(dataset_loss(m, subjects, LabelSet::Novel), total / subjects.size(), 1e-14);
    EXPECT_THROW(dataset_loss(m, {}, LabelSet::Novel), DataError);
}
