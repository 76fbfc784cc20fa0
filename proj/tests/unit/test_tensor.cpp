#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ttrx/errors.hpp"
#include "ttrx/tensor.hpp"

using namespace ttrx;

TEST(Tensor, ConstructionAndShape) {
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.dim(1), 3u);
    EXPECT_EQ(shape_numel(Shape{2, 3, 4}), 24u);
    EXPECT_EQ(shape_string(Shape{2, 3}), "[2x3]");
    for (double v : t.data()) EXPECT_EQ(v, 1.5);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
    Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    const Tensor r = t.reshaped(Shape{3, 2});
    EXPECT_EQ(r.values(), t.values());
    EXPECT_EQ(r.shape(), (Shape{3, 2}));
    EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
}

TEST(Tensor, GradBufferLifecycle) {
    Tensor t(Shape{3}, 2.0);
    EXPECT_FALSE(t.has_grad());
    t.ensure_grad();
    ASSERT_TRUE(t.has_grad());
    t.grad()[1] = 5.0;
    t.ensure_grad();
    EXPECT_EQ(t.grad()[1], 5.0);
    t.zero_grad();
    EXPECT_EQ(t.grad()[1], 0.0);
    t.clear_grad();
    EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, BitIdentityDistinguishesSignedZero) {
    Tensor a(Shape{1}, 0.0), b(Shape{1}, -0.0);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(bit_identical(a, b));
    Tensor n1(Shape{1}, std::numeric_limits<double>::quiet_NaN());
    EXPECT_TRUE(bit_identical(n1, n1));
    EXPECT_FALSE(n1.all_finite());
    EXPECT_TRUE(a.all_finite());
}
