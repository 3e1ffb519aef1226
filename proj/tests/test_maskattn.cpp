#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tfma/maskattn.hpp"

using namespace tfma;
using namespace tfma::maskattn;
using tfma::testing::random_tensor;

namespace {

// Independent restatement of the piecewise surrogate derivative.
double reference_derivative(double z) {
  if (-0.4 <= z && z <= 0.4) return 2.0 - 4.0 * std::fabs(z);
  if (0.4 <= std::fabs(z) && std::fabs(z) <= 1.0) return 0.4;
  return 0.0;
}

double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

}  // namespace

TEST(Step, ForwardAnchors) {
  Tensor out = step_forward(Tensor::vector({0.3, -0.2, 0.0}));
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_EQ(out[2], 1.0);
}

TEST(Step, BackwardAnchors) {
  const std::vector<double> z{0.0, 0.2, -0.2, 0.4, -0.4, 0.7, -0.7, 1.0, -1.0, 1.5, -1.5};
  const std::vector<double> expected{2.0, 1.2, 1.2, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.0, 0.0};
  Tensor out = step_backward(Tensor::vector(z), Tensor(Shape{z.size()}, 1.0));
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(out[i], expected[i], 1e-15) << z[i];
  EXPECT_THROW(step_backward(Tensor::vector({1, 2}), Tensor::vector({1})), ShapeError);
}

TEST(Step, EstimatorExactOnUniformSamples) {
  Rng rng(1234);
  std::vector<double> z(1000);
  for (double& v : z) v = rng.uniform(-2.0, 2.0);
  Tensor up(Shape{z.size()}, 1.0);
  Tensor out = step_backward(Tensor::vector(z), up);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(out[i], reference_derivative(z[i]));
}

TEST(Step, TapeUsesSurrogateDerivative) {
  Tensor z = Tensor::vector({0.2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(mul_scalar(binary_step(z), 3.0));
  EXPECT_EQ(loss.item(), 3.0);
  tape.backward(loss);
  EXPECT_NEAR(z.grad()[0], 3.0 * 1.2, 1e-15);
}

TEST(Mask, Anchors) {
  EXPECT_EQ(mask(Tensor(Shape{1, 1}, 1.0), Tensor::vector({0.0}))[0], 1.0);
  EXPECT_EQ(mask(Tensor(Shape{1, 1}, 0.0), Tensor::vector({0.5}))[0], 0.0);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double t = rng.uniform(-2, 2);
    EXPECT_EQ(mask(Tensor(Shape{1, 1}, t), Tensor::vector({std::fabs(t)}))[0], 1.0);
  }
  EXPECT_THROW(mask(Tensor(Shape{2, 3, 2, 2}, 1.0), Tensor::vector({0.0, 0.0})), ShapeError);
}

TEST(Mask, BinaryAndMatchesThresholdRule) {
  Rng rng(5);
  Tensor x = random_tensor({3, 4, 5, 5}, rng);
  Tensor theta = random_tensor({4}, rng, -0.5, 1.5);
  Tensor m = mask(x, theta);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / 25) % 4;
    ASSERT_TRUE(m[i] == 0.0 || m[i] == 1.0);
    EXPECT_EQ(m[i], std::fabs(x[i]) >= theta[c] ? 1.0 : 0.0);
  }
}

TEST(Mask, RaisingThresholdsNeverAddsOnes) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor theta = random_tensor({3}, rng, -1.0, 1.0);
    Tensor raised = theta.clone();
    for (double& t : raised.data()) t += rng.uniform(0.0, 1.0);
    double before = 0, after = 0;
    const Tensor m0 = mask(x, theta), m1 = mask(x, raised);
    for (double v : m0.data()) before += v;
    for (double v : m1.data()) after += v;
    EXPECT_LE(after, before);
  }
}

TEST(Mask, BackwardFollowsChainRule) {
  Rng rng(8);
  Tensor x = random_tensor({2, 3, 2, 2}, rng);
  Tensor theta = random_tensor({3}, rng, -0.5, 1.0);
  Tensor up = random_tensor({2, 3, 2, 2}, rng);
  x.set_requires_grad(true);
  theta.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(mul(mask(x, theta), up));
  tape.backward(loss);
  std::vector<double> theta_grad(3, 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / 4) % 3;
    const double u = std::fabs(x[i]) - theta[c];
    const double phi = logistic(u);
    const double sign = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0);
    const double chain = reference_derivative(phi - 0.5) * phi * (1.0 - phi) * up[i];
    EXPECT_NEAR(x.grad()[i], chain * sign, 1e-14);
    theta_grad[c] -= chain;
  }
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(theta.grad()[c], theta_grad[c], 1e-13);
}

TEST(Mask, SmoothChainFactorsMatchFiniteDifferences) {
  // d/dx sigmoid(|x| - theta) = sigmoid' * sign(x); d/dtheta = -sigmoid'.
  Rng rng(10);
  Tensor x = random_tensor({1, 2, 3, 3}, rng);
  Tensor theta = random_tensor({2}, rng);
  auto smooth = [](std::vector<Tensor>& in) { return sum(sigmoid(sub(tfma::abs(in[0]), in[1]))); };
  EXPECT_LE(tfma::testing::max_grad_error(smooth, {x, theta}), 1e-6);
}

TEST(AttentionBlock, HugeThresholdGivesIdentity) {
  Rng rng(12);
  AttentionResidualBlock block({4, 1e6, true}, rng);
  Tensor x = random_tensor({2, 4, 5, 5}, rng);
  Tensor out = attention_residual_forward(x, block, Mode::train);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
  EXPECT_EQ(block.occupancy(), 0.0);
}

TEST(AttentionBlock, ZeroKernelGivesIdentity) {
  Rng rng(13);
  AttentionResidualBlock block({3, 0.0, true}, rng);
  for (double& k : block.kernel().data()) k = 0.0;
  Tensor x = random_tensor({1, 3, 6, 6}, rng);
  Tensor out = attention_residual_forward(x, block, Mode::train);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(AttentionBlock, MatchesHandComposition) {
  Rng rng(14);
  AttentionResidualBlock block({3, 0.0, true}, rng);
  for (double& t : block.threshold().data()) t = rng.uniform(0.0, 1.0);
  Tensor x = random_tensor({2, 3, 5, 5}, rng, -1.0, 1.0);
  Tensor conv = block.conv_branch(x, Mode::eval);
  Tensor m = mask(x, block.threshold());
  Tensor out = attention_residual_forward(x, block, Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], conv[i] * m[i] + x[i]);
}

TEST(AttentionBlock, AllOnesMaskIsPlainResidual) {
  Rng rng(15);
  Rng twin(15);
  AttentionResidualBlock masked({3, -1e6, true}, rng);
  AttentionResidualBlock plain({3, 0.0, false}, twin);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor a = masked.forward(x, Mode::eval);
  Tensor b = plain.forward(x, Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_EQ(masked.occupancy(), 1.0);
}

TEST(AttentionBlock, RejectsWrongChannelCount) {
  Rng rng(16);
  AttentionResidualBlock block({3, 0.0, true}, rng);
  EXPECT_THROW(block.forward(Tensor(Shape{1, 4, 4, 4}), Mode::eval), ShapeError);
}

TEST(Regularizer, Anchors) {
  MaskThresholds zeros{{Tensor(Shape{4}, 0.0), Tensor(Shape{4}, 0.0)}};
  EXPECT_DOUBLE_EQ(threshold_regularizer(zeros).item(), 8.0);
  MaskThresholds half{{Tensor::vector({std::log(2.0)})}};
  EXPECT_NEAR(threshold_regularizer(half).item(), 0.5, 1e-15);
  MaskThresholds grid{{Tensor::vector({0.0, 1.0, -1.0})}};
  EXPECT_NEAR(threshold_regularizer(grid).item(), 4.086161269630487, 1e-14);
  EXPECT_EQ(threshold_regularizer(MaskThresholds{}).item(), 0.0);
}

TEST(Regularizer, GradientPushesThresholdsUp) {
  Tensor theta = Tensor::vector({-0.5, 0.0, 2.0}, true);
  MaskThresholds th{{theta}};
  Tape tape;
  TapeScope scope(tape);
  Tensor r = threshold_regularizer(th);
  tape.backward(r);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(theta.grad()[i], -std::exp(-theta[i]), 1e-15);
}
