#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tfma/backbone.hpp"

using namespace tfma;
using namespace tfma::backbone;
using tfma::testing::random_tensor;
using tfma::testing::rel_error;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.input_channels = 3;
  c.stem_channels = 4;
  c.stages = {{1, 4, true}, {1, 6, true}};
  return c;
}

void perturb_norms(Backbone& net, Rng& rng) {
  auto jitter = [&](RunningStats& s) {
    for (double& m : s.mean) m = rng.uniform(-0.2, 0.2);
    for (double& v : s.var) v = rng.uniform(0.5, 2.0);
  };
  for (std::size_t s = 0; s < net.config().stages.size(); ++s) {
    if (net.has_transition(s)) jitter(net.transition(s).stats());
    for (std::size_t b = 0; b < net.config().stages[s].blocks; ++b) jitter(net.block(s, b).stats());
  }
  jitter(net.head_stats());
}

}  // namespace

TEST(Backbone, SuppressedMasksEqualHandComposition) {
  BackboneConfig cfg;
  cfg.init_threshold = 1e6;
  Rng rng(1);
  Backbone net(cfg, rng);
  perturb_norms(net, rng);
  const Tensor x = random_tensor(Shape{2, 7, 16, 16}, rng, 0, 1);

  NoGradScope no_grad;
  const Tensor out = net.forward(x, Mode::eval);
  Tensor h = conv2d(x, net.stem().kernel(), cfg.stem_stride, 1);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (!net.has_transition(s)) continue;
    ConvUnit& t = net.transition(s);
    h = conv2d(relu(channel_norm(h, t.scale(), t.shift(), t.stats(), Mode::eval)), t.kernel(), t.stride(), 1);
  }
  const Tensor ref = global_avg_pool(relu(channel_norm(h, net.head_scale(), net.head_shift(), net.head_stats(), Mode::eval)));
  ASSERT_EQ(out.shape(), ref.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], ref[i]);
  for (double o : net.occupancy()) EXPECT_EQ(o, 0.0);
}

TEST(Backbone, IdenticalInputsGiveIdenticalRows) {
  Rng rng(2);
  Backbone net(BackboneConfig{}, rng);
  const Tensor one = random_tensor(Shape{1, 7, 16, 16}, rng, 0, 1);
  Tensor two(Shape{2, 7, 16, 16});
  for (std::size_t i = 0; i < one.numel(); ++i) two[i] = two[one.numel() + i] = one[i];
  NoGradScope no_grad;
  const Tensor out = net.forward(two, Mode::eval);
  const std::size_t d = out.dim(1);
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(out[j], out[d + j]);
}

TEST(Backbone, StemGradientMatchesFiniteDifferences) {
  BackboneConfig cfg = small_config();
  cfg.init_threshold = -1e6;  // masks always open with zero surrogate slope
  Rng rng(3);
  Backbone net(cfg, rng);
  const Tensor x = random_tensor(Shape{2, 3, 16, 16}, rng, 0, 1);
  Tensor& k = net.stem().kernel();
  k.clear_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(net.forward(x, Mode::train));
    tape.backward(loss);
  }
  const std::vector<double> analytic(k.grad().begin(), k.grad().end());
  NoGradScope no_grad;
  const double h = 1e-5;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t i = rng.below(k.numel());
    const double x0 = k[i];
    k[i] = x0 + h;
    const double up = sum(net.forward(x, Mode::train)).item();
    k[i] = x0 - h;
    const double down = sum(net.forward(x, Mode::train)).item();
    k[i] = x0;
    EXPECT_LE(rel_error(analytic[i], (up - down) / (2 * h)), 1e-3) << "coordinate " << i;
  }
}

TEST(Backbone, OutputShapeForAnyValidSize) {
  Rng rng(4);
  Backbone net(BackboneConfig{}, rng);
  NoGradScope no_grad;
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {20, 24}, {48, 48}}) {
    const Tensor out = net.forward(random_tensor(Shape{3, 7, h, w}, rng), Mode::eval);
    EXPECT_EQ(out.shape(), (Shape{3, 64}));
  }
  EXPECT_EQ(net.feature_dim(), 64u);
}

TEST(Backbone, EvalModeIsPure) {
  Rng rng(5);
  Backbone net(small_config(), rng);
  const Tensor x = random_tensor(Shape{2, 3, 16, 16}, rng);
  NoGradScope no_grad;
  net.forward(x, Mode::train);
  const auto mean_before = net.head_stats().mean;
  const Tensor a = net.forward(x, Mode::eval);
  const Tensor b = net.forward(x, Mode::eval);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_EQ(net.head_stats().mean, mean_before);
  net.forward(x, Mode::train);
  EXPECT_NE(net.head_stats().mean, mean_before);
}

TEST(Backbone, ParameterCountIsStable) {
  Rng a(6), b(7);
  Backbone x(BackboneConfig{}, a), y(BackboneConfig{}, b);
  // stem 7*16*9; stage0 2*(16+16+16*16*9+16); stage1 down 32*16*9+2*16, blocks 2*(3*32+32*32*9);
  // stage2 down 64*32*9+2*32, blocks 2*(3*64+64*64*9); head 2*64.
  EXPECT_EQ(x.parameter_count(), 121712u);
  EXPECT_EQ(y.parameter_count(), x.parameter_count());
  BackboneConfig rgb;
  rgb.input_channels = 3;
  rgb.set_masks(false);
  Rng c(8);
  EXPECT_EQ(Backbone(rgb, c).parameter_count(), 121712u - 4 * 16 * 9 - 2 * (16 + 32 + 64));
}

TEST(Backbone, RejectsWrongChannelCount) {
  Rng rng(9);
  Backbone net(BackboneConfig{}, rng);
  NoGradScope no_grad;
  EXPECT_THROW(net.forward(Tensor(Shape{1, 3, 16, 16}), Mode::eval), ShapeError);
  BackboneConfig bad;
  bad.stem_stride = 3;
  EXPECT_THROW(Backbone(bad, rng), ConfigError);
}

TEST(Backbone, StateRoundTrip) {
  Rng r1(10), r2(11);
  Backbone a(small_config(), r1), b(small_config(), r2);
  const Tensor x = random_tensor(Shape{2, 3, 16, 16}, r1, 0, 1);
  {
    NoGradScope no_grad;
    a.forward(x, Mode::train);
  }
  std::vector<NamedTensor> state;
  a.export_state("net", state);
  b.import_state("net", to_state_map(state));
  NoGradScope no_grad;
  const Tensor ya = a.forward(x, Mode::eval), yb = b.forward(x, Mode::eval);
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);
}
