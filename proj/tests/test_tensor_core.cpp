#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "vintk/eigen_sym.hpp"
#include "vintk/network.hpp"

namespace vintk {
namespace {

using testing::max_rel_error;
using testing::random_tensor;

NetworkSpec linear_net(std::size_t d, bool bias = false) {
  return NetworkSpec({1, 1, d}, 1, {std::make_shared<Linear>("fc", FeatureShape{1, 1, d}, 1, bias)});
}

NetworkSpec relu_mlp(std::size_t in, std::size_t width, std::size_t out) {
  FeatureShape s{1, 1, in};
  auto l1 = std::make_shared<Linear>("fc1", s, width);
  auto a = std::make_shared<Activation>("act", l1->output_shape(), ActivationKind::Relu);
  auto l2 = std::make_shared<Linear>("fc2", a->output_shape(), out);
  return NetworkSpec(s, out, {l1, a, l2});
}

void expect_gradient_matches_fd(const NetworkSpec& net, std::uint64_t seed,
                                OutputReduction red = OutputReduction::sum_of_logits()) {
  EXPECT_LT(testing::gradient_fd_error(net, seed, red), 1e-4);
}

TEST(Forward, LinearDotProduct) {
  auto net = linear_net(2);
  auto p = zero_params(net);
  p.values = {2.0, 3.0};
  const auto y = forward(net, p, Tensor({2}, {1.0, 1.0}));
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y[0], 5.0);
}

TEST(Forward, ZeroParamsBiasFreeGiveZeroOutput) {
  auto net = relu_mlp(3, 8, 2);
  auto p = zero_params(net);
  const auto y = forward(net, p, random_tensor({3}, 5));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, MlpMatchesStraightLineReference) {
  auto net = relu_mlp(3, 8, 2);
  const auto p = init_params(net, 0);
  const auto x = random_tensor({3}, 11);
  const auto y = forward(net, p, x);

  const auto w1 = p.segment("fc1.weight"), b1 = p.segment("fc1.bias");
  const auto w2 = p.segment("fc2.weight"), b2 = p.segment("fc2.bias");
  std::vector<double> hidden(8);
  for (int j = 0; j < 8; ++j) {
    double a = b1[j];
    for (int i = 0; i < 3; ++i) a += x[i] * w1[i * 8 + j];
    hidden[j] = a > 0 ? a : 0;
  }
  for (int k = 0; k < 2; ++k) {
    double o = b2[k];
    for (int j = 0; j < 8; ++j) o += hidden[j] * w2[j * 2 + k];
    EXPECT_NEAR(y[k], o, 1e-14);
  }
}

TEST(Forward, ShapeMismatchThrows) {
  auto net = linear_net(2);
  auto p = zero_params(net);
  EXPECT_THROW(forward(net, p, Tensor({3}, {1.0, 1.0, 1.0})), ShapeError);
  auto other = zero_params(linear_net(3));
  EXPECT_THROW(forward(net, other, Tensor({2}, {1.0, 1.0})), ShapeError);
}

TEST(Forward, NonFiniteNamesLayer) {
  auto net = relu_mlp(2, 4, 1);
  auto p = init_params(net, 1);
  p.values[0] = std::numeric_limits<double>::infinity();
  try {
    forward(net, p, Tensor({2}, {1.0, 0.5}));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("fc1"), std::string::npos);
  }
}

TEST(ParamGradient, LinearModelGradientIsInput) {
  auto net = linear_net(3);
  auto p = init_params(net, 3);
  const Tensor x({3}, {0.5, -2.0, 4.0});
  const auto g = param_gradient(net, p, x);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.values[i], x[i]);
}

TEST(ParamGradient, DeadReluHasZeroGradient) {
  FeatureShape s{1, 1, 2};
  auto l1 = std::make_shared<Linear>("w", s, 1, false);
  auto a = std::make_shared<Activation>("relu", l1->output_shape(), ActivationKind::Relu);
  NetworkSpec net(s, 1, {l1, a});
  auto p = zero_params(net);
  p.values = {1.0, -1.0};
  const auto g = param_gradient(net, p, Tensor({2}, {0.0, 1.0}));
  EXPECT_EQ(g.values[0], 0.0);
  EXPECT_EQ(g.values[1], 0.0);
}

TEST(ParamGradient, TinyMlpMatchesFiniteDifferences) {
  expect_gradient_matches_fd(relu_mlp(4, 6, 3), 0);
  expect_gradient_matches_fd(relu_mlp(4, 6, 3), 1, OutputReduction::single_logit(2));
}

TEST(ParamGradient, EveryLayerTypeMatchesFiniteDifferences) {
  std::uint64_t seed = 10;
  for (const auto& [name, net] : testing::layer_type_nets()) {
    SCOPED_TRACE(name);
    expect_gradient_matches_fd(net, seed++);
  }
}

TEST(ParamGradient, TinyVitMatchesFiniteDifferences) {
  expect_gradient_matches_fd(testing::tiny_vit(), 30);
  expect_gradient_matches_fd(testing::tiny_vit(), 31, OutputReduction::single_logit(1));
}

TEST(ParamGradient, NtkParameterizationMatchesFiniteDifferences) {
  const FeatureShape img{4, 4, 2};
  const auto P = Parameterization::Ntk;
  auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
  auto msa = std::make_shared<MultiHeadSelfAttention>("msa", pc->output_shape(), 2, P);
  auto ffn = std::make_shared<FeedForward>("ffn", pc->output_shape(), 2, P);
  auto pool = std::make_shared<GlobalAvgPool>("pool", pc->output_shape());
  auto head = std::make_shared<Linear>("head", pool->output_shape(), 2, true, P);
  NetworkSpec net(img, 2, {pc, msa, ffn, pool, head}, P);
  expect_gradient_matches_fd(net, 21);
}

TEST(ParamGradient, RepeatedCallsAreBitIdentical) {
  auto net = relu_mlp(4, 6, 3);
  const auto p = init_params(net, 4);
  const auto x = random_tensor({4}, 8);
  const auto a = param_gradient(net, p, x);
  const auto b = param_gradient(net, p, x);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(forward(net, p, x), forward(net, p, x));
}

TEST(FiniteDiff, LinearIsExact) {
  auto net = linear_net(3);
  auto p = init_params(net, 2);
  const Tensor x({3}, {0.25, -1.5, 3.0});
  const auto g = finite_diff_gradient(net, p, x, OutputReduction::sum_of_logits(), 1e-3);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(g.values[i], x[i], 1e-10);
}

TEST(FiniteDiff, QuadraticScalar) {
  const auto g = central_difference([](const std::vector<double>& t) { return t[0] * t[0]; },
                                    std::vector<double>{3.0}, 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-7);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  auto net = linear_net(2);
  auto p = zero_params(net);
  EXPECT_THROW(
      finite_diff_gradient(net, p, Tensor({2}, {1.0, 1.0}), OutputReduction::sum_of_logits(), 0.0),
      Error);
}

TEST(SymEigen, Identity) {
  const auto e = sym_eigendecompose(Matrix::identity(3));
  for (double v : e.values) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(SymEigen, DiagonalAscendingAxisAligned) {
  const auto e = sym_eigendecompose(Matrix{{4.0, 0.0}, {0.0, 1.0}});
  EXPECT_DOUBLE_EQ(e.values[0], 1.0);
  EXPECT_DOUBLE_EQ(e.values[1], 4.0);
  EXPECT_DOUBLE_EQ(std::abs(e.vectors(1, 0)), 1.0);
  EXPECT_DOUBLE_EQ(std::abs(e.vectors(0, 1)), 1.0);
}

TEST(SymEigen, RandomReconstructionAndOrthonormality) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    const auto m = testing::random_symmetric(8, seed);
    const auto e = sym_eigendecompose(m);
    const auto r = reconstruct(e);
    Matrix diff(8, 8);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) diff(i, j) = r(i, j) - m(i, j);
    EXPECT_LT(diff.frobenius(), 1e-10);
    EXPECT_LT(diff.frobenius(), 1e-8 * m.frobenius());
    const auto qtq = e.vectors.transposed() * e.vectors;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(qtq(i, j), i == j ? 1.0 : 0.0, 1e-9);
    EXPECT_TRUE(std::is_sorted(e.values.begin(), e.values.end()));
  }
}

TEST(SymEigen, LargerMatrixStillReconstructs) {
  const auto m = testing::random_psd(64, 64, 3);
  const auto e = sym_eigendecompose(m);
  const auto r = reconstruct(e);
  double err = 0.0;
  for (std::size_t i = 0; i < m.data().size(); ++i) err += std::pow(r.data()[i] - m.data()[i], 2);
  EXPECT_LT(std::sqrt(err), 1e-8 * m.frobenius());
}

TEST(SymEigen, RejectsAsymmetricInput) {
  EXPECT_THROW(sym_eigendecompose(Matrix{{1.0, 2.0}, {0.0, 1.0}}), ShapeError);
}

TEST(SymEigen, SweepCapReportsDiagnostics) {
  JacobiOptions opt;
  opt.max_sweeps = 0;
  try {
    sym_eigendecompose(testing::random_symmetric(5, 1), opt);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("off-diagonal"), std::string::npos);
  }
}

}  // namespace
}  // namespace vintk
