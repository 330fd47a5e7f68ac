#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "vintk/archspace.hpp"
#include "vintk/network.hpp"
#include "vintk/ntk.hpp"

namespace vintk::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

inline Matrix random_symmetric(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) m(i, j) = m(j, i) = nd(rng);
  return m;
}

/// Random positive semi-definite matrix A A^T with A n x rank.
inline Matrix random_psd(std::size_t n, std::size_t rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix a(n, rank);
  for (auto& v : a.data()) v = nd(rng);
  Matrix g = a * a.transposed();
  g.symmetrize();
  return g;
}

/// Largest entrywise relative error. Entries whose magnitude is below
/// `floor_frac` of the largest entry are compared against that floor, so
/// exact zeros do not turn rounding noise into infinite relative error.
inline double max_rel_error(std::span<const double> a, std::span<const double> b,
                            double floor_frac = 1e-3) {
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  const double floor = std::max(floor_frac * scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_rel_error(const Matrix& a, const Matrix& b, double floor_frac = 1e-3) {
  return max_rel_error(a.data(), b.data(), floor_frac);
}

/// Gram assembled from central-difference gradient vectors; forward passes
/// only.
inline Matrix fd_ntk_gram(const NetworkSpec& net, const ParamVector& params, const ProbeBatch& b,
                          double h = 1e-5) {
  std::vector<GradVector> g;
  for (std::size_t i = 0; i < b.size(); ++i)
    g.push_back(finite_diff_gradient(net, params, b.sample_tensor(i),
                                     OutputReduction::sum_of_logits(), h));
  Matrix m(b.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = g[i].dot(g[j]);
  return m;
}

/// Monte-Carlo arc-cosine oracle: 2 E[relu(w.x) relu(w.x')], w ~ N(0, I).
inline Matrix mc_arccos_gram(const ProbeBatch& b, std::size_t samples, std::uint64_t seed) {
  const std::size_t d = b.size(), n = b.sample_size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> w(n), proj(d);
  Matrix acc(d, d);
  for (std::size_t s = 0; s < samples; ++s) {
    for (auto& v : w) v = nd(rng);
    for (std::size_t i = 0; i < d; ++i) {
      double z = 0.0;
      const auto x = b.sample(i);
      for (std::size_t k = 0; k < n; ++k) z += w[k] * x[k];
      proj[i] = std::max(0.0, z);
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) acc(i, j) += proj[i] * proj[j];
  }
  for (auto& v : acc.data()) v *= 2.0 / static_cast<double>(samples);
  return acc;
}

/// D distinct rows of shape [1,1,n] drawn from N(0,1).
inline ProbeBatch random_probes(std::size_t d, std::size_t n, std::uint64_t seed) {
  return ProbeBatch(random_tensor({d, 1, 1, n}, seed));
}

/// Simultaneous row/column permutation.
inline Matrix permuted(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(perm[i], perm[j]);
  return out;
}

/// Appends pool + head so any feature map becomes a classifier output.
inline NetworkSpec with_head(std::vector<LayerPtr> layers, FeatureShape in, std::size_t classes = 2) {
  auto last = layers.back()->output_shape();
  if (last.tokens() > 1) {
    layers.push_back(std::make_shared<GlobalAvgPool>("pool", last));
    last = layers.back()->output_shape();
  }
  layers.push_back(std::make_shared<Linear>("head", last, classes));
  return NetworkSpec(in, classes, std::move(layers));
}

/// Gives zero-initialized biases, unit gains and zero shifts a random nudge
/// so finite differences exercise every path.
inline ParamVector perturbed_init(const NetworkSpec& net, std::uint64_t seed) {
  auto p = init_params(net, seed);
  std::mt19937_64 rng(seed + 99);
  std::normal_distribution<double> nd(0.0, 0.2);
  for (auto& v : p.values) v += nd(rng);
  return p;
}

/// Relative error of the analytic parameter gradient against central
/// differences on a 2-sample batch.
inline double gradient_fd_error(const NetworkSpec& net, std::uint64_t seed,
                                OutputReduction red = OutputReduction::sum_of_logits()) {
  const auto p = perturbed_init(net, seed);
  const auto s = net.input_shape();
  const auto x = random_tensor({2, s.h, s.w, s.c}, seed + 1);
  const auto g = param_gradient(net, p, x, red);
  const auto fd = finite_diff_gradient(net, p, x, red, 1e-5);
  return max_rel_error(g.values, fd.values);
}

/// One small network per layer type, each closed by pool + linear head.
inline std::vector<std::pair<std::string, NetworkSpec>> layer_type_nets() {
  const FeatureShape img{4, 4, 3};
  const auto P = Parameterization::Standard;
  std::vector<std::pair<std::string, NetworkSpec>> out;
  auto add = [&](std::string name, std::vector<LayerPtr> layers) {
    out.emplace_back(std::move(name), with_head(std::move(layers), img));
  };
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
    add("patch_conv+pool+linear", {pc});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 1, 4, P);
    add("layer_norm", {pc, std::make_shared<LayerNorm>("ln", pc->output_shape())});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
    add("gelu", {pc, std::make_shared<Activation>("gelu", pc->output_shape(), ActivationKind::Gelu)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
    add("relu", {pc, std::make_shared<Activation>("relu", pc->output_shape(), ActivationKind::Relu)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 1, 4, P);
    add("msa", {pc, std::make_shared<MultiHeadSelfAttention>("msa", pc->output_shape(), 2, P)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
    add("ffn", {pc, std::make_shared<FeedForward>("ffn", pc->output_shape(), 2, P)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 1, 3, P);
    add("depthwise_conv", {pc, std::make_shared<DepthwiseConv>("dw", pc->output_shape(), 3, P)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 8, P);
    add("squeeze_excitation",
        {pc, std::make_shared<SqueezeExcitation>("se", pc->output_shape(), 4, P)});
  }
  {
    auto pc = std::make_shared<PatchConv>("patch", img, 2, 4, P);
    auto ln = std::make_shared<LayerNorm>("ln", pc->output_shape());
    auto msa = std::make_shared<MultiHeadSelfAttention>("msa", pc->output_shape(), 2, P);
    add("residual", {pc, std::make_shared<Residual>("block", std::vector<LayerPtr>{ln, msa})});
  }
  return out;
}

/// Two-stage ViT of width 16: patch embed, pre-norm attention + FFN blocks,
/// a 2x2 merge between stages, and a norm/pool/linear head.
inline NetworkSpec tiny_vit(Parameterization p = Parameterization::Standard) {
  using namespace vintk::detail;
  const FeatureShape img{8, 8, 3};
  std::vector<LayerPtr> layers;
  FeatureShape s = img;
  layers.push_back(std::make_shared<PatchConv>("stage1.patch_embed", s, 2, 16, p));
  s = layers.back()->output_shape();
  layers.push_back(attention_block("stage1.block1", s, 2, p));
  layers.push_back(ffn_block("stage1.block1", s, 2, p));
  layers.push_back(downsample("stage2.down", s, 16, p));
  s = layers.back()->output_shape();
  layers.push_back(attention_block("stage2.block1", s, 2, p));
  layers.push_back(ffn_block("stage2.block1", s, 2, p));
  add_head(layers, s, 3, p);
  return NetworkSpec(img, 3, std::move(layers), p);
}

}  // namespace vintk::testing
