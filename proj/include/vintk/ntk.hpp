#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "vintk/eigen_sym.hpp"
#include "vintk/error.hpp"
#include "vintk/network.hpp"
#include "vintk/parallel.hpp"
#include "vintk/tensor.hpp"

namespace vintk {

/// D probe inputs stacked along the first axis, plus optional labels.
struct ProbeBatch {
  Tensor inputs;  // [D, ...]
  std::vector<int> labels;

  ProbeBatch() = default;
  explicit ProbeBatch(Tensor x, std::vector<int> y = {}) : inputs(std::move(x)), labels(std::move(y)) {
    validate();
  }

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  std::size_t sample_size() const { return size() ? inputs.size() / size() : 0; }

  /// Input i as a flat span.
  std::span<const double> sample(std::size_t i) const {
    return inputs.data().subspan(i * sample_size(), sample_size());
  }

  /// Input i with its own leading batch axis of 1.
  Tensor sample_tensor(std::size_t i) const {
    std::vector<std::size_t> shape = inputs.shape();
    shape[0] = 1;
    const auto s = sample(i);
    return Tensor(std::move(shape), Buffer(s.begin(), s.end()));
  }

  void validate() const {
    if (inputs.rank() < 2) throw ShapeError("probe batch needs shape [D, ...]");
    if (size() < 2) throw ShapeError("probe batch needs at least 2 inputs");
    if (!labels.empty() && labels.size() != size())
      throw ShapeError("probe labels do not match batch size");
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = i + 1; j < size(); ++j) {
        const auto a = sample(i), b = sample(j);
        if (std::equal(a.begin(), a.end(), b.begin()))
          throw ShapeError("probe inputs " + std::to_string(i) + " and " + std::to_string(j) +
                           " are identical");
      }
  }
};

/// Min-max constants mapping a batch into [0,1]; kept so reports can state
/// them.
struct UnitRange {
  double lo = 0.0;
  double hi = 1.0;

  /// Maps v into [0,1], clamping values outside the recorded range.
  double map(double v) const {
    if (hi <= lo) return 0.0;
    return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  }
};

inline UnitRange unit_range_of(const Tensor& t) {
  if (t.size() == 0) throw ShapeError("cannot normalize an empty tensor");
  const auto [mn, mx] = std::minmax_element(t.data().begin(), t.data().end());
  return {*mn, *mx};
}

inline ProbeBatch normalize_to_unit(const ProbeBatch& b, const UnitRange& r) {
  ProbeBatch out = b;
  for (auto& v : out.inputs.values()) v = r.map(v);
  return out;
}

/// A D x D kernel matrix tagged with the kernel that produced it.
struct GramMatrix : Matrix {
  std::string source;

  GramMatrix() = default;
  GramMatrix(Matrix m, std::string src) : Matrix(std::move(m)), source(std::move(src)) {}

  std::size_t dim() const { return rows(); }
};

struct MetricScore {
  std::string metric;
  double value = 0.0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double trace = 0.0;
  std::size_t D = 0;
  /// Set when the value needed a guard (e.g. an eigenvalue floor).
  std::vector<std::string> flags;
};

struct FourierConfig {
  std::size_t n_freq = 8;
  double p = 2.0;

  void validate() const {
    if (n_freq < 1) throw Error("Fourier n_freq must be at least 1");
    if (!(p > 0.0)) throw Error("Fourier exponent p must be positive");
  }
  /// Squared amplitude of frequency j (1-based).
  double weight(std::size_t j) const { return std::pow(static_cast<double>(j), -2.0 * p); }
  /// Kernel value at zero lag.
  double lag0() const {
    double s = 0.0;
    for (std::size_t j = 1; j <= n_freq; ++j) s += weight(j);
    return s;
  }
};

/// Eigenvalues of PSD Grams may dip below zero by rounding; anything below
/// this fraction of the trace is a real failure.
inline constexpr double kPsdTolerance = 1e-8;

/// Throws NumericError when the smallest eigenvalue is below
/// -kPsdTolerance * trace.
inline void check_psd(const Matrix& g, const std::string& what) {
  const auto e = sym_eigendecompose(g);
  const double tr = g.trace();
  if (e.values.front() < -kPsdTolerance * std::abs(tr))
    throw NumericError(what + " is not positive semi-definite: lambda_min " +
                       std::to_string(e.values.front()) + ", trace " + std::to_string(tr));
}

/// Per-probe parameter gradients as rows of a [D, P] matrix.
inline RowMatrix probe_jacobian(const NetworkSpec& net, const ParamVector& params,
                                const ProbeBatch& batch,
                                OutputReduction reduction = OutputReduction::sum_of_logits(),
                                std::size_t jobs = 1) {
  const std::size_t d = batch.size();
  RowMatrix j(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(params.size()));
  parallel_for(d, jobs, [&](std::size_t i) {
    const auto g = param_gradient(net, params, batch.sample_tensor(i), reduction);
    j.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(g.values.data(), static_cast<Eigen::Index>(g.size()));
  });
  return j;
}

/// Theta(x_i, x_j) = <grad f(x_i), grad f(x_j)> at the given parameters.
inline GramMatrix empirical_ntk_gram(const NetworkSpec& net, const ParamVector& params,
                                     const ProbeBatch& batch,
                                     OutputReduction reduction = OutputReduction::sum_of_logits(),
                                     std::size_t jobs = 1) {
  batch.validate();
  const RowMatrix j = probe_jacobian(net, params, batch, reduction, jobs);
  RowMatrix g = j * j.transpose();
  Matrix m = Matrix::from_eigen(g);
  m.symmetrize();
  return GramMatrix(std::move(m), "ntk");
}

namespace detail {

inline MetricScore spectrum_score(const Matrix& g, std::string metric, double value) {
  MetricScore s;
  s.metric = std::move(metric);
  s.value = value;
  s.D = g.rows();
  s.trace = g.trace();
  const auto e = sym_eigendecompose(g);
  s.lambda_min = e.values.front();
  s.lambda_max = e.values.back();
  if (!std::isfinite(value)) throw NumericError(s.metric + " score is not finite");
  return s;
}

inline double mean_of(const Matrix& g) {
  if (g.data().empty()) throw ShapeError("mean of an empty Gram");
  double s = 0.0;
  for (double v : g.data()) s += v;
  return s / static_cast<double>(g.data().size());
}

}  // namespace detail

inline MetricScore fnorm_score(const Matrix& g) {
  return detail::spectrum_score(g, "fnorm", g.frobenius());
}

/// Signed arithmetic mean of all D^2 entries.
inline MetricScore mean_score(const Matrix& g) {
  return detail::spectrum_score(g, "mean", detail::mean_of(g));
}

/// -lambda_max / max(lambda_min, 1e-12 * trace). Higher is better
/// conditioned.
inline MetricScore ncn_score(const Matrix& g) {
  auto s = detail::spectrum_score(g, "ncn", 0.0);
  const double eps = 1e-12 * std::abs(s.trace);
  double denom = s.lambda_min;
  if (!(denom > eps)) {
    denom = eps;
    s.flags.push_back("lambda_min_floored");
  }
  if (!(denom > 0.0)) throw NumericError("ncn score undefined for a zero-trace Gram");
  s.value = -s.lambda_max / denom;
  return s;
}

/// Degree-1 arc-cosine kernel composed `depth` times. Each layer maps the
/// pair's norms and angle to those of the induced ReLU features; norms are
/// preserved, so only the off-diagonal entries move.
inline GramMatrix relu_ntk_gram(const ProbeBatch& batch, std::size_t depth) {
  if (depth < 1) throw Error("arc-cosine kernel depth must be at least 1");
  batch.validate();
  const std::size_t d = batch.size();
  const auto n = static_cast<Eigen::Index>(batch.sample_size());
  RowMatrix x(static_cast<Eigen::Index>(d), n);
  for (std::size_t i = 0; i < d; ++i)
    x.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(batch.sample(i).data(), n);
  RowMatrix k = x * x.transpose();
  for (std::size_t l = 0; l < depth; ++l) {
    RowMatrix next(k.rows(), k.cols());
    for (Eigen::Index i = 0; i < k.rows(); ++i)
      for (Eigen::Index j = 0; j < k.cols(); ++j) {
        const double norms = std::sqrt(k(i, i) * k(j, j));
        if (norms == 0.0) {
          next(i, j) = 0.0;
          continue;
        }
        const double cos_t = std::clamp(k(i, j) / norms, -1.0, 1.0);
        const double theta = i == j ? 0.0 : std::acos(cos_t);
        next(i, j) = norms / std::numbers::pi *
                     (std::sin(theta) + (std::numbers::pi - theta) * cos_t);
      }
    k = std::move(next);
  }
  Matrix m = Matrix::from_eigen(k);
  m.symmetrize();
  return GramMatrix(std::move(m), "relu");
}

/// Mean of the arc-cosine Gram at the candidate's depth.
inline MetricScore relu_score(const Matrix& g) {
  return detail::spectrum_score(g, "relu", detail::mean_of(g));
}

/// k(x, x') = (1/m) sum_d sum_{j<=n_freq} j^{-2p} cos(2 pi j (x_d - x'_d))
/// over the m input coordinates. Inputs must lie in [0,1].
inline GramMatrix fourier_gram(const ProbeBatch& batch, const FourierConfig& cfg = {}) {
  cfg.validate();
  batch.validate();
  for (double v : batch.inputs.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw Error("Fourier kernel inputs must be normalized to [0,1], found " + std::to_string(v));
  const std::size_t d = batch.size(), m = batch.sample_size();
  std::vector<double> w(cfg.n_freq);
  for (std::size_t j = 0; j < cfg.n_freq; ++j) w[j] = cfg.weight(j + 1);
  Matrix g(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    const auto xa = batch.sample(a);
    for (std::size_t b = a; b < d; ++b) {
      const auto xb = batch.sample(b);
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        const double phase = 2.0 * std::numbers::pi * (xa[c] - xb[c]);
        // cos(j*phase) by the Chebyshev recurrence.
        const double c1 = std::cos(phase);
        double prev = 1.0, cur = c1;
        for (std::size_t j = 0; j < cfg.n_freq; ++j) {
          s += w[j] * cur;
          const double nxt = 2.0 * c1 * cur - prev;
          prev = cur;
          cur = nxt;
        }
      }
      g(a, b) = g(b, a) = s / static_cast<double>(m);
    }
  }
  return GramMatrix(std::move(g), "fourier");
}

/// Entrywise product of an NTK Gram and a Fourier Gram on the same probes.
inline GramMatrix vintk_gram(const Matrix& ntk, const Matrix& fourier) {
  if (ntk.rows() != fourier.rows() || ntk.cols() != fourier.cols())
    throw ShapeError("ViNTK factors differ in size: " + std::to_string(ntk.rows()) + "x" +
                     std::to_string(ntk.cols()) + " vs " + std::to_string(fourier.rows()) + "x" +
                     std::to_string(fourier.cols()));
  Matrix h(ntk.rows(), ntk.cols());
  h.eigen().array() = ntk.eigen().array() * fourier.eigen().array();
  return GramMatrix(std::move(h), "vintk");
}

/// Mean of the composed Gram.
inline MetricScore vintk_score(const Matrix& g) {
  return detail::spectrum_score(g, "vintk", detail::mean_of(g));
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"fnorm", "mean", "ncn", "relu", "vintk"};
  return names;
}

inline void check_metric_name(const std::string& m) {
  const auto& n = metric_names();
  if (std::find(n.begin(), n.end(), m) == n.end())
    throw ParseError("unknown metric '" + m + "' (expected fnorm, mean, ncn, relu or vintk)");
}

}  // namespace vintk
