#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "vintk/eigen_sym.hpp"
#include "vintk/error.hpp"
#include "vintk/layers.hpp"
#include "vintk/network.hpp"
#include "vintk/ntk.hpp"
#include "vintk/parallel.hpp"

namespace vintk {

// ---------------------------------------------------------------------------
// Eigenmode residual dynamics

/// r_i(t) = exp(-eta lambda_i t) (Q^T y)_i for each eigenmode i of a Gram.
struct ResidualTrace {
  std::vector<double> eigenvalues;  // ascending
  std::vector<double> initial;      // (Q^T y)_i
  double eta = 0.0;
  std::vector<double> t;
  std::vector<std::vector<double>> r;  // r[k][i]: time t[k], mode i

  /// Time for mode i to fall to half its initial residual; infinite for a
  /// zero eigenvalue.
  double half_life(std::size_t i) const {
    if (!(eigenvalues.at(i) > 0.0)) return std::numeric_limits<double>::infinity();
    return std::numbers::ln2 / (eta * eigenvalues[i]);
  }
};

/// Residual y - f(t) of kernel gradient flow from f = 0, expressed in the
/// Gram's eigenbasis. Rejects Grams with eigenvalues below -1e-8 * trace;
/// smaller negative rounding is clamped to zero.
inline ResidualTrace simulate_residual_dynamics(const Matrix& gram, std::span<const double> y,
                                                double eta, std::vector<double> t_grid) {
  if (!gram.square() || gram.rows() != y.size())
    throw ShapeError("residual dynamics: Gram is " + std::to_string(gram.rows()) + "x" +
                     std::to_string(gram.cols()) + " but y has " + std::to_string(y.size()) +
                     " entries");
  if (!(eta > 0.0)) throw Error("residual dynamics: eta must be positive");
  for (double t : t_grid)
    if (!(t >= 0.0) || !std::isfinite(t)) throw Error("residual dynamics: times must be >= 0");
  const auto e = sym_eigendecompose(gram);
  const double tol = kPsdTolerance * std::abs(gram.trace());
  ResidualTrace tr;
  tr.eta = eta;
  tr.t = std::move(t_grid);
  for (double l : e.values) {
    if (l < -tol)
      throw NumericError("residual dynamics: Gram has eigenvalue " + std::to_string(l) +
                         " below -1e-8 * trace");
    tr.eigenvalues.push_back(std::max(l, 0.0));
  }
  const std::size_t n = y.size();
  tr.initial.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) tr.initial[i] += e.vectors(k, i) * y[k];
  for (double t : tr.t) {
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i)
      row[i] = std::exp(-eta * tr.eigenvalues[i] * t) * tr.initial[i];
    tr.r.push_back(std::move(row));
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Kernel ridge

/// Ridge used when none is given: 1e-6 * trace / D.
inline double default_ridge(const Matrix& gram_train) {
  return 1e-6 * gram_train.trace() / static_cast<double>(gram_train.rows());
}

/// gram_cross (K + ridge I)^{-1} y via a Cholesky solve.
inline std::vector<double> kernel_ridge_predict(const Matrix& gram_train, const Matrix& gram_cross,
                                                std::span<const double> y_train, double ridge) {
  if (!gram_train.square()) throw ShapeError("kernel ridge: training Gram must be square");
  const std::size_t n = gram_train.rows();
  if (gram_cross.cols() != n || y_train.size() != n)
    throw ShapeError("kernel ridge: cross Gram has " + std::to_string(gram_cross.cols()) +
                     " columns and y has " + std::to_string(y_train.size()) +
                     " entries; expected " + std::to_string(n));
  if (!(ridge >= 0.0)) throw Error("kernel ridge: ridge must be >= 0");
  RowMatrix a = gram_train.eigen();
  a = 0.5 * (a + a.transpose()).eval();
  a.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-15))
    throw NumericError("kernel ridge: system is singular or indefinite at ridge " +
                       std::to_string(ridge) + "; use a positive ridge");
  const Eigen::VectorXd alpha =
      llt.solve(Eigen::Map<const Eigen::VectorXd>(y_train.data(), static_cast<Eigen::Index>(n)));
  const Eigen::VectorXd pred = gram_cross.eigen() * alpha;
  return {pred.data(), pred.data() + pred.size()};
}

// ---------------------------------------------------------------------------
// Spiked covariates

enum class TargetRegime { Low, High };

inline std::string to_string(TargetRegime r) { return r == TargetRegime::Low ? "low" : "high"; }

struct SpikedConfig {
  std::size_t d = 64;
  std::size_t d0 = 4;
  double r1 = 1.0;
  double r2 = 0.25;
  std::size_t n = 256;
  std::size_t n_test = 1024;
  double noise_std = 0.0;
  /// Nonlinearity of the single-index target: relu, tanh, identity or zero.
  std::string activation = "relu";
  TargetRegime regime = TargetRegime::Low;
  /// High-frequency term beta * cos(2 pi k v.x) with v in the noise subspace.
  double beta = 0.5;
  double k = 4.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (d0 < 1 || d0 > d) throw Error("spiked: need 1 <= d0 <= d");
    if (!(r2 > 0.0) || r1 < r2) throw Error("spiked: need r1 >= r2 > 0");
    if (n < 4) throw Error("spiked: need n >= 4");
    if (noise_std < 0.0) throw Error("spiked: noise_std must be >= 0");
    if (regime == TargetRegime::High && d0 == d)
      throw Error("spiked: the high-frequency target needs a noise subspace (d0 < d)");
    activate(0.0);
  }

  double activate(double z) const {
    if (activation == "relu") return std::max(0.0, z);
    if (activation == "tanh") return std::tanh(z);
    if (activation == "identity") return z;
    if (activation == "zero") return 0.0;
    throw ParseError("spiked: unknown activation '" + activation + "'");
  }
};

struct SpikedDataset {
  RowMatrix u_basis;     // d x d0
  RowMatrix u_perp;      // d x (d - d0)
  Eigen::VectorXd u;     // target direction in span(U)
  Eigen::VectorXd v;     // high-frequency direction in span(U_perp)
  RowMatrix x_train, x_test;  // rows are samples
  std::vector<double> y_train, y_test;
};

namespace detail {

inline Eigen::VectorXd sphere_point(std::size_t dim, double radius, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::VectorXd z(static_cast<Eigen::Index>(dim));
  do {
    for (auto& v : z) v = nd(rng);
  } while (z.norm() == 0.0);
  return radius * z / z.norm();
}

}  // namespace detail

/// x = U z1 + U_perp z2 with z1 uniform on the sphere of radius r1 sqrt(d0)
/// and z2 on the sphere of radius r2 sqrt(d - d0). Targets are
/// act(u.x) [+ beta cos(2 pi k v.x)] + noise.
inline SpikedDataset generate_spiked(const SpikedConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd;
  const auto d = static_cast<Eigen::Index>(cfg.d), d0 = static_cast<Eigen::Index>(cfg.d0);
  Eigen::MatrixXd g(d, d);
  for (auto& v : g.reshaped()) v = nd(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  SpikedDataset ds;
  ds.u_basis = q.leftCols(d0);
  ds.u_perp = q.rightCols(d - d0);
  ds.u = ds.u_basis * detail::sphere_point(cfg.d0, 1.0, rng);
  ds.v = d > d0 ? Eigen::VectorXd(ds.u_perp * detail::sphere_point(cfg.d - cfg.d0, 1.0, rng))
                : Eigen::VectorXd::Zero(d);

  auto sample = [&](std::size_t count, RowMatrix& x, std::vector<double>& y) {
    x.resize(static_cast<Eigen::Index>(count), d);
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      Eigen::VectorXd xi = ds.u_basis * detail::sphere_point(cfg.d0, cfg.r1 * std::sqrt(double(cfg.d0)), rng);
      if (d > d0)
        xi += ds.u_perp *
              detail::sphere_point(cfg.d - cfg.d0, cfg.r2 * std::sqrt(double(cfg.d - cfg.d0)), rng);
      x.row(static_cast<Eigen::Index>(i)) = xi.transpose();
      double t = cfg.activate(ds.u.dot(xi));
      if (cfg.regime == TargetRegime::High)
        t += cfg.beta * std::cos(2.0 * std::numbers::pi * cfg.k * ds.v.dot(xi));
      y[i] = t + cfg.noise_std * nd(rng);
    }
  };
  sample(cfg.n, ds.x_train, ds.y_train);
  sample(cfg.n_test, ds.x_test, ds.y_test);
  return ds;
}

// ---------------------------------------------------------------------------
// Network regression

struct RegressionData {
  Tensor x_train, x_test;  // [N,1,1,d]
  std::vector<double> y_train, y_test;
};

inline Tensor rows_as_batch(const RowMatrix& x) {
  Tensor t({static_cast<std::size_t>(x.rows()), 1, 1, static_cast<std::size_t>(x.cols())});
  MatMap(t.data().data(), x.rows(), x.cols()) = x;
  return t;
}

inline RegressionData to_regression(const SpikedDataset& ds) {
  return {rows_as_batch(ds.x_train), rows_as_batch(ds.x_test), ds.y_train, ds.y_test};
}

/// Two-layer ReLU network d -> width -> 1 under the NTK parameterization.
inline NetworkSpec relu_regressor(std::size_t d, std::size_t width) {
  FeatureShape s{1, 1, d};
  auto l1 = std::make_shared<Linear>("fc1", s, width, true, Parameterization::Ntk);
  auto a = std::make_shared<Activation>("act", l1->output_shape(), ActivationKind::Relu);
  auto l2 = std::make_shared<Linear>("fc2", a->output_shape(), 1, true, Parameterization::Ntk);
  return NetworkSpec(s, 1, {l1, a, l2}, Parameterization::Ntk);
}

/// Initialization whose network output is zero at every input: the second
/// half of the hidden units copies the first half and their output weights
/// are negated. The NTK at this point has the same distribution as under a
/// plain Gaussian initialization of half the width.
inline ParamVector antisymmetric_init(const NetworkSpec& net, std::uint64_t seed) {
  auto p = init_params(net, seed);
  auto w1 = p.segment("fc1.weight"), b1 = p.segment("fc1.bias");
  auto w2 = p.segment("fc2.weight"), b2 = p.segment("fc2.bias");
  const std::size_t width = b1.size(), d = w1.size() / width, half = width / 2;
  if (width % 2 != 0) throw ShapeError("antisymmetric init needs an even hidden width");
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < half; ++j) w1[i * width + half + j] = w1[i * width + j];
  for (std::size_t j = 0; j < half; ++j) {
    b1[half + j] = b1[j];
    w2[half + j] = -w2[j];
  }
  b2[0] = 0.0;
  return p;
}

inline double mse(std::span<const double> pred, std::span<const double> y) {
  if (pred.size() != y.size() || y.empty()) throw ShapeError("mse: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (pred[i] - y[i]) * (pred[i] - y[i]);
  return s / static_cast<double>(y.size());
}

inline std::vector<double> predict(const NetworkSpec& net, const ParamVector& p, const Tensor& x) {
  const Tensor out = forward(net, p, x);
  return {out.data().begin(), out.data().end()};
}

enum class InitScheme { Gaussian, Antisymmetric };

struct TrainResult {
  ParamVector params;
  double risk = 0.0;                // held-out MSE
  std::vector<double> train_loss;   // per step, before the update
};

/// Full-batch gradient descent on (1/2) mean squared error. Aborts with
/// NumericError when the training loss exceeds 1e6.
inline TrainResult train_nn(const NetworkSpec& net, const RegressionData& data, std::size_t steps,
                            double lr, std::uint64_t seed,
                            InitScheme init = InitScheme::Gaussian) {
  if (steps < 1) throw Error("train_nn: steps must be >= 1");
  if (net.classes() != 1) throw ShapeError("train_nn: regression needs a single output");
  tune_allocator();
  TrainResult r;
  r.params = init == InitScheme::Gaussian ? init_params(net, seed) : antisymmetric_init(net, seed);
  const std::size_t n = data.y_train.size();
  Tensor gl({n, 1});
  for (std::size_t s = 0; s < steps; ++s) {
    const auto trace = forward_trace(net, r.params, data.x_train);
    const Tensor f = trace.logits();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = f[i] - data.y_train[i];
      loss += 0.5 * e * e;
      gl[i] = e / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    if (!(loss <= 1e6))
      throw NumericError("train_nn diverged at step " + std::to_string(s) + ": loss " +
                         std::to_string(loss) + " (lr " + std::to_string(lr) + ")");
    r.train_loss.push_back(loss);
    if (lr == 0.0) continue;
    const auto g = backward(net, r.params, trace, gl);
    for (std::size_t k = 0; k < r.params.size(); ++k) r.params.values[k] -= lr * g.values[k];
  }
  r.risk = mse(predict(net, r.params, data.x_test), data.y_test);
  return r;
}

// ---------------------------------------------------------------------------
// NN vs NTK

struct RiskPair {
  double r_nn = 0.0;
  double r_ntk = 0.0;
  double gap = 0.0;
  double ridge = 0.0;
  double lr = 0.0;
};

struct GapConfig {
  std::size_t width = 256;
  std::size_t steps = 2000;
  /// 0 picks 1 / lambda_max(K / n) from the training Gram.
  double lr = 0.0;
  /// Negative picks the default ridge.
  double ridge = -1.0;
};

/// Trains the network and the kernel predictor built from its empirical NTK
/// at initialization on the same data. Both start from the antisymmetric
/// initialization, so f0 = 0 (up to rounding) and the kernel predictor is
/// the linearized network f0(x) + K(x, X)(K + ridge I)^{-1}(y - f0(X)).
inline RiskPair approximation_gap(const SpikedConfig& cfg, const GapConfig& gc = {}) {
  const auto ds = generate_spiked(cfg);
  const auto data = to_regression(ds);
  const auto net = relu_regressor(cfg.d, gc.width);
  const std::uint64_t init_seed = cfg.seed * 7919 + 17;
  const auto p0 = antisymmetric_init(net, init_seed);

  const auto jtr = probe_jacobian(net, p0, ProbeBatch(data.x_train));
  Matrix k_train = Matrix::from_eigen(jtr * jtr.transpose());
  k_train.symmetrize();
  // Test Jacobians are consumed in chunks to bound memory.
  Matrix k_cross(cfg.n_test, cfg.n);
  constexpr std::size_t kChunk = 128;
  for (std::size_t lo = 0; lo < cfg.n_test; lo += kChunk) {
    const std::size_t hi = std::min(cfg.n_test, lo + kChunk);
    RowMatrix jte(static_cast<Eigen::Index>(hi - lo), jtr.cols());
    for (std::size_t i = lo; i < hi; ++i) {
      Tensor xi({1, 1, 1, cfg.d});
      std::copy_n(data.x_test.data().begin() + static_cast<std::ptrdiff_t>(i * cfg.d), cfg.d,
                  xi.data().begin());
      const auto g = param_gradient(net, p0, xi);
      jte.row(static_cast<Eigen::Index>(i - lo)) =
          Eigen::Map<const Eigen::RowVectorXd>(g.values.data(), jtr.cols());
    }
    k_cross.eigen().middleRows(static_cast<Eigen::Index>(lo), jte.rows()) = jte * jtr.transpose();
  }

  const auto f0_train = predict(net, p0, data.x_train);
  const auto f0_test = predict(net, p0, data.x_test);
  std::vector<double> resid(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) resid[i] = data.y_train[i] - f0_train[i];

  RiskPair rp;
  rp.ridge = gc.ridge < 0.0 ? default_ridge(k_train) : gc.ridge;
  auto pred = kernel_ridge_predict(k_train, k_cross, resid, rp.ridge);
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += f0_test[i];
  rp.r_ntk = mse(pred, data.y_test);

  if (gc.lr > 0.0) {
    rp.lr = gc.lr;
  } else {
    const Eigen::MatrixXd k = k_train.eigen() / static_cast<double>(cfg.n);
    rp.lr = 1.0 / Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k, Eigen::EigenvaluesOnly)
                      .eigenvalues()
                      .maxCoeff();
  }
  rp.r_nn = train_nn(net, data, gc.steps, rp.lr, init_seed, InitScheme::Antisymmetric).risk;
  rp.gap = std::abs(rp.r_nn - rp.r_ntk);
  return rp;
}

}  // namespace vintk
