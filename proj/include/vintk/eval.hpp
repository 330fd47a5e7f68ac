#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vintk/archspace.hpp"
#include "vintk/error.hpp"
#include "vintk/network.hpp"
#include "vintk/ntk.hpp"
#include "vintk/parallel.hpp"

namespace vintk {

// ---------------------------------------------------------------------------
// Kendall tau

struct TauResult {
  double tau = 0.0;
  double p_value = 1.0;
  /// False when one side is constant and tau is undefined.
  bool defined = true;
};

/// Tau-b with a two-sided p-value from the normal approximation of the
/// statistic S = concordant - discordant (tie-corrected variance, continuity
/// correction of 1).
inline TauResult kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("kendall_tau: rankings differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw ShapeError("kendall_tau: need at least 2 items");
  long long s = 0, tx = 0, ty = 0;  // tie pairs within x / within y
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int a = (x[i] < x[j]) - (x[i] > x[j]);
      const int b = (y[i] < y[j]) - (y[i] > y[j]);
      s += a * b;
      tx += a == 0;
      ty += b == 0;
    }
  const double n0 = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  TauResult r;
  if (static_cast<double>(tx) == n0 || static_cast<double>(ty) == n0) {
    r.defined = false;
    r.tau = std::numeric_limits<double>::quiet_NaN();
    r.p_value = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  r.tau = static_cast<double>(s) / std::sqrt((n0 - static_cast<double>(tx)) *
                                             (n0 - static_cast<double>(ty)));

  // Tie groups for the variance correction.
  auto groups = [](std::span<const double> v) {
    std::vector<double> sorted(v.begin(), v.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> sizes;
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      if (j - i > 1) sizes.push_back(static_cast<double>(j - i));
      i = j;
    }
    return sizes;
  };
  const auto gx = groups(x), gy = groups(y);
  const double nd = static_cast<double>(n);
  double vt = 0, vu = 0, t1 = 0, u1 = 0, t2 = 0, u2 = 0;
  for (double t : gx) {
    vt += t * (t - 1) * (2 * t + 5);
    t1 += t * (t - 1);
    t2 += t * (t - 1) * (t - 2);
  }
  for (double u : gy) {
    vu += u * (u - 1) * (2 * u + 5);
    u1 += u * (u - 1);
    u2 += u * (u - 1) * (u - 2);
  }
  double var = (nd * (nd - 1) * (2 * nd + 5) - vt - vu) / 18.0 + t1 * u1 / (2 * nd * (nd - 1));
  if (n > 2) var += t2 * u2 / (9 * nd * (nd - 1) * (nd - 2));
  const double z = std::max(std::abs(static_cast<double>(s)) - 1.0, 0.0) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(z / std::numbers::sqrt2));
  return r;
}

// ---------------------------------------------------------------------------
// Proxy task

/// Seeded synthetic image task: 4 classes = (blob side) x (texture phase).
///
/// Each image holds a smooth Gaussian blob whose horizontal half (left or
/// right) carries one bit, and a fine period-4 grating at a random
/// orientation whose phase (0 or pi) carries the other. Blob height, colours,
/// amplitudes and pixel noise are nuisance variables.
struct ProxyTask {
  std::string dataset = "blob-texture";
  std::size_t image_size = 16;
  std::size_t n_train = 64;
  std::size_t n_test = 256;
  std::size_t classes = 4;
  std::size_t steps = 2000;
  double lr = 2e-3;
  double noise = 0.4;  // pixel noise std
  std::uint64_t seed = 0;

  void validate() const {
    if (dataset != "blob-texture") throw ParseError("unknown dataset '" + dataset + "'");
    if (classes != 4) throw Error("blob-texture task has exactly 4 classes");
    if (image_size < 8 || image_size % 8 != 0) throw Error("image_size must be a multiple of 8");
    if (n_train < classes || n_test < classes) throw Error("task splits are too small");
    if (!(lr >= 0.0)) throw Error("task lr must be >= 0");
    if (!(noise >= 0.0)) throw Error("task noise must be >= 0");
  }

  /// Identifies everything that affects trained accuracy.
  std::string fingerprint() const {
    return dataset + "/" + std::to_string(image_size) + "/" + std::to_string(n_train) + "/" +
           std::to_string(n_test) + "/" + std::to_string(steps) + "/" + std::to_string(lr) + "/" +
           std::to_string(noise) + "/" + std::to_string(seed);
  }
};

struct ImageDataset {
  Tensor x_train, x_test;  // [N,H,W,3]
  std::vector<int> y_train, y_test;
  UnitRange range;  // min-max of the training images
};

namespace detail {

inline void render_blob_texture(double* img, std::size_t s, int label, double noise,
                                std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd;
  const double sz = static_cast<double>(s);
  const bool right = (label >> 1) & 1;
  const bool flipped = label & 1;
  const double cx = (right ? 0.625 : 0.125) * sz + u(rng) * 0.25 * sz;
  const double cy = 0.2 * sz + u(rng) * 0.6 * sz;
  const double sigma = 0.12 * sz;
  const double blob_amp = 0.6 + 0.4 * u(rng);
  const double tex_amp = 0.3 + 0.2 * u(rng);
  const int orient = static_cast<int>(u(rng) * 3.0);
  double colour[3], tex_colour[3];
  for (auto& c : colour) c = 0.4 + 0.6 * u(rng);
  for (auto& c : tex_colour) c = 0.5 + 0.5 * u(rng);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double blob = blob_amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      const double coord = orient == 0 ? static_cast<double>(x)
                           : orient == 1 ? static_cast<double>(y)
                                         : static_cast<double>(x + y);
      const double tex =
          tex_amp * std::cos(std::numbers::pi / 2 * coord + (flipped ? std::numbers::pi : 0.0) +
                             std::numbers::pi / 4);
      for (std::size_t c = 0; c < 3; ++c)
        img[(y * s + x) * 3 + c] = colour[c] * blob + tex_colour[c] * tex + noise * nd(rng);
    }
}

inline void render_split(std::size_t count, std::size_t s, double noise, std::mt19937_64& rng,
                         Tensor& x, std::vector<int>& y) {
  x = Tensor({count, s, s, 3});
  y.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    y[i] = static_cast<int>(i % 4);  // balanced
    render_blob_texture(x.data().data() + i * s * s * 3, s, y[i], noise, rng);
  }
}

}  // namespace detail

inline ImageDataset make_dataset(const ProxyTask& task) {
  task.validate();
  std::mt19937_64 rng(task.seed * 0x9E3779B97F4A7C15ULL + 0xDA7A);
  ImageDataset ds;
  detail::render_split(task.n_train, task.image_size, task.noise, rng, ds.x_train, ds.y_train);
  detail::render_split(task.n_test, task.image_size, task.noise, rng, ds.x_test, ds.y_test);
  ds.range = unit_range_of(ds.x_train);
  return ds;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  double accuracy = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

struct TrainBudget {
  std::size_t steps = 2000;
  double lr = 2e-3;
};

/// Mean softmax cross-entropy; fills d loss / d logits when `grad` is given.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double loss = 0.0;
  if (grad) *grad = Tensor({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - m);
    loss += std::log(sum) + m - z[labels[i]];
    if (grad) {
      for (std::size_t j = 0; j < k; ++j)
        (*grad)[i * k + j] =
            (std::exp(z[j] - m) / sum - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) /
            static_cast<double>(n);
    }
  }
  return loss / static_cast<double>(n);
}

/// Fraction of argmax predictions equal to the label (ties go to the lower
/// class index).
inline double accuracy_of(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    hits += static_cast<int>(std::max_element(z, z + k) - z) == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Full-batch Adam on cross-entropy with a cosine-decayed learning rate.
/// A non-finite loss or activation ends training with the divergence flag
/// and chance-level accuracy.
inline TrainOutcome train_classifier(const NetworkSpec& net, const Tensor& x_train,
                                     std::span<const int> y_train, const Tensor& x_test,
                                     std::span<const int> y_test, const TrainBudget& budget,
                                     std::uint64_t init_seed) {
  tune_allocator();
  auto p = init_params(net, init_seed);
  Buffer m(p.size(), 0.0), v(p.size(), 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  TrainOutcome out;
  const double chance = 1.0 / static_cast<double>(net.classes());
  try {
    Tensor grad;
    double pow1 = 1.0, pow2 = 1.0;
    for (std::size_t s = 0; s < budget.steps; ++s) {
      const auto trace = forward_trace(net, p, x_train);
      const double loss = cross_entropy(trace.logits(), y_train, &grad);
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
      const auto g = backward(net, p, trace, grad);
      const double lr =
          budget.lr * 0.5 *
          (1.0 + std::cos(std::numbers::pi * static_cast<double>(s) / static_cast<double>(budget.steps)));
      pow1 *= b1;
      pow2 *= b2;
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + (1 - b1) * g.values[k];
        v[k] = b2 * v[k] + (1 - b2) * g.values[k] * g.values[k];
        p.values[k] -= lr * (m[k] / (1 - pow1)) / (std::sqrt(v[k] / (1 - pow2)) + eps);
      }
      out.final_loss = loss;
    }
    out.accuracy = accuracy_of(forward(net, p, x_test), y_test);
  } catch (const NumericError&) {
    out.diverged = true;
    out.accuracy = chance;
  }
  return out;
}

/// Seed for the weights a proxy-task training run starts from; fixed per
/// task so every architecture sees the same protocol.
inline std::uint64_t training_seed(const ProxyTask& task) { return task.seed * 1000003ULL + 1; }

/// Trains the genotype's network on the task under its fixed budget and
/// returns held-out accuracy.
inline TrainOutcome train_proxy(const Genotype& g, const ProxyTask& task,
                                const ImageDataset* data = nullptr) {
  std::optional<ImageDataset> own;
  if (!data) data = &own.emplace(make_dataset(task));
  const auto net = build_network(g, task.classes, {task.image_size, task.image_size, 3});
  return train_classifier(net, data->x_train, data->y_train, data->x_test, data->y_test,
                          {task.steps, task.lr}, training_seed(task));
}

// ---------------------------------------------------------------------------
// Scoring

struct ScoreConfig {
  std::size_t probe_count = 16;
  FourierConfig fourier;
};

/// Probe batch of `count` training images chosen by `seed`.
inline ProbeBatch draw_probes(const ImageDataset& ds, std::size_t count, std::uint64_t seed) {
  const std::size_t n = ds.x_train.dim(0);
  if (count < 2 || count > n) throw Error("probe count must be in [2, training set size]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5EED0F9B0BE5ULL);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, n - 1);
    std::swap(idx[i], idx[u(rng)]);
  }
  const std::size_t per = ds.x_train.size() / n;
  auto shape = ds.x_train.shape();
  shape[0] = count;
  Tensor x(shape);
  std::vector<int> y(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::copy_n(ds.x_train.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                x.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    y[i] = ds.y_train[idx[i]];
  }
  return ProbeBatch(std::move(x), std::move(y));
}

/// Everything a metric may need about one candidate on one probe batch.
struct ScoringContext {
  const NetworkSpec* net;
  const ParamVector* params;
  const ProbeBatch* probes;
  const ProbeBatch* unit_probes;  // min-max normalized copy for the Fourier kernel
  FourierConfig fourier;
};

/// Scores for several metrics computed from one NTK Gram.
inline std::map<std::string, MetricScore> score_metrics(const ScoringContext& ctx,
                                                        const std::vector<std::string>& metrics) {
  std::optional<GramMatrix> ntk;
  auto get_ntk = [&]() -> const GramMatrix& {
    if (!ntk) ntk = empirical_ntk_gram(*ctx.net, *ctx.params, *ctx.probes);
    return *ntk;
  };
  std::map<std::string, MetricScore> out;
  for (const auto& m : metrics) {
    check_metric_name(m);
    if (m == "fnorm") out[m] = fnorm_score(get_ntk());
    else if (m == "mean") out[m] = mean_score(get_ntk());
    else if (m == "ncn") out[m] = ncn_score(get_ntk());
    else if (m == "relu")
      out[m] = relu_score(relu_ntk_gram(*ctx.probes, std::max<std::size_t>(1, ctx.net->weighted_depth())));
    else out[m] = vintk_score(vintk_gram(get_ntk(), fourier_gram(*ctx.unit_probes, ctx.fourier)));
  }
  return out;
}

/// Seed for a candidate's NTK initialization under a harness seed.
inline std::uint64_t scoring_seed(std::uint64_t harness_seed) {
  return harness_seed * 0x2545F4914F6CDD1DULL + 7;
}

/// Metrics that need no NTK: the candidate's MAC count, and its trained
/// accuracy on the task (ground truth).
inline bool is_oracle_metric(const std::string& m) { return m == "mac" || m == "accuracy"; }

inline void check_search_metric(const std::string& m) {
  if (!is_oracle_metric(m)) check_metric_name(m);
}

// ---------------------------------------------------------------------------
// Correlation

struct CorrelationRow {
  Genotype genotype;
  std::uint64_t mac = 0;
  double accuracy = 0.0;
  bool diverged = false;
  std::map<std::string, double> scores;
};

struct MetricTau {
  std::string metric;
  std::optional<double> tau;  // absent when undefined or the sample is too small
  std::optional<double> p_value;
  std::string note;
};

struct CorrelationReport {
  std::string space_id;
  ProxyTask task;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::vector<std::string> metrics;
  std::vector<CorrelationRow> rows;  // sorted by genotype encoding
  std::vector<MetricTau> taus;

  const MetricTau& tau_of(const std::string& m) const {
    for (const auto& t : taus)
      if (t.metric == m) return t;
    throw Error("report has no tau for metric '" + m + "'");
  }
};

/// Minimum sample count for a reported tau.
inline constexpr std::size_t kMinTauSamples = 30;

/// Thread-safe memo of trained accuracies keyed by task and genotype.
class AccuracyCache {
 public:
  std::optional<TrainOutcome> find(const ProxyTask& t, const Genotype& g) const {
    std::lock_guard lock(mu_);
    auto it = map_.find(key(t, g));
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(const ProxyTask& t, const Genotype& g, TrainOutcome o) {
    std::lock_guard lock(mu_);
    map_[key(t, g)] = o;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return map_.size();
  }

 private:
  static std::string key(const ProxyTask& t, const Genotype& g) {
    return t.fingerprint() + "|" + g.encode();
  }
  mutable std::mutex mu_;
  std::map<std::string, TrainOutcome> map_;
};

/// `n` distinct genotypes drawn from the space in a seed-determined order.
inline std::vector<Genotype> sample_distinct(const SearchSpaceDef& space, std::size_t n,
                                             std::uint64_t seed) {
  if (n > space.cardinality())
    throw Error("cannot draw " + std::to_string(n) + " distinct genotypes from '" + space.id +
                "' (cardinality " + std::to_string(space.cardinality()) + ")");
  std::set<Genotype> seen;
  std::vector<Genotype> out;
  std::mt19937_64 rng(seed);
  // Enumerating small spaces avoids long rejection runs near saturation.
  if (space.cardinality() <= 4096) {
    auto all = enumerate_space(space);
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, all.size() - 1);
      std::swap(all[i], all[u(rng)]);
      out.push_back(all[i]);
    }
    return out;
  }
  while (out.size() < n) {
    const auto g = sample_genotype(space, rng());
    if (seen.insert(g).second) out.push_back(g);
  }
  return out;
}

struct HarnessOptions {
  ScoreConfig scoring;
  std::size_t jobs = 1;
  AccuracyCache* cache = nullptr;
};

/// Computes tau for each metric over completed rows.
inline std::vector<MetricTau> taus_for(const std::vector<CorrelationRow>& rows,
                                       const std::vector<std::string>& metrics) {
  std::vector<MetricTau> out;
  std::vector<double> acc;
  for (const auto& r : rows) acc.push_back(r.accuracy);
  for (const auto& m : metrics) {
    MetricTau t{m, std::nullopt, std::nullopt, ""};
    if (rows.size() < kMinTauSamples) {
      t.note = "insufficient sample (" + std::to_string(rows.size()) + " < " +
               std::to_string(kMinTauSamples) + ")";
    } else {
      std::vector<double> s;
      for (const auto& r : rows) s.push_back(r.scores.at(m));
      const auto k = kendall_tau(s, acc);
      if (k.defined) {
        t.tau = k.tau;
        t.p_value = k.p_value;
      } else {
        t.note = "tau undefined (constant ranking)";
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

/// Samples distinct genotypes, trains each on the task (memoized through the
/// cache), scores each with every metric on a shared probe batch, and
/// computes tau per metric. Rows come back in genotype-encoding order; no
/// output depends on `jobs`.
inline CorrelationReport correlate_space(const SearchSpaceDef& space, const ProxyTask& task,
                                         std::size_t n_samples,
                                         const std::vector<std::string>& metrics,
                                         std::uint64_t seed, const HarnessOptions& opt = {}) {
  for (const auto& m : metrics) check_search_metric(m);
  std::vector<std::string> ntk_metrics;
  for (const auto& m : metrics)
    if (!is_oracle_metric(m)) ntk_metrics.push_back(m);
  const auto data = make_dataset(task);
  const auto probes = draw_probes(data, opt.scoring.probe_count, seed);
  const auto unit = normalize_to_unit(probes, data.range);
  auto genotypes = sample_distinct(space, n_samples, seed);
  std::sort(genotypes.begin(), genotypes.end(),
            [](const Genotype& a, const Genotype& b) { return a.encode() < b.encode(); });

  CorrelationReport rep;
  rep.space_id = space.id;
  rep.task = task;
  rep.seed = seed;
  rep.n_samples = n_samples;
  rep.metrics = metrics;
  rep.rows.resize(genotypes.size());
  const FeatureShape input{task.image_size, task.image_size, 3};
  parallel_for(genotypes.size(), opt.jobs, [&](std::size_t i) {
    const auto& g = genotypes[i];
    auto& row = rep.rows[i];
    row.genotype = g;
    const auto net = build_network(g, task.classes, input);
    row.mac = net.macs();
    std::optional<TrainOutcome> o = opt.cache ? opt.cache->find(task, g) : std::nullopt;
    if (!o) {
      o = train_classifier(net, data.x_train, data.y_train, data.x_test, data.y_test,
                           {task.steps, task.lr}, training_seed(task));
      if (opt.cache) opt.cache->put(task, g, *o);
    }
    row.accuracy = o->accuracy;
    row.diverged = o->diverged;
    const auto params = init_params(net, scoring_seed(seed));
    const ScoringContext ctx{&net, &params, &probes, &unit, opt.scoring.fourier};
    for (const auto& [m, s] : score_metrics(ctx, ntk_metrics)) row.scores[m] = s.value;
    for (const auto& m : metrics)
      if (is_oracle_metric(m)) row.scores[m] = m == "mac" ? static_cast<double>(row.mac) : row.accuracy;
  });
  rep.taus = taus_for(rep.rows, metrics);
  return rep;
}

struct ContrastSeed {
  std::uint64_t seed = 0;
  std::optional<double> tau_full;
  std::optional<double> tau_msa_only;
  std::optional<double> delta;
};

struct ContrastReport {
  std::string base_space;
  std::string restricted_space;
  std::string metric;
  std::size_t n_samples = 0;
  std::vector<ContrastSeed> seeds;
  std::vector<CorrelationReport> full, msa_only;

  /// Median of the defined deltas; empty when none is defined.
  std::optional<double> median_delta() const {
    std::vector<double> d;
    for (const auto& s : seeds)
      if (s.delta) d.push_back(*s.delta);
    if (d.empty()) return std::nullopt;
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size() / 2;
    return d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  }
};

inline std::string msa_only_variant(const std::string& base) {
  const std::string id = base + "-msa-only";
  builtin_space(id);  // throws for spaces without a restriction
  return id;
}

/// Runs correlate_space on the base space and its MSA-only restriction for
/// each seed with shared task settings. A restricted space smaller than the
/// requested sample is fully enumerated; below the tau minimum no tau is
/// emitted for it.
inline ContrastReport msa_only_contrast(const std::string& base_space, const ProxyTask& task,
                                        std::size_t n_samples, const std::string& metric,
                                        const std::vector<std::uint64_t>& seeds,
                                        const HarnessOptions& opt = {}) {
  const auto full = builtin_space(base_space);
  const auto restricted = builtin_space(msa_only_variant(base_space));
  ContrastReport rep;
  rep.base_space = full.id;
  rep.restricted_space = restricted.id;
  rep.metric = metric;
  rep.n_samples = n_samples;
  for (auto s : seeds) {
    auto a = correlate_space(full, task, std::min<std::uint64_t>(n_samples, full.cardinality()),
                             {metric}, s, opt);
    auto b = correlate_space(restricted, task,
                             std::min<std::uint64_t>(n_samples, restricted.cardinality()), {metric},
                             s, opt);
    ContrastSeed cs{s, a.tau_of(metric).tau, b.tau_of(metric).tau, std::nullopt};
    if (cs.tau_full && cs.tau_msa_only) cs.delta = *cs.tau_msa_only - *cs.tau_full;
    rep.seeds.push_back(cs);
    rep.full.push_back(std::move(a));
    rep.msa_only.push_back(std::move(b));
  }
  return rep;
}

}  // namespace vintk
