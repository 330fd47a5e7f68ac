#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vintk/archspace.hpp"
#include "vintk/error.hpp"
#include "vintk/eval.hpp"
#include "vintk/ntk.hpp"
#include "vintk/parallel.hpp"

namespace vintk {

/// Where the probe batch comes from: `count` training images of the task,
/// chosen by `seed`.
struct ProbeSpec {
  ProxyTask task;
  std::size_t count = 16;
  std::uint64_t seed = 0;
};

/// A probe batch shared by every candidate of one run.
struct ProbeSet {
  ProxyTask task;
  ProbeBatch batch;
  ProbeBatch unit;  // min-max normalized for the Fourier kernel

  static ProbeSet make(const ProbeSpec& spec) {
    const auto ds = make_dataset(spec.task);
    auto b = draw_probes(ds, spec.count, spec.seed);
    auto u = normalize_to_unit(b, ds.range);
    return {spec.task, std::move(b), std::move(u)};
  }
};

/// Builds the genotype's network at the probe task's signature, initializes
/// it from `seed`, and computes one metric. Pure in (g, metric, probes, seed).
inline MetricScore score_genotype(const Genotype& g, const std::string& metric,
                                  const ProbeSet& probes, std::uint64_t seed,
                                  const FourierConfig& fourier = {},
                                  AccuracyCache* cache = nullptr) {
  check_search_metric(metric);
  const auto& task = probes.task;
  const auto net = build_network(g, task.classes, {task.image_size, task.image_size, 3});
  MetricScore s;
  s.metric = metric;
  s.D = probes.batch.size();
  if (metric == "mac") {
    s.value = static_cast<double>(net.macs());
    return s;
  }
  if (metric == "accuracy") {
    std::optional<TrainOutcome> o = cache ? cache->find(task, g) : std::nullopt;
    if (!o) {
      o = train_proxy(g, task);
      if (cache) cache->put(task, g, *o);
    }
    s.value = o->accuracy;
    if (o->diverged) s.flags.push_back("diverged");
    return s;
  }
  const auto params = init_params(net, scoring_seed(seed));
  const ScoringContext ctx{&net, &params, &probes.batch, &probes.unit, fourier};
  return score_metrics(ctx, {metric}).at(metric);
}

inline MetricScore score_genotype(const Genotype& g, const std::string& metric,
                                  const ProbeSpec& spec, std::uint64_t seed) {
  return score_genotype(g, metric, ProbeSet::make(spec), seed);
}

struct SearchConfig {
  std::string metric = "vintk";
  std::size_t population = 8;
  std::size_t generations = 4;
  double mutation_prob = 0.9;
  double crossover_prob = 0.5;
  double mac_cap = std::numeric_limits<double>::infinity();
  /// Evaluations for random search; 0 means population * (generations + 1).
  std::size_t budget = 0;
  ProbeSpec probes;
  FourierConfig fourier;
  std::uint64_t seed = 0;

  void validate() const {
    check_search_metric(metric);
    if (population < 2) throw Error("population must be >= 2");
    if (!(mutation_prob >= 0 && mutation_prob <= 1)) throw Error("mutation_prob must be in [0,1]");
    if (!(crossover_prob >= 0 && crossover_prob <= 1))
      throw Error("crossover_prob must be in [0,1]");
    if (!(mac_cap > 0)) throw Error("mac_cap must be > 0");
    probes.task.validate();
    fourier.validate();
  }

  std::size_t random_budget() const { return budget ? budget : population * (generations + 1); }
};

struct Evaluation {
  Genotype genotype;
  double score = 0.0;
  std::uint64_t mac = 0;
  std::size_t ordinal = 0;
};

struct SearchResult {
  std::string space_id;
  std::string method;
  std::string metric;
  double mac_cap = 0.0;
  Genotype best;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<Evaluation> history;
  std::size_t rejections = 0;  // infeasible draws that were resampled

  std::size_t evaluations() const { return history.size(); }
};

inline constexpr std::size_t kStarvationLimit = 1000;
inline constexpr std::size_t kRepeatLimit = 100;

namespace detail {

/// Memoized, cap-checked scoring shared by both searches.
class Evaluator {
 public:
  Evaluator(const SearchSpaceDef& space, const SearchConfig& cfg, std::size_t jobs,
            AccuracyCache* cache)
      : space_(space), cfg_(cfg), jobs_(jobs), cache_(cache), probes_(ProbeSet::make(cfg.probes)) {
    input_ = {cfg.probes.task.image_size, cfg.probes.task.image_size, 3};
  }

  std::uint64_t mac_of(const Genotype& g) {
    auto it = macs_.find(g);
    if (it != macs_.end()) return it->second;
    const auto m = build_network(g, cfg_.probes.task.classes, input_).macs();
    macs_.emplace(g, m);
    return m;
  }
  bool feasible(const Genotype& g) { return static_cast<double>(mac_of(g)) <= cfg_.mac_cap; }
  bool seen(const Genotype& g) const { return scores_.count(g) > 0; }
  double score(const Genotype& g) const { return scores_.at(g); }

  /// Scores the not-yet-seen genotypes in order (in parallel) and appends
  /// them to the history.
  void evaluate(const std::vector<Genotype>& batch, SearchResult& r) {
    std::vector<Genotype> fresh;
    for (const auto& g : batch)
      if (!seen(g) && std::find(fresh.begin(), fresh.end(), g) == fresh.end()) fresh.push_back(g);
    std::vector<double> values(fresh.size());
    for (const auto& g : fresh) mac_of(g);  // fill before workers read the map
    parallel_for(fresh.size(), jobs_, [&](std::size_t i) {
      values[i] =
          score_genotype(fresh[i], cfg_.metric, probes_, cfg_.seed, cfg_.fourier, cache_).value;
    });
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      const auto& g = fresh[i];
      if (!feasible(g)) throw Error("internal: infeasible genotype reached evaluation");
      scores_.emplace(g, values[i]);
      r.history.push_back({g, values[i], mac_of(g), r.history.size()});
      // Ties keep the earlier evaluation.
      if (values[i] > r.best_score || r.history.size() == 1) {
        r.best_score = values[i];
        r.best = g;
      }
    }
  }

 private:
  const SearchSpaceDef& space_;
  const SearchConfig& cfg_;
  std::size_t jobs_;
  AccuracyCache* cache_;
  ProbeSet probes_;
  FeatureShape input_;
  std::map<Genotype, std::uint64_t> macs_;
  std::map<Genotype, double> scores_;
};

/// Draws genotypes uniformly until one is feasible. Throws after
/// kStarvationLimit consecutive infeasible draws.
inline Genotype draw_feasible(const SearchSpaceDef& space, Evaluator& ev, std::mt19937_64& rng,
                              SearchResult& r) {
  for (std::size_t tries = 0; tries < kStarvationLimit; ++tries) {
    auto g = sample_genotype(space, rng());
    if (ev.feasible(g)) return g;
    ++r.rejections;
  }
  throw InfeasibleError("no feasible genotype in " + std::to_string(kStarvationLimit) +
                        " consecutive draws under mac_cap " + std::to_string(r.mac_cap));
}

/// Up to `n` distinct feasible genotypes. Stops early once the feasible part
/// of the space looks exhausted (kStarvationLimit draws without a new one).
inline std::vector<Genotype> distinct_feasible(const SearchSpaceDef& space, Evaluator& ev,
                                               std::mt19937_64& rng, SearchResult& r,
                                               std::size_t n, const std::set<Genotype>& exclude) {
  std::vector<Genotype> out;
  std::set<Genotype> taken = exclude;
  std::size_t stale = 0;
  while (out.size() < n && stale < kStarvationLimit) {
    auto g = draw_feasible(space, ev, rng, r);
    if (taken.insert(g).second) {
      out.push_back(g);
      stale = 0;
    } else {
      ++stale;
    }
  }
  return out;
}

inline SearchResult start(const SearchSpaceDef& space, const SearchConfig& cfg, std::string method) {
  cfg.validate();
  SearchResult r;
  r.space_id = space.id;
  r.method = std::move(method);
  r.metric = cfg.metric;
  r.mac_cap = cfg.mac_cap;
  return r;
}

}  // namespace detail

/// Scores `cfg.random_budget()` distinct feasible genotypes drawn uniformly
/// and returns the best.
inline SearchResult random_search(const SearchSpaceDef& space, const SearchConfig& cfg,
                                  std::size_t jobs = 1, AccuracyCache* cache = nullptr) {
  auto r = detail::start(space, cfg, "random");
  detail::Evaluator ev(space, cfg, jobs, cache);
  std::mt19937_64 rng(cfg.seed);
  ev.evaluate(detail::distinct_feasible(space, ev, rng, r, cfg.random_budget(), {}), r);
  return r;
}

/// Tournament-2 selection, crossover and mutation with the configured
/// probabilities, elitism of one. Offspring are resampled until feasible;
/// repeated genotypes reuse their memoized score.
inline SearchResult evolutionary_search(const SearchSpaceDef& space, const SearchConfig& cfg,
                                        std::size_t jobs = 1, AccuracyCache* cache = nullptr) {
  auto r = detail::start(space, cfg, "evolutionary");
  detail::Evaluator ev(space, cfg, jobs, cache);
  // The initial population is the start of the random-search draw sequence.
  std::mt19937_64 rng(cfg.seed);
  std::vector<Genotype> pop = detail::distinct_feasible(space, ev, rng, r, cfg.population, {});
  ev.evaluate(pop, r);
  std::mt19937_64 evo(cfg.seed ^ 0xE70E70E70ULL);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  auto tournament = [&]() -> const Genotype& {
    std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
    const auto& a = pop[pick(evo)];
    const auto& b = pop[pick(evo)];
    return ev.score(b) > ev.score(a) ? b : a;
  };
  for (std::size_t gen = 0; gen < cfg.generations; ++gen) {
    const auto elite = *std::max_element(pop.begin(), pop.end(), [&](const auto& a, const auto& b) {
      return ev.score(a) < ev.score(b);
    });
    std::vector<Genotype> next{elite};
    while (next.size() < pop.size()) {
      std::size_t infeasible = 0, repeats = 0;
      while (true) {
        Genotype child = tournament();
        if (coin(evo) < cfg.crossover_prob) child = crossover(child, tournament(), evo());
        if (coin(evo) < cfg.mutation_prob) child = mutate(child, space, evo());
        if (!ev.feasible(child)) {
          ++r.rejections;
          if (++infeasible >= kStarvationLimit)
            throw InfeasibleError("no feasible offspring in " + std::to_string(kStarvationLimit) +
                                  " consecutive attempts");
          continue;
        }
        // Prefer unexplored offspring; accept a repeat once novelty looks
        // exhausted.
        const bool repeat = ev.seen(child) || std::find(next.begin(), next.end(), child) != next.end();
        if (!repeat || ++repeats >= kRepeatLimit) {
          next.push_back(std::move(child));
          break;
        }
      }
    }
    ev.evaluate(next, r);
    pop = std::move(next);
  }
  return r;
}

inline SearchResult run_search(const std::string& method, const SearchSpaceDef& space,
                               const SearchConfig& cfg, std::size_t jobs = 1,
                               AccuracyCache* cache = nullptr) {
  if (method == "random") return random_search(space, cfg, jobs, cache);
  if (method == "evolutionary") return evolutionary_search(space, cfg, jobs, cache);
  throw ParseError("unknown search method '" + method + "' (expected random|evolutionary)");
}

}  // namespace vintk
