#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vintk/config.hpp"
#include "vintk/report.hpp"

using namespace vintk;
namespace fs = std::filesystem;

namespace {

// Flag values land here as text, keyed like the config file, and are merged
// over the file so flags win.
struct Overrides {
  std::map<std::string, std::string> text;
  std::map<std::string, CLI::Option*> opts;
  std::set<std::string> flags;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    opts[key] = app->add_option(flag, text[key], help);
  }
  void add_flag(CLI::App* app, const std::string& flag, const std::string& key,
                const std::string& help) {
    opts[key] = app->add_flag(flag, help);
    flags.insert(key);
  }
  void apply(KeyValueConfig& kv) const {
    for (const auto& [key, opt] : opts) {
      if (!opt->count()) continue;
      kv.set(key, flags.count(key) ? "true" : text.at(key));
    }
  }
};

const std::vector<std::string> kTaskKeys{"task.dataset", "task.image_size", "task.n_train",
                                         "task.n_test",  "task.steps",      "task.lr",
                                         "task.noise",   "task.seed"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::uint64_t require_seed(const KeyValueConfig& kv) {
  if (!kv.has("seed")) throw ParseError("a seed is required (--seed or 'seed' in the config)");
  return KeyValueConfig::convert<std::uint64_t>("seed", kv.get("seed", ""));
}

ProxyTask task_from(const KeyValueConfig& kv) {
  ProxyTask t;
  t.dataset = kv.get("task.dataset", t.dataset);
  t.image_size = kv.get<std::size_t>("task.image_size", t.image_size);
  t.n_train = kv.get<std::size_t>("task.n_train", t.n_train);
  t.n_test = kv.get<std::size_t>("task.n_test", t.n_test);
  t.steps = kv.get<std::size_t>("task.steps", t.steps);
  t.lr = kv.get<double>("task.lr", t.lr);
  t.noise = kv.get<double>("task.noise", t.noise);
  t.seed = kv.get<std::uint64_t>("task.seed", t.seed);
  t.validate();
  return t;
}

FourierConfig fourier_from(const KeyValueConfig& kv) {
  FourierConfig f;
  f.n_freq = kv.get<std::size_t>("fourier.n_freq", f.n_freq);
  f.p = kv.get<double>("fourier.p", f.p);
  f.validate();
  return f;
}

/// "0..4" or "0,3,7".
std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  if (auto dots = s.find(".."); dots != std::string::npos) {
    const auto lo = KeyValueConfig::convert<std::uint64_t>("seeds", KeyValueConfig::trim(s.substr(0, dots)));
    const auto hi = KeyValueConfig::convert<std::uint64_t>("seeds", KeyValueConfig::trim(s.substr(dots + 2)));
    if (hi < lo) throw ParseError("empty seed range '" + s + "'");
    for (auto v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  for (const auto& item : split_list(s)) out.push_back(KeyValueConfig::convert<std::uint64_t>("seeds", item));
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(KeyValueConfig::convert<double>("t_grid", item));
  return out;
}

Json effective(const KeyValueConfig& kv) {
  Json j = Json::object();
  for (const auto& [k, v] : kv.values()) j[k] = v;
  return j;
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

fs::path out_dir(const KeyValueConfig& kv) { return kv.get("out_dir", std::string(".")); }

// --- commands ---------------------------------------------------------------

int cmd_score(const KeyValueConfig& kv, const std::string& encoding, std::size_t) {
  kv.check_keys(with({"seed", "out_dir", "score.metric", "score.out", "probe.count", "probe.seed",
                      "fourier.n_freq", "fourier.p"},
                     kTaskKeys));
  const auto seed = require_seed(kv);
  const auto g = decode_genotype(encoding);
  validate(g, builtin_space(g.space_id));
  ProbeSpec ps;
  ps.task = task_from(kv);
  ps.count = kv.get<std::size_t>("probe.count", ps.count);
  ps.seed = kv.get<std::uint64_t>("probe.seed", seed);
  const auto metric = kv.get("score.metric", std::string("vintk"));
  check_metric_name(metric);
  const auto s = score_genotype(g, metric, ProbeSet::make(ps), seed, fourier_from(kv));
  Json j = to_json(s);
  j["seed"] = seed;
  j["genotype"] = g.encode();
  j["config"] = {{"task", to_json(ps.task)},
                 {"probe_count", ps.count},
                 {"probe_seed", ps.seed},
                 {"fourier", to_json(fourier_from(kv))},
                 {"effective", effective(kv)}};
  const auto text = dump(j);
  if (kv.has("score.out")) atomic_write(kv.get("score.out", ""), text);
  else std::cout << text;
  return 0;
}

int cmd_correlate(const KeyValueConfig& kv, std::size_t jobs) {
  kv.check_keys(with({"seed", "out_dir", "correlate.space", "correlate.n", "correlate.metrics",
                      "correlate.contrast", "correlate.seeds", "probe.count", "fourier.n_freq",
                      "fourier.p"},
                     kTaskKeys));
  const auto seed = require_seed(kv);
  const auto task = task_from(kv);
  const auto space_id = kv.get("correlate.space", std::string("pure-vit"));
  const auto space = builtin_space(space_id);
  const auto n = kv.get<std::size_t>("correlate.n", 60);
  auto metrics = split_list(kv.get("correlate.metrics", std::string("fnorm,mean,ncn,relu,vintk")));
  for (const auto& m : metrics) check_search_metric(m);
  AccuracyCache cache;
  HarnessOptions opt;
  opt.scoring.probe_count = kv.get<std::size_t>("probe.count", opt.scoring.probe_count);
  opt.scoring.fourier = fourier_from(kv);
  opt.jobs = jobs;
  opt.cache = &cache;
  const auto dir = out_dir(kv);

  if (kv.get<bool>("correlate.contrast", false)) {
    if (metrics.size() != 1) throw ParseError("the MSA-only contrast takes exactly one metric");
    const auto seeds = parse_seeds(kv.get("correlate.seeds", std::to_string(seed)));
    const auto rep = msa_only_contrast(space.id, task, n, metrics[0], seeds, opt);
    Json per = Json::array();
    for (const auto& s : rep.seeds)
      per.push_back({{"seed", s.seed},
                     {"tau_full", optional_num(s.tau_full)},
                     {"tau_msa_only", optional_num(s.tau_msa_only)},
                     {"delta", optional_num(s.delta)}});
    Json j = {{"base_space", rep.base_space},
              {"restricted_space", rep.restricted_space},
              {"metric", rep.metric},
              {"n_samples", n},
              {"seeds", per},
              {"median_delta", optional_num(rep.median_delta())},
              {"config", {{"task", to_json(task)}, {"effective", effective(kv)}}}};
    Json full = Json::array(), restricted = Json::array();
    for (const auto& r : rep.full) full.push_back(to_json(r));
    for (const auto& r : rep.msa_only) restricted.push_back(to_json(r));
    j["reports"] = {{"full", full}, {"msa_only", restricted}};
    const auto path = dir / ("contrast-" + space.id + "-" + metrics[0] + ".json");
    atomic_write(path, dump(j));
    std::cout << path.string() << "\n";
    return 0;
  }

  const auto rep = correlate_space(space, task, n, metrics, seed, opt);
  Json j = to_json(rep);
  j["config"] = {{"probe_count", opt.scoring.probe_count},
                 {"fourier", to_json(opt.scoring.fourier)},
                 {"effective", effective(kv)}};
  const auto stem = "correlate-" + space.id + "-seed" + std::to_string(seed);
  atomic_write(dir / (stem + ".json"), dump(j));
  atomic_write(dir / (stem + ".csv"), to_csv(rep));
  std::cout << (dir / (stem + ".json")).string() << "\n" << (dir / (stem + ".csv")).string() << "\n";
  return 0;
}

int cmd_search(const KeyValueConfig& kv, std::size_t jobs) {
  kv.check_keys(with({"seed", "out_dir", "search.space", "search.method", "search.metric",
                      "search.population", "search.generations", "search.mutation_prob",
                      "search.crossover_prob", "search.mac_cap", "search.budget", "search.out",
                      "probe.count", "probe.seed", "fourier.n_freq", "fourier.p"},
                     kTaskKeys));
  SearchConfig c;
  c.seed = require_seed(kv);
  const auto space = builtin_space(kv.get("search.space", std::string("pure-vit")));
  const auto method = kv.get("search.method", std::string("evolutionary"));
  c.metric = kv.get("search.metric", c.metric);
  c.population = kv.get<std::size_t>("search.population", c.population);
  c.generations = kv.get<std::size_t>("search.generations", c.generations);
  c.mutation_prob = kv.get<double>("search.mutation_prob", c.mutation_prob);
  c.crossover_prob = kv.get<double>("search.crossover_prob", c.crossover_prob);
  c.mac_cap = kv.get<double>("search.mac_cap", c.mac_cap);
  c.budget = kv.get<std::size_t>("search.budget", c.budget);
  c.probes.task = task_from(kv);
  c.probes.count = kv.get<std::size_t>("probe.count", c.probes.count);
  c.probes.seed = kv.get<std::uint64_t>("probe.seed", c.seed);
  c.fourier = fourier_from(kv);
  c.validate();
  AccuracyCache cache;
  const auto r = run_search(method, space, c, jobs, &cache);
  Json j = to_json(r);
  j["config"] = to_json(c);
  j["config"]["effective"] = effective(kv);
  const fs::path path = kv.get("search.out", (out_dir(kv) / ("search-" + space.id + "-" + method +
                                                               "-seed" + std::to_string(c.seed) +
                                                               ".json"))
                                                  .string());
  atomic_write(path, dump(j));
  std::cout << path.string() << "\n";
  return 0;
}

/// Gram over the probe batch from one of: ntk:<genotype>, vintk:<genotype>,
/// fourier, relu[:depth].
GramMatrix gram_from_source(const std::string& src, const ProbeSet& probes, std::uint64_t seed,
                            const FourierConfig& fourier) {
  const auto colon = src.find(':');
  const auto kind = src.substr(0, colon);
  const auto arg = colon == std::string::npos ? std::string() : src.substr(colon + 1);
  if (kind == "fourier") return fourier_gram(probes.unit, fourier);
  if (kind == "relu")
    return relu_ntk_gram(probes.batch,
                         arg.empty() ? 1 : KeyValueConfig::convert<std::size_t>("source depth", arg));
  if (kind == "ntk" || kind == "vintk") {
    if (arg.empty()) throw ParseError("gram source '" + kind + "' needs a genotype, e.g. " + kind +
                                      ":pure-vit:0.0.0.0");
    const auto g = decode_genotype(arg);
    validate(g, builtin_space(g.space_id));
    const auto& t = probes.task;
    const auto net = build_network(g, t.classes, {t.image_size, t.image_size, 3});
    const auto ntk = empirical_ntk_gram(net, init_params(net, scoring_seed(seed)), probes.batch);
    if (kind == "ntk") return ntk;
    return vintk_gram(ntk, fourier_gram(probes.unit, fourier));
  }
  throw ParseError("unknown gram source '" + src + "' (expected ntk:<g>, vintk:<g>, fourier, relu[:depth])");
}

int cmd_spectral(const KeyValueConfig& kv, std::size_t) {
  kv.check_keys(with({"seed", "out_dir", "spectral.source", "spectral.eta", "spectral.t_grid",
                      "spectral.out", "probe.count", "probe.seed", "fourier.n_freq", "fourier.p"},
                     kTaskKeys));
  const auto seed = require_seed(kv);
  ProbeSpec ps;
  ps.task = task_from(kv);
  ps.count = kv.get<std::size_t>("probe.count", ps.count);
  ps.seed = kv.get<std::uint64_t>("probe.seed", seed);
  const auto probes = ProbeSet::make(ps);
  const auto fourier = fourier_from(kv);
  const auto source = kv.get("spectral.source", std::string("ntk:pure-vit:0.1.1.1"));
  const auto gram = gram_from_source(source, probes, seed, fourier);
  const double eta = kv.get<double>("spectral.eta", 0.1);
  const auto grid = parse_grid(kv.get("spectral.t_grid", std::string("0,1,2,5,10,20,50,100")));
  // Targets are the probe labels.
  std::vector<double> y(probes.batch.labels.begin(), probes.batch.labels.end());
  const auto tr = simulate_residual_dynamics(gram, y, eta, grid);
  const fs::path csv = kv.get("spectral.out", (out_dir(kv) / ("spectral-seed" + std::to_string(seed) +
                                                               ".csv"))
                                                  .string());
  Json half = Json::array();
  for (std::size_t i = 0; i < tr.eigenvalues.size(); ++i) half.push_back(num(tr.half_life(i)));
  Json eig = Json::array();
  for (double v : tr.eigenvalues) eig.push_back(num(v));
  Json side = {{"source", source}, {"eta", eta},      {"seed", seed},
               {"y", y},           {"eigenvalues", eig}, {"half_life", half},
               {"config", {{"task", to_json(ps.task)},
                           {"probe_count", ps.count},
                           {"probe_seed", ps.seed},
                           {"fourier", to_json(fourier)},
                           {"effective", effective(kv)}}}};
  atomic_write(csv, to_csv(tr));
  auto side_path = csv;
  side_path.replace_extension(".json");
  atomic_write(side_path, dump(side));
  std::cout << csv.string() << "\n" << side_path.string() << "\n";
  return 0;
}

int cmd_spiked(const KeyValueConfig& kv, std::size_t jobs) {
  kv.check_keys({"seed", "out_dir", "spiked.seeds", "spiked.d", "spiked.d0", "spiked.r1",
                 "spiked.r2", "spiked.n", "spiked.n_test", "spiked.noise_std",
                 "spiked.activation", "spiked.regime", "spiked.beta", "spiked.k", "spiked.width",
                 "spiked.steps", "spiked.lr", "spiked.ridge", "spiked.out"});
  std::vector<std::uint64_t> seeds;
  if (kv.has("spiked.seeds")) seeds = parse_seeds(kv.get("spiked.seeds", ""));
  else seeds = {require_seed(kv)};
  SpikedConfig base;
  base.d = kv.get<std::size_t>("spiked.d", base.d);
  base.d0 = kv.get<std::size_t>("spiked.d0", base.d0);
  base.r1 = kv.get<double>("spiked.r1", base.r1);
  base.r2 = kv.get<double>("spiked.r2", base.r2);
  base.n = kv.get<std::size_t>("spiked.n", base.n);
  base.n_test = kv.get<std::size_t>("spiked.n_test", base.n_test);
  base.noise_std = kv.get<double>("spiked.noise_std", base.noise_std);
  base.activation = kv.get("spiked.activation", base.activation);
  base.beta = kv.get<double>("spiked.beta", base.beta);
  base.k = kv.get<double>("spiked.k", base.k);
  GapConfig gc;
  gc.width = kv.get<std::size_t>("spiked.width", gc.width);
  gc.steps = kv.get<std::size_t>("spiked.steps", gc.steps);
  gc.lr = kv.get<double>("spiked.lr", gc.lr);
  gc.ridge = kv.get<double>("spiked.ridge", gc.ridge);
  const auto regime_text = kv.get("spiked.regime", std::string("both"));
  std::vector<TargetRegime> regimes;
  if (regime_text == "low" || regime_text == "both") regimes.push_back(TargetRegime::Low);
  if (regime_text == "high" || regime_text == "both") regimes.push_back(TargetRegime::High);
  if (regimes.empty()) throw ParseError("regime must be low, high or both");

  std::vector<SpikedRow> rows;
  for (auto s : seeds)
    for (auto reg : regimes) {
      SpikedConfig c = base;
      c.seed = s;
      c.regime = reg;
      c.validate();
      rows.push_back({c, {}});
    }
  parallel_for(rows.size(), jobs, [&](std::size_t i) { rows[i].risk = approximation_gap(rows[i].cfg, gc); });

  const fs::path csv = kv.get("spiked.out", (out_dir(kv) / "spiked.csv").string());
  auto side_path = csv;
  side_path.replace_extension(".json");
  Json cfg = to_json(base);
  cfg.erase("regime");
  Json side = {{"seeds", seeds},
               {"regime", regime_text},
               {"spiked", cfg},
               {"training", to_json(gc)},
               {"effective", effective(kv)}};
  atomic_write(csv, spiked_csv(rows));
  atomic_write(side_path, dump(side));
  std::cout << csv.string() << "\n" << side_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free transformer architecture scoring with NTK metrics"};
  app.require_subcommand(1);
  std::size_t jobs = 1;
  std::string config_path;

  auto common = [&](CLI::App* sub, Overrides& ov) {
    sub->add_option("--config", config_path, "key = value config file (flags override it)");
    sub->add_option("--jobs", jobs, "worker threads (never changes output)")->check(CLI::PositiveNumber);
    ov.add(sub, "--seed", "seed", "global seed (required)");
    ov.add(sub, "--out-dir", "out_dir", "directory for output files");
    ov.add(sub, "--steps", "task.steps", "training steps per architecture");
    ov.add(sub, "--lr", "task.lr", "peak learning rate");
    ov.add(sub, "--noise", "task.noise", "pixel noise of the proxy task");
    ov.add(sub, "--task-seed", "task.seed", "proxy task data seed");
  };

  Overrides o_score, o_corr, o_search, o_spec, o_spiked;
  std::string genotype;

  auto* score = app.add_subcommand("score", "score one genotype with one metric");
  common(score, o_score);
  score->add_option("genotype", genotype, "genotype encoding, e.g. pure-vit:0.1.2.3")->required();
  o_score.add(score, "--metric", "score.metric", "fnorm|mean|ncn|relu|vintk");
  o_score.add(score, "--probe-count", "probe.count", "probe batch size D");
  o_score.add(score, "--probe-seed", "probe.seed", "probe selection seed (default: --seed)");
  o_score.add(score, "--out", "score.out", "write JSON here instead of stdout");

  auto* corr = app.add_subcommand("correlate", "train sampled architectures and rank-correlate scores");
  common(corr, o_corr);
  o_corr.add(corr, "--space", "correlate.space", "search space id");
  o_corr.add(corr, "--n", "correlate.n", "number of sampled architectures");
  o_corr.add(corr, "--metrics", "correlate.metrics", "comma-separated metric list");
  o_corr.add(corr, "--probe-count", "probe.count", "probe batch size D");
  o_corr.add_flag(corr, "--contrast", "correlate.contrast", "run the MSA-only contrast instead");
  o_corr.add(corr, "--seeds", "correlate.seeds", "seed list for --contrast, e.g. 0..4");

  auto* search = app.add_subcommand("search", "training-free architecture search under a MAC cap");
  common(search, o_search);
  o_search.add(search, "--space", "search.space", "search space id");
  o_search.add(search, "--method", "search.method", "random|evolutionary");
  o_search.add(search, "--metric", "search.metric", "ranking metric (or mac|accuracy)");
  o_search.add(search, "--population", "search.population", "population size");
  o_search.add(search, "--generations", "search.generations", "generation count");
  o_search.add(search, "--mac-cap", "search.mac_cap", "hard MAC limit (inf for none)");
  o_search.add(search, "--budget", "search.budget", "random-search evaluation budget");
  o_search.add(search, "--probe-count", "probe.count", "probe batch size D");
  o_search.add(search, "--out", "search.out", "result JSON path");

  auto* spec = app.add_subcommand("spectral", "residual dynamics of kernel gradient descent");
  common(spec, o_spec);
  o_spec.add(spec, "--source", "spectral.source", "ntk:<g>|vintk:<g>|fourier|relu[:depth]");
  o_spec.add(spec, "--eta", "spectral.eta", "learning rate");
  o_spec.add(spec, "--t-grid", "spectral.t_grid", "comma-separated times");
  o_spec.add(spec, "--probe-count", "probe.count", "probe batch size D");
  o_spec.add(spec, "--out", "spectral.out", "CSV path");

  auto* spiked = app.add_subcommand("spiked", "NN vs NTK risk on the spiked-covariance model");
  common(spiked, o_spiked);
  o_spiked.add(spiked, "--seeds", "spiked.seeds", "seed list, e.g. 0..4");
  o_spiked.add(spiked, "--d", "spiked.d", "input dimension");
  o_spiked.add(spiked, "--d0", "spiked.d0", "signal subspace dimension");
  o_spiked.add(spiked, "--r1", "spiked.r1", "signal radius");
  o_spiked.add(spiked, "--r2", "spiked.r2", "noise radius");
  o_spiked.add(spiked, "--n", "spiked.n", "training samples");
  o_spiked.add(spiked, "--regime", "spiked.regime", "low|high|both");
  o_spiked.add(spiked, "--width", "spiked.width", "hidden width");
  o_spiked.add(spiked, "--train-steps", "spiked.steps", "gradient steps");
  o_spiked.add(spiked, "--out", "spiked.out", "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    KeyValueConfig kv = config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(config_path);
    if (*score) {
      o_score.apply(kv);
      return cmd_score(kv, genotype, jobs);
    }
    if (*corr) {
      o_corr.apply(kv);
      return cmd_correlate(kv, jobs);
    }
    if (*search) {
      o_search.apply(kv);
      return cmd_search(kv, jobs);
    }
    if (*spec) {
      o_spec.apply(kv);
      return cmd_spectral(kv, jobs);
    }
    o_spiked.apply(kv);
    return cmd_spiked(kv, jobs);
  } catch (const InfeasibleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 1;
  }
}
