#include <gtest/gtest.h>

#include <algorithm>

#include "vintk/search.hpp"

using namespace vintk;

namespace {

SearchConfig small_cfg(std::string metric, std::uint64_t seed = 0) {
  SearchConfig c;
  c.metric = std::move(metric);
  c.population = 6;
  c.generations = 4;
  c.probes.count = 6;
  c.probes.task.image_size = 8;
  c.probes.task.n_train = 16;
  c.probes.task.n_test = 16;
  c.seed = seed;
  return c;
}

std::uint64_t mac_at(const Genotype& g, const SearchConfig& c) {
  const auto s = c.probes.task.image_size;
  return build_network(g, c.probes.task.classes, {s, s, 3}).macs();
}

// Exhaustive oracle: score of every genotype in the space.
std::map<Genotype, double> all_scores(const SearchSpaceDef& space, const SearchConfig& c) {
  const auto probes = ProbeSet::make(c.probes);
  std::map<Genotype, double> out;
  for (const auto& g : enumerate_space(space))
    out[g] = score_genotype(g, c.metric, probes, c.seed).value;
  return out;
}

}  // namespace

TEST(ScoreGenotype, DeterministicAndMatchesLibraryPath) {
  const auto g = decode_genotype("pure-vit:0.1.2.3");
  const auto c = small_cfg("vintk");
  const auto a = score_genotype(g, "vintk", c.probes, 5);
  const auto b = score_genotype(g, "vintk", c.probes, 5);
  EXPECT_EQ(a.value, b.value);
  const auto probes = ProbeSet::make(c.probes);
  const auto net = build_network(g, 4, {8, 8, 3});
  const auto ntk = empirical_ntk_gram(net, init_params(net, scoring_seed(5)), probes.batch);
  EXPECT_EQ(a.value, vintk_score(vintk_gram(ntk, fourier_gram(probes.unit))).value);
  EXPECT_NE(score_genotype(g, "vintk", c.probes, 6).value, a.value);
  EXPECT_THROW(score_genotype(g, "synflow", c.probes, 0), ParseError);
}

TEST(RandomSearch, SingletonSpaceReturnsItsGenotype) {
  auto space = builtin_space("pure-vit");
  for (auto& d : space.dims) d.searchable = false;
  auto c = small_cfg("mean");
  c.budget = 5;
  const auto r = random_search(space, c);
  EXPECT_EQ(r.best, default_genotype(space));
  EXPECT_EQ(r.evaluations(), 1u);
}

TEST(RandomSearch, MacMetricPicksMaxMacAmongSampled) {
  auto c = small_cfg("mac", 3);
  c.budget = 20;
  const auto r = random_search(builtin_space("hybrid"), c);
  ASSERT_EQ(r.evaluations(), 20u);
  std::uint64_t best = 0;
  for (const auto& e : r.history) {
    EXPECT_EQ(static_cast<double>(e.mac), e.score);
    best = std::max(best, e.mac);
  }
  EXPECT_EQ(static_cast<double>(best), r.best_score);
  EXPECT_EQ(mac_at(r.best, c), best);
}

TEST(RandomSearch, CapIsRespectedAndStarvationThrows) {
  const auto space = builtin_space("hybrid");
  auto c = small_cfg("mac", 1);
  c.budget = 30;
  std::vector<std::uint64_t> macs;
  for (const auto& g : sample_distinct(space, 200, 0)) macs.push_back(mac_at(g, c));
  std::sort(macs.begin(), macs.end());
  c.mac_cap = static_cast<double>(macs[macs.size() / 2]);
  const auto r = random_search(space, c);
  EXPECT_GT(r.rejections, 0u);
  for (const auto& e : r.history) EXPECT_LE(static_cast<double>(e.mac), c.mac_cap);
  c.mac_cap = static_cast<double>(macs.front()) * 0.5;
  EXPECT_THROW(random_search(space, c), InfeasibleError);
  EXPECT_THROW(evolutionary_search(space, c), InfeasibleError);
}

TEST(RandomSearch, StopsWhenFeasibleSpaceIsExhausted) {
  auto c = small_cfg("mac");
  c.budget = 10;
  const auto r = random_search(builtin_space("pure-vit-msa-only"), c);
  EXPECT_EQ(r.evaluations(), 4u);
}

TEST(EvolutionarySearch, HistoryIsFeasibleUniqueAndBestIsMax) {
  const auto space = builtin_space("hybrid");
  auto c = small_cfg("mac", 2);
  c.mac_cap = 3.0e5;
  const auto r = evolutionary_search(space, c);
  std::set<Genotype> seen;
  double best = -1;
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& e = r.history[i];
    EXPECT_EQ(e.ordinal, i);
    EXPECT_TRUE(seen.insert(e.genotype).second);
    EXPECT_LE(static_cast<double>(e.mac), c.mac_cap);
    EXPECT_EQ(e.mac, mac_at(e.genotype, c));
    best = std::max(best, e.score);
  }
  EXPECT_EQ(r.best_score, best);
  EXPECT_LE(r.evaluations(), c.population * (c.generations + 1));
}

TEST(EvolutionarySearch, EqualScoresTerminateNormally) {
  // Head count does not change MACs, so the whole MSA-only space ties.
  auto space = builtin_space("pure-vit-msa-only");
  auto c = small_cfg("mac");
  const auto r = evolutionary_search(space, c);
  EXPECT_EQ(r.evaluations(), 4u);
  for (const auto& e : r.history) EXPECT_EQ(e.score, r.history.front().score);
  EXPECT_NO_THROW(validate(r.best, space));
}

TEST(EvolutionarySearch, SingleDimensionFindsArgmaxInOneGeneration) {
  auto space = builtin_space("hybrid");
  for (auto& d : space.dims) d.searchable = d.name == "msa_heads_3";
  auto c = small_cfg("vintk", 4);
  c.generations = 1;
  const auto oracle = all_scores(space, c);
  const auto best = std::max_element(oracle.begin(), oracle.end(),
                                     [](auto& a, auto& b) { return a.second < b.second; });
  const auto r = evolutionary_search(space, c);
  EXPECT_EQ(r.best, best->first);
  EXPECT_EQ(r.best_score, best->second);
}

TEST(EvolutionarySearch, DeterministicAcrossJobs) {
  const auto space = builtin_space("pure-vit");
  const auto c = small_cfg("vintk", 9);
  const auto a = evolutionary_search(space, c, 1);
  const auto b = evolutionary_search(space, c, 3);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].genotype, b.history[i].genotype);
    EXPECT_EQ(a.history[i].score, b.history[i].score);
  }
  EXPECT_EQ(a.best, b.best);
}

TEST(EvolutionarySearch, AtLeastAsGoodAsRandomAtEqualBudget) {
  // Enumerated pure-vit space, paired budgets, five seeds, default
  // population and generation counts.
  const auto space = builtin_space("pure-vit");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = small_cfg("vintk", seed);
    c.population = SearchConfig{}.population;
    c.generations = SearchConfig{}.generations;
    const auto evo = evolutionary_search(space, c);
    c.budget = evo.evaluations();
    const auto rnd = random_search(space, c);
    EXPECT_GE(evo.best_score, rnd.best_score) << "seed " << seed;
  }
}

TEST(RandomSearch, BestOfManyRanksHighInExhaustiveRanking) {
  const auto space = builtin_space("pure-vit");
  auto c = small_cfg("vintk", 1);
  c.budget = 40;
  const auto oracle = all_scores(space, c);
  std::vector<double> sorted;
  for (const auto& [g, s] : oracle) sorted.push_back(s);
  std::sort(sorted.rbegin(), sorted.rend());
  const auto r = random_search(space, c);
  EXPECT_EQ(oracle.at(r.best), r.best_score);
  const auto rank = std::find(sorted.begin(), sorted.end(), r.best_score) - sorted.begin();
  EXPECT_LT(rank, static_cast<long>(sorted.size() / 10));
}

TEST(SearchConfig, RejectsInvalidSettings) {
  auto c = small_cfg("vintk");
  c.population = 1;
  EXPECT_THROW(c.validate(), Error);
  c = small_cfg("vintk");
  c.mutation_prob = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c = small_cfg("vintk");
  c.mac_cap = 0;
  EXPECT_THROW(c.validate(), Error);
  c = small_cfg("nope");
  EXPECT_THROW(c.validate(), ParseError);
  EXPECT_THROW(run_search("grid", builtin_space("pure-vit"), small_cfg("mac")), ParseError);
}
