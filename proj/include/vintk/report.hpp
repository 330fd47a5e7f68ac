#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "vintk/eval.hpp"
#include "vintk/ntk.hpp"
#include "vintk/search.hpp"
#include "vintk/spectral.hpp"

namespace vintk {

using Json = nlohmann::ordered_json;

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// JSON number, or null for NaN / infinity.
inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

template <class T>
Json optional_num(const std::optional<T>& v) {
  return v ? num(*v) : Json(nullptr);
}

inline Json to_json(const ProxyTask& t) {
  return {{"dataset", t.dataset}, {"image_size", t.image_size}, {"n_train", t.n_train},
          {"n_test", t.n_test},    {"classes", t.classes},       {"steps", t.steps},
          {"lr", t.lr},            {"lr_schedule", "cosine"},    {"noise", t.noise},
          {"seed", t.seed}};
}

inline Json to_json(const FourierConfig& f) { return {{"n_freq", f.n_freq}, {"p", f.p}}; }

inline Json to_json(const MetricScore& s) {
  return {{"metric", s.metric},         {"value", num(s.value)}, {"lambda_min", num(s.lambda_min)},
          {"lambda_max", num(s.lambda_max)}, {"trace", num(s.trace)}, {"D", s.D},
          {"flags", s.flags}};
}

inline Json to_json(const CorrelationReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json scores = Json::object();
    for (const auto& m : r.metrics) scores[m] = num(row.scores.at(m));
    rows.push_back({{"genotype", row.genotype.encode()},
                    {"mac", row.mac},
                    {"accuracy", row.accuracy},
                    {"diverged", row.diverged},
                    {"scores", scores}});
  }
  Json taus = Json::array();
  for (const auto& t : r.taus)
    taus.push_back({{"metric", t.metric}, {"tau", optional_num(t.tau)}, {"p_value", optional_num(t.p_value)},
                    {"note", t.note}});
  return {{"space_id", r.space_id}, {"seed", r.seed},   {"n_samples", r.rows.size()},
          {"task", to_json(r.task)}, {"metrics", r.metrics}, {"taus", taus},
          {"rows", rows}};
}

inline const std::vector<std::string>& correlation_csv_metrics() {
  static const std::vector<std::string> m{"fnorm", "mean", "ncn", "relu", "vintk"};
  return m;
}

/// Fixed column set; metrics not computed in the report are left empty.
inline std::string to_csv(const CorrelationReport& r) {
  std::string out = "genotype,mac,accuracy";
  for (const auto& m : correlation_csv_metrics()) out += ",score_" + m;
  out += "\n";
  for (const auto& row : r.rows) {
    out += row.genotype.encode() + "," + std::to_string(row.mac) + "," +
           format_double(row.accuracy);
    for (const auto& m : correlation_csv_metrics()) {
      out += ",";
      if (auto it = row.scores.find(m); it != row.scores.end()) out += format_double(it->second);
    }
    out += "\n";
  }
  return out;
}

inline Json to_json(const SearchResult& r) {
  Json hist = Json::array();
  for (const auto& e : r.history)
    hist.push_back({{"ordinal", e.ordinal},
                    {"genotype", e.genotype.encode()},
                    {"score", num(e.score)},
                    {"mac", e.mac}});
  return {{"space_id", r.space_id},
          {"method", r.method},
          {"metric", r.metric},
          {"mac_cap", num(r.mac_cap)},
          {"best_genotype", r.best.encode()},
          {"best_score", num(r.best_score)},
          {"evaluations", r.evaluations()},
          {"rejections", r.rejections},
          {"history", hist}};
}

inline Json to_json(const SearchConfig& c) {
  return {{"metric", c.metric},
          {"population", c.population},
          {"generations", c.generations},
          {"mutation_prob", c.mutation_prob},
          {"crossover_prob", c.crossover_prob},
          {"mac_cap", num(c.mac_cap)},
          {"budget", c.random_budget()},
          {"probe_count", c.probes.count},
          {"probe_seed", c.probes.seed},
          {"task", to_json(c.probes.task)},
          {"fourier", to_json(c.fourier)},
          {"seed", c.seed}};
}

/// Header `t,r0,...,r{D-1}`; one row per time point, residual in the
/// eigenbasis ordered by ascending eigenvalue.
inline std::string to_csv(const ResidualTrace& tr) {
  std::string out = "t";
  for (std::size_t i = 0; i < tr.eigenvalues.size(); ++i) out += ",r" + std::to_string(i);
  out += "\n";
  for (std::size_t k = 0; k < tr.t.size(); ++k) {
    out += format_double(tr.t[k]);
    for (double v : tr.r[k]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

struct SpikedRow {
  SpikedConfig cfg;
  RiskPair risk;
};

inline std::string spiked_csv(std::vector<SpikedRow> rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SpikedRow& a, const SpikedRow& b) { return a.cfg.seed < b.cfg.seed; });
  std::string out = "seed,d,d0,r1,r2,regime,R_NN,R_NTK,gap\n";
  for (const auto& r : rows)
    out += std::to_string(r.cfg.seed) + "," + std::to_string(r.cfg.d) + "," +
           std::to_string(r.cfg.d0) + "," + format_double(r.cfg.r1) + "," +
           format_double(r.cfg.r2) + "," + to_string(r.cfg.regime) + "," +
           format_double(r.risk.r_nn) + "," + format_double(r.risk.r_ntk) + "," +
           format_double(r.risk.gap) + "\n";
  return out;
}

inline Json to_json(const SpikedConfig& c) {
  return {{"d", c.d},           {"d0", c.d0},
          {"r1", c.r1},         {"r2", c.r2},
          {"n", c.n},           {"n_test", c.n_test},
          {"noise_std", c.noise_std}, {"activation", c.activation},
          {"regime", to_string(c.regime)}, {"beta", c.beta},
          {"k", c.k}};
}

inline Json to_json(const GapConfig& g) {
  return {{"width", g.width}, {"steps", g.steps}, {"lr", g.lr}, {"ridge", g.ridge}};
}

}  // namespace vintk
