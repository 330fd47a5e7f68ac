#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "vintk/error.hpp"
#include "vintk/layers.hpp"
#include "vintk/network.hpp"

namespace vintk {

/// Dimension roles; MSA-only restrictions keep `MsaHeads` searchable and pin
/// everything else.
enum class DimRole { PatchKernel, FfnExpansion, MsaHeads, SeEnabled, CnnKernel };

struct Dimension {
  std::string name;
  DimRole role;
  std::vector<int> choices;
  std::size_t default_index = 0;
  bool searchable = true;

  std::size_t cardinality() const { return choices.size(); }
};

/// A discrete architecture search space.
///
/// Two families ship: a four-stage pure ViT (patch-embedding kernel, FFN
/// expansions, attention heads) and a ViT-CNN hybrid (two convolutional
/// stages with searchable depthwise kernel and squeeze-excitation, then two
/// transformer stages). Each has an MSA-only restriction in which only the
/// head counts vary.
struct SearchSpaceDef {
  std::string id;
  std::string family;  // "pure-vit" or "hybrid"
  std::vector<Dimension> dims;
  FeatureShape input{16, 16, 3};
  std::size_t classes = 4;

  std::uint64_t cardinality() const {
    std::uint64_t n = 1;
    for (const auto& d : dims)
      if (d.searchable) n *= d.cardinality();
    return n;
  }

  std::vector<std::size_t> searchable_dims() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dims.size(); ++i)
      if (dims[i].searchable) out.push_back(i);
    return out;
  }

  std::size_t dim_index(std::string_view name) const {
    for (std::size_t i = 0; i < dims.size(); ++i)
      if (dims[i].name == name) return i;
    throw ParseError("space '" + id + "' has no dimension '" + std::string(name) + "'");
  }
};

inline constexpr std::string_view kPureVit = "pure-vit";
inline constexpr std::string_view kHybrid = "hybrid";
inline constexpr std::string_view kPureVitMsaOnly = "pure-vit-msa-only";
inline constexpr std::string_view kHybridMsaOnly = "hybrid-msa-only";

inline std::vector<std::string> builtin_space_names() {
  return {std::string(kPureVit), std::string(kHybrid), std::string(kPureVitMsaOnly),
          std::string(kHybridMsaOnly)};
}

namespace detail {

inline Dimension dim(std::string name, DimRole role, std::vector<int> choices) {
  Dimension d{std::move(name), role, std::move(choices)};
  // Pin defaults: FFN expansion 4, SE off, kernels at the middle choice,
  // heads at the middle choice.
  switch (role) {
    case DimRole::FfnExpansion: {
      auto it = std::find(d.choices.begin(), d.choices.end(), 4);
      d.default_index = it == d.choices.end() ? d.choices.size() - 1
                                               : static_cast<std::size_t>(it - d.choices.begin());
      break;
    }
    case DimRole::SeEnabled: d.default_index = 0; break;
    default: d.default_index = (d.choices.size() - 1) / 2; break;
  }
  return d;
}

inline SearchSpaceDef restrict_to_msa(SearchSpaceDef s, std::string id) {
  s.id = std::move(id);
  for (auto& d : s.dims) d.searchable = d.role == DimRole::MsaHeads;
  return s;
}

}  // namespace detail

/// Looks up one of the shipped spaces by name. Throws ParseError for unknown
/// names.
inline SearchSpaceDef builtin_space(std::string_view name) {
  using detail::dim;
  SearchSpaceDef vit;
  vit.id = std::string(kPureVit);
  vit.family = "pure-vit";
  vit.dims = {dim("patch_kernel", DimRole::PatchKernel, {4, 8}),
              dim("ffn_expansion_early", DimRole::FfnExpansion, {1, 2, 4}),
              dim("ffn_expansion_late", DimRole::FfnExpansion, {1, 2, 4}),
              dim("msa_heads", DimRole::MsaHeads, {1, 2, 4, 8})};

  SearchSpaceDef hyb;
  hyb.id = std::string(kHybrid);
  hyb.family = "hybrid";
  hyb.dims = {dim("cnn_kernel_1", DimRole::CnnKernel, {3, 5}),
              dim("se_enabled_1", DimRole::SeEnabled, {0, 1}),
              dim("cnn_kernel_2", DimRole::CnnKernel, {3, 5}),
              dim("se_enabled_2", DimRole::SeEnabled, {0, 1}),
              dim("ffn_expansion", DimRole::FfnExpansion, {1, 2, 4}),
              dim("msa_heads_3", DimRole::MsaHeads, {1, 2, 4, 8}),
              dim("msa_heads_4a", DimRole::MsaHeads, {1, 2, 4, 8}),
              dim("msa_heads_4b", DimRole::MsaHeads, {1, 2, 4, 8})};

  if (name == kPureVit) return vit;
  if (name == kHybrid) return hyb;
  if (name == kPureVitMsaOnly) return detail::restrict_to_msa(vit, std::string(kPureVitMsaOnly));
  if (name == kHybridMsaOnly) return detail::restrict_to_msa(hyb, std::string(kHybridMsaOnly));
  throw ParseError("unknown search space '" + std::string(name) + "'");
}

/// A point of a search space: one choice index per dimension.
struct Genotype {
  std::string space_id;
  std::vector<std::size_t> choices;

  /// `space_id:v0.v1.v2...`
  std::string encode() const {
    std::string s = space_id + ":";
    for (std::size_t i = 0; i < choices.size(); ++i) {
      if (i) s += ".";
      s += std::to_string(choices[i]);
    }
    return s;
  }

  friend bool operator==(const Genotype&, const Genotype&) = default;
  friend auto operator<=>(const Genotype& a, const Genotype& b) {
    if (auto c = a.space_id <=> b.space_id; c != 0) return c;
    return a.choices <=> b.choices;
  }
};

/// Throws ParseError naming the first offending dimension.
inline void validate(const Genotype& g, const SearchSpaceDef& space) {
  if (g.space_id != space.id)
    throw ParseError("genotype belongs to space '" + g.space_id + "', not '" + space.id + "'");
  const std::size_t n = std::min(g.choices.size(), space.dims.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& d = space.dims[i];
    if (g.choices[i] >= d.cardinality())
      throw ParseError("dimension '" + d.name + "': index " + std::to_string(g.choices[i]) +
                       " out of range [0," + std::to_string(d.cardinality() - 1) + "]");
    if (!d.searchable && g.choices[i] != d.default_index)
      throw ParseError("dimension '" + d.name + "' is pinned to index " +
                       std::to_string(d.default_index) + " in space '" + space.id + "'");
  }
  if (g.choices.size() != space.dims.size())
    throw ParseError("genotype for '" + space.id + "' needs " + std::to_string(space.dims.size()) +
                     " choices, got " + std::to_string(g.choices.size()));
}

/// Parses `space_id:v0.v1...` and validates it against the builtin space.
inline Genotype decode_genotype(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos || colon == 0)
    throw ParseError("genotype '" + std::string(text) + "' is not of the form space:v0.v1...");
  Genotype g;
  g.space_id = std::string(text.substr(0, colon));
  const auto space = builtin_space(g.space_id);
  std::string_view rest = text.substr(colon + 1);
  std::size_t dim_i = 0;
  while (true) {
    const auto dot = rest.find('.');
    const auto tok = rest.substr(0, dot);
    const std::string dname =
        dim_i < space.dims.size() ? space.dims[dim_i].name : "#" + std::to_string(dim_i);
    if (tok.empty() || tok.size() > 9 ||
        !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw ParseError("dimension '" + dname + "': '" + std::string(tok) +
                       "' is not a choice index");
    g.choices.push_back(std::stoul(std::string(tok)));
    ++dim_i;
    if (dot == std::string_view::npos) break;
    rest = rest.substr(dot + 1);
  }
  validate(g, space);
  return g;
}

inline Genotype default_genotype(const SearchSpaceDef& space) {
  Genotype g{space.id, {}};
  for (const auto& d : space.dims) g.choices.push_back(d.default_index);
  return g;
}

/// Uniform over searchable dimensions; pinned dimensions take their default.
inline Genotype sample_genotype(const SearchSpaceDef& space, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Genotype g = default_genotype(space);
  for (std::size_t i = 0; i < space.dims.size(); ++i) {
    if (!space.dims[i].searchable) continue;
    std::uniform_int_distribution<std::size_t> u(0, space.dims[i].cardinality() - 1);
    g.choices[i] = u(rng);
  }
  return g;
}

/// All genotypes in lexicographic order of their choice vectors.
inline std::vector<Genotype> enumerate_space(const SearchSpaceDef& space,
                                             std::uint64_t cap = 100'000) {
  const auto n = space.cardinality();
  if (n > cap)
    throw Error("space '" + space.id + "' has " + std::to_string(n) +
                " genotypes, over the enumeration cap " + std::to_string(cap));
  const auto free = space.searchable_dims();
  std::vector<Genotype> out;
  out.reserve(n);
  Genotype g = default_genotype(space);
  for (auto i : free) g.choices[i] = 0;
  while (true) {
    out.push_back(g);
    std::size_t k = free.size();
    while (k > 0) {
      const auto d = free[k - 1];
      if (++g.choices[d] < space.dims[d].cardinality()) break;
      g.choices[d] = 0;
      --k;
    }
    if (k == 0) break;
  }
  return out;
}

/// Changes exactly one searchable dimension (with more than one choice) to
/// a different value. Spaces with nothing to change return the input.
inline Genotype mutate(const Genotype& g, const SearchSpaceDef& space, std::uint64_t seed) {
  validate(g, space);
  std::vector<std::size_t> mutable_dims;
  for (auto i : space.searchable_dims())
    if (space.dims[i].cardinality() > 1) mutable_dims.push_back(i);
  if (mutable_dims.empty()) return g;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, mutable_dims.size() - 1);
  const auto d = mutable_dims[pick(rng)];
  std::uniform_int_distribution<std::size_t> val(0, space.dims[d].cardinality() - 2);
  Genotype out = g;
  const auto v = val(rng);
  out.choices[d] = v >= g.choices[d] ? v + 1 : v;
  return out;
}

/// Each dimension comes from `a` or `b` with equal probability.
inline Genotype crossover(const Genotype& a, const Genotype& b, std::uint64_t seed) {
  if (a.space_id != b.space_id || a.choices.size() != b.choices.size())
    throw Error("crossover of genotypes from different spaces");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  Genotype out = a;
  for (std::size_t i = 0; i < a.choices.size(); ++i)
    if (coin(rng)) out.choices[i] = b.choices[i];
  return out;
}

/// Stage widths and block layout of the shipped families.
struct FamilyLayout {
  static constexpr std::size_t kVitWidths[4] = {16, 16, 24, 24};
  static constexpr std::size_t kVitLateHeads = 2;
  static constexpr std::size_t kHybridCnnWidth[2] = {8, 16};
  static constexpr std::size_t kHybridTransformerWidth[2] = {16, 16};
  static constexpr std::size_t kSeReduction = 4;
};

namespace detail {

inline LayerPtr attention_block(const std::string& name, FeatureShape s, std::size_t heads,
                                Parameterization p) {
  return std::make_shared<Residual>(
      name + ".attn",
      std::vector<LayerPtr>{std::make_shared<LayerNorm>(name + ".attn.norm", s),
                            std::make_shared<MultiHeadSelfAttention>(name + ".attn.msa", s, heads, p)});
}

inline LayerPtr ffn_block(const std::string& name, FeatureShape s, std::size_t expansion,
                          Parameterization p) {
  return std::make_shared<Residual>(
      name + ".mlp",
      std::vector<LayerPtr>{std::make_shared<LayerNorm>(name + ".mlp.norm", s),
                            std::make_shared<FeedForward>(name + ".mlp.ffn", s, expansion, p)});
}

/// Depthwise k x k -> GELU -> [SE] -> pointwise, wrapped in a residual.
inline LayerPtr conv_block(const std::string& name, FeatureShape s, std::size_t kernel, bool se,
                           Parameterization p) {
  std::vector<LayerPtr> body{
      std::make_shared<DepthwiseConv>(name + ".dw", s, kernel, p),
      std::make_shared<Activation>(name + ".act", s, ActivationKind::Gelu)};
  if (se)
    body.push_back(std::make_shared<SqueezeExcitation>(name + ".se", s,
                                                       FamilyLayout::kSeReduction, p));
  body.push_back(std::make_shared<Linear>(name + ".pw", s, s.c, true, p));
  return std::make_shared<Residual>(name, std::move(body));
}

/// Stride-2 patch merge while the map is at least 2x2, otherwise a 1x1
/// channel projection.
inline LayerPtr downsample(const std::string& name, FeatureShape s, std::size_t out,
                           Parameterization p, std::size_t stride = 2) {
  const std::size_t k = (s.h % stride == 0 && s.w % stride == 0 && s.h >= stride) ? stride : 1;
  return std::make_shared<PatchConv>(name, s, k, out, p);
}

inline void add_head(std::vector<LayerPtr>& layers, FeatureShape s, std::size_t classes,
                     Parameterization p) {
  layers.push_back(std::make_shared<LayerNorm>("head.norm", s));
  if (s.tokens() > 1) {
    layers.push_back(std::make_shared<GlobalAvgPool>("head.pool", s));
    s = layers.back()->output_shape();
  }
  layers.push_back(std::make_shared<Linear>("head.fc", s, classes, true, p));
}

inline int choice(const Genotype& g, const SearchSpaceDef& space, std::string_view name) {
  const auto i = space.dim_index(name);
  return space.dims[i].choices[g.choices[i]];
}

}  // namespace detail

/// Builds the executable network for a genotype.
///
/// pure-vit: patch embedding (k x k) then four stages; stages 2-4 open with a
/// 2x2 downsample (1x1 projection once the map is a single token). Each stage
/// holds one pre-norm attention block and one pre-norm FFN block. Stage 1
/// uses `msa_heads`; later stages use a fixed head count.
///
/// hybrid: four stages, each opened by a downsampling module. Stages 1-2 are
/// residual depthwise-conv blocks (searchable kernel, optional SE); stage 3
/// holds one transformer block and stage 4 two, each with its own head count.
inline NetworkSpec build_network(const Genotype& g, std::size_t classes, FeatureShape input,
                                 Parameterization p = Parameterization::Standard) {
  const auto space = builtin_space(g.space_id);
  validate(g, space);
  using namespace detail;
  std::vector<LayerPtr> layers;
  FeatureShape s = input;

  if (space.family == "pure-vit") {
    const auto k = static_cast<std::size_t>(choice(g, space, "patch_kernel"));
    const auto e_early = static_cast<std::size_t>(choice(g, space, "ffn_expansion_early"));
    const auto e_late = static_cast<std::size_t>(choice(g, space, "ffn_expansion_late"));
    const auto heads = static_cast<std::size_t>(choice(g, space, "msa_heads"));
    for (std::size_t st = 0; st < 4; ++st) {
      const std::string name = "stage" + std::to_string(st + 1);
      const std::size_t width = FamilyLayout::kVitWidths[st];
      layers.push_back(st == 0 ? std::make_shared<PatchConv>(name + ".patch_embed", s, k, width, p)
                               : downsample(name + ".down", s, width, p));
      s = layers.back()->output_shape();
      const std::size_t h = st == 0 ? heads : FamilyLayout::kVitLateHeads;
      layers.push_back(attention_block(name + ".block1", s, h, p));
      layers.push_back(ffn_block(name + ".block1", s, st < 2 ? e_early : e_late, p));
    }
  } else {
    const std::size_t ks[2] = {static_cast<std::size_t>(choice(g, space, "cnn_kernel_1")),
                               static_cast<std::size_t>(choice(g, space, "cnn_kernel_2"))};
    const bool se[2] = {choice(g, space, "se_enabled_1") != 0,
                        choice(g, space, "se_enabled_2") != 0};
    const auto e = static_cast<std::size_t>(choice(g, space, "ffn_expansion"));
    const std::size_t heads[3] = {static_cast<std::size_t>(choice(g, space, "msa_heads_3")),
                                  static_cast<std::size_t>(choice(g, space, "msa_heads_4a")),
                                  static_cast<std::size_t>(choice(g, space, "msa_heads_4b"))};
    for (std::size_t st = 0; st < 2; ++st) {
      const std::string name = "stage" + std::to_string(st + 1);
      layers.push_back(downsample(name + ".down", s, FamilyLayout::kHybridCnnWidth[st], p));
      s = layers.back()->output_shape();
      layers.push_back(conv_block(name + ".conv", s, ks[st], se[st], p));
    }
    // Stage 3 keeps the resolution so attention sees a 4x4 token grid.
    layers.push_back(
        downsample("stage3.down", s, FamilyLayout::kHybridTransformerWidth[0], p, /*stride=*/1));
    s = layers.back()->output_shape();
    layers.push_back(attention_block("stage3.block1", s, heads[0], p));
    layers.push_back(ffn_block("stage3.block1", s, e, p));
    layers.push_back(downsample("stage4.down", s, FamilyLayout::kHybridTransformerWidth[1], p));
    s = layers.back()->output_shape();
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string name = "stage4.block" + std::to_string(b + 1);
      layers.push_back(attention_block(name, s, heads[1 + b], p));
      layers.push_back(ffn_block(name, s, e, p));
    }
  }
  add_head(layers, s, classes, p);
  return NetworkSpec(input, classes, std::move(layers), p);
}

inline NetworkSpec build_network(const Genotype& g,
                                 Parameterization p = Parameterization::Standard) {
  const auto space = builtin_space(g.space_id);
  return build_network(g, space.classes, space.input, p);
}

struct CostReport {
  std::uint64_t param_count = 0;
  std::uint64_t mac_count = 0;
};

/// Exact parameter and multiply-accumulate counts of the built network at
/// the space's default input signature.
inline CostReport count_cost(const Genotype& g) {
  const auto net = build_network(g);
  return {net.param_count(), net.macs()};
}

}  // namespace vintk
