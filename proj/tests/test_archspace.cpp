#include <gtest/gtest.h>

#include <map>
#include <set>

#include "vintk/archspace.hpp"

using namespace vintk;

namespace {

// Counts shared by the hand tallies below.
constexpr std::uint64_t attn_macs(std::uint64_t t, std::uint64_t c) {
  return t * c * 3 * c + 2 * t * t * c + t * c * c;
}
constexpr std::uint64_t attn_params(std::uint64_t c) {
  return 2 * c + (c * 3 * c + 3 * c) + (c * c + c);
}
constexpr std::uint64_t ffn_params(std::uint64_t c, std::uint64_t e) {
  return 2 * c + (c * c * e + c * e) + (c * e * c + c);
}

std::string error_of(std::string_view text) {
  try {
    decode_genotype(text);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Space, Cardinalities) {
  EXPECT_EQ(builtin_space("pure-vit").cardinality(), 72u);
  EXPECT_EQ(builtin_space("hybrid").cardinality(), 3072u);
  EXPECT_EQ(builtin_space("pure-vit-msa-only").cardinality(), 4u);
  EXPECT_EQ(builtin_space("hybrid-msa-only").cardinality(), 64u);
  EXPECT_THROW(builtin_space("resnet"), ParseError);
}

TEST(Space, MsaOnlyPinsEverythingElse) {
  for (auto name : {"pure-vit-msa-only", "hybrid-msa-only"}) {
    const auto s = builtin_space(name);
    for (const auto& d : s.dims) {
      EXPECT_EQ(d.searchable, d.role == DimRole::MsaHeads) << d.name;
      if (d.role == DimRole::FfnExpansion) EXPECT_EQ(d.choices[d.default_index], 4);
      if (d.role == DimRole::SeEnabled) EXPECT_EQ(d.choices[d.default_index], 0);
      if (d.role == DimRole::CnnKernel) EXPECT_EQ(d.choices[d.default_index], 3);
    }
  }
}

TEST(Genotype, EncodeDecodeRoundTrip) {
  const Genotype g = decode_genotype("hybrid:1.0.1.1.2.3.0.2");
  EXPECT_EQ(g.space_id, "hybrid");
  EXPECT_EQ(g.choices, (std::vector<std::size_t>{1, 0, 1, 1, 2, 3, 0, 2}));
  EXPECT_EQ(g.encode(), "hybrid:1.0.1.1.2.3.0.2");
}

TEST(Genotype, MalformedNamesDimension) {
  EXPECT_NE(error_of("pure-vit:9.9").find("patch_kernel"), std::string::npos);
  EXPECT_NE(error_of("pure-vit:0.0.0.9").find("msa_heads"), std::string::npos);
  EXPECT_NE(error_of("pure-vit:0.x.0.0").find("ffn_expansion_early"), std::string::npos);
  EXPECT_NE(error_of("pure-vit:0.0.0").find("needs 4"), std::string::npos);
  EXPECT_NE(error_of("pure-vit:0.0.0.0.0").find("needs 4"), std::string::npos);
  EXPECT_NE(error_of("pure-vit:").find("not a choice"), std::string::npos);
  EXPECT_NE(error_of("pure-vit").find("form"), std::string::npos);
  EXPECT_NE(error_of("nope:0").find("unknown"), std::string::npos);
  // Pinned dimensions of a restricted space cannot move.
  EXPECT_NE(error_of("hybrid-msa-only:1.0.0.0.2.0.0.0").find("cnn_kernel_1"), std::string::npos);
  EXPECT_NO_THROW(decode_genotype("hybrid-msa-only:0.0.0.0.2.3.1.0"));
}

TEST(Genotype, SamplingIsUniformOnBinaryDimension) {
  const auto s = builtin_space("pure-vit");
  const auto d = s.dim_index("patch_kernel");
  int ones = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) ones += sample_genotype(s, seed).choices[d] == 1;
  EXPECT_NEAR(ones / 10000.0, 0.5, 0.02);
}

TEST(Genotype, SamplingRespectsPins) {
  const auto s = builtin_space("hybrid-msa-only");
  const auto def = default_genotype(s);
  std::set<std::string> seen;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto g = sample_genotype(s, seed);
    EXPECT_NO_THROW(validate(g, s));
    for (std::size_t i = 0; i < g.choices.size(); ++i)
      if (!s.dims[i].searchable) EXPECT_EQ(g.choices[i], def.choices[i]);
    seen.insert(g.encode());
  }
  EXPECT_EQ(seen.size(), 64u);
  EXPECT_EQ(sample_genotype(s, 5), sample_genotype(s, 5));
}

TEST(Enumerate, CoversSpaceOnceInOrder) {
  for (auto name : {"pure-vit", "pure-vit-msa-only", "hybrid-msa-only"}) {
    const auto s = builtin_space(name);
    const auto all = enumerate_space(s);
    ASSERT_EQ(all.size(), s.cardinality()) << name;
    EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
    EXPECT_EQ(std::set<Genotype>(all.begin(), all.end()).size(), all.size());
  }
  EXPECT_THROW(enumerate_space(builtin_space("hybrid"), 1000), Error);
}

TEST(Enumerate, EveryGenotypeBuildsAndRoundTrips) {
  for (auto name : {"pure-vit", "hybrid-msa-only"}) {
    const auto s = builtin_space(name);
    for (const auto& g : enumerate_space(s)) {
      EXPECT_EQ(decode_genotype(g.encode()), g);
      const auto net = build_network(g);
      EXPECT_EQ(net.input_shape(), s.input);
      EXPECT_EQ(net.classes(), s.classes);
      EXPECT_GT(net.macs(), 0u);
    }
  }
  const auto h = builtin_space("hybrid");
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto g = sample_genotype(h, seed);
    EXPECT_EQ(decode_genotype(g.encode()), g);
    EXPECT_NO_THROW(build_network(g));
  }
}

TEST(Cost, PureVitHandTally) {
  // patch 4, expansions 1/1, one head: tokens 16 -> 4 -> 1 -> 1,
  // widths 16, 16, 24, 24.
  const std::uint64_t macs =
      (16 * 48 * 16 + attn_macs(16, 16) + 2 * 16 * 16 * 16) +  // stage 1
      (4 * 64 * 16 + attn_macs(4, 16) + 2 * 4 * 16 * 16) +     // stage 2
      (1 * 64 * 24 + attn_macs(1, 24) + 2 * 24 * 24) +         // stage 3
      (24 * 24 + attn_macs(1, 24) + 2 * 24 * 24) +             // stage 4
      24 * 4;                                                  // head
  const std::uint64_t params = (48 * 16 + 16 + attn_params(16) + ffn_params(16, 1)) +
                               (64 * 16 + 16 + attn_params(16) + ffn_params(16, 1)) +
                               (64 * 24 + 24 + attn_params(24) + ffn_params(24, 1)) +
                               (24 * 24 + 24 + attn_params(24) + ffn_params(24, 1)) +
                               (2 * 24 + 24 * 4 + 4);
  const auto c = count_cost(decode_genotype("pure-vit:0.0.0.0"));
  EXPECT_EQ(c.mac_count, macs);
  EXPECT_EQ(c.param_count, params);
}

TEST(Cost, HybridHandTally) {
  // kernels 3/5, SE on in stage 1 only, expansion 2.
  const std::uint64_t se8 = 8 * 2 + 2 + 2 * 8 + 8;
  const std::uint64_t macs =
      (64 * 4 * 3 * 8) + (64 * 8 * 9 + (2 * 8 * 2 + 64 * 8) + 64 * 8 * 8) +  // stage 1
      (16 * 4 * 8 * 16) + (16 * 16 * 25 + 16 * 16 * 16) +                    // stage 2
      (16 * 16 * 16) + attn_macs(16, 16) + 2 * 16 * 16 * 32 +                // stage 3
      (4 * 4 * 16 * 16) + 2 * (attn_macs(4, 16) + 2 * 4 * 16 * 32) +         // stage 4
      16 * 4;
  const std::uint64_t params =
      (12 * 8 + 8) + (9 * 8 + 8 + se8 + 8 * 8 + 8) + (32 * 16 + 16) + (25 * 16 + 16 + 16 * 16 + 16) +
      (16 * 16 + 16) + attn_params(16) + ffn_params(16, 2) + (64 * 16 + 16) +
      2 * (attn_params(16) + ffn_params(16, 2)) + (2 * 16 + 16 * 4 + 4);
  const auto c = count_cost(decode_genotype("hybrid:0.1.1.0.1.0.1.2"));
  EXPECT_EQ(c.mac_count, macs);
  EXPECT_EQ(c.param_count, params);
}

TEST(Cost, ExpansionAndHeadsMoveCostAsExpected) {
  const auto base = count_cost(decode_genotype("pure-vit:0.0.0.0"));
  const auto wider = count_cost(decode_genotype("pure-vit:0.2.0.0"));
  EXPECT_GT(wider.mac_count, base.mac_count);
  // Head count reshapes attention but leaves MACs and parameters alone.
  const auto heads = count_cost(decode_genotype("pure-vit:0.0.0.3"));
  EXPECT_EQ(heads.mac_count, base.mac_count);
  EXPECT_EQ(heads.param_count, base.param_count);
}

TEST(Mutate, ChangesExactlyOneSearchableDimension) {
  for (auto name : {"pure-vit", "hybrid", "hybrid-msa-only"}) {
    const auto s = builtin_space(name);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto g = sample_genotype(s, seed);
      const auto m = mutate(g, s, seed + 1000);
      EXPECT_NO_THROW(validate(m, s));
      int diff = 0;
      for (std::size_t i = 0; i < g.choices.size(); ++i) {
        if (g.choices[i] != m.choices[i]) {
          ++diff;
          EXPECT_TRUE(s.dims[i].searchable);
        }
      }
      EXPECT_EQ(diff, 1);
    }
  }
}

TEST(Crossover, TakesEachDimensionFromAParent) {
  const auto s = builtin_space("hybrid");
  std::map<int, int> from_b;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto a = sample_genotype(s, 2 * seed), b = sample_genotype(s, 2 * seed + 1);
    const auto c = crossover(a, b, seed);
    EXPECT_NO_THROW(validate(c, s));
    for (std::size_t i = 0; i < c.choices.size(); ++i) {
      EXPECT_TRUE(c.choices[i] == a.choices[i] || c.choices[i] == b.choices[i]);
      if (a.choices[i] != b.choices[i]) from_b[c.choices[i] == b.choices[i]]++;
    }
  }
  const double frac = from_b[1] / static_cast<double>(from_b[0] + from_b[1]);
  EXPECT_NEAR(frac, 0.5, 0.05);
  EXPECT_THROW(crossover(sample_genotype(s, 0), sample_genotype(builtin_space("pure-vit"), 0), 1),
               Error);
}

TEST(Build, ForwardIsDeterministicAndFinite) {
  const auto g = decode_genotype("hybrid:1.1.0.1.2.1.2.3");
  const auto net = build_network(g);
  const auto p = init_params(net, 11);
  Tensor x({2, 16, 16, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::cos(0.1 * static_cast<double>(i));
  const auto y1 = forward(net, p, x), y2 = forward(net, p, x);
  EXPECT_EQ(y1, y2);
  EXPECT_TRUE(y1.all_finite());
  EXPECT_EQ(y1.shape(), (std::vector<std::size_t>{2, 4}));
  // Different head splits change the function even at equal parameters.
  const auto net2 = build_network(decode_genotype("hybrid:1.1.0.1.2.0.2.3"));
  EXPECT_NE(forward(net2, p, x), y1);
}
