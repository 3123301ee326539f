#include <gtest/gtest.h>

#include <cmath>

#include "btgat/random.hpp"
#include "btgat/synth.hpp"
#include "support/oracles.hpp"

using namespace btgat;

namespace {

RegimeSpec small_spec() {
  RegimeSpec s;
  s.n_regimes = 3;
  s.segment_lengths = uniform_segments(30, 5);
  s.L = 6;
  s.W = 5;
  s.n_vars = 2;
  s.seed = 9;
  return s;
}

}  // namespace

TEST(Synth, NoiselessFramesEqualRegimeMeans) {
  RegimeSpec s = small_spec();
  s.noise_sigma = 0.0;
  const auto r = generate(s);
  ASSERT_EQ(r.data.T, 30u);
  EXPECT_EQ(r.data.missing_count(), 0u);
  const std::size_t F = r.data.frame_size();
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t e = 0; e < F; ++e) EXPECT_EQ(r.data.values[t * F + e], r.regime_means[r.truth[t]][e]);
}

TEST(Synth, SegmentsCycleThroughRegimes) {
  const auto r = generate(small_spec());
  for (std::size_t t = 0; t < 30; ++t) EXPECT_EQ(r.truth[t], (t / 5) % 3);
  EXPECT_EQ(uniform_segments(7, 3), (std::vector<std::size_t>{3, 3, 1}));
}

TEST(Synth, RegimesAreDistinct) {
  const auto r = generate(small_spec());
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b) EXPECT_GT(oracle::euclid(r.regime_means[a], r.regime_means[b]), 1.0);
}

TEST(Synth, DeterministicPerSeed) {
  const auto a = generate(small_spec());
  const auto b = generate(small_spec());
  EXPECT_EQ(a.data.values, b.data.values);
  RegimeSpec other = small_spec();
  other.seed = 10;
  EXPECT_NE(generate(other).data.values, a.data.values);
}

TEST(Synth, MissingRate) {
  RegimeSpec s = small_spec();
  s.missing_rate = 0.2;
  const auto r = generate(s);
  const double frac = static_cast<double>(r.data.missing_count()) / static_cast<double>(r.data.values.size());
  EXPECT_NEAR(frac, 0.2, 0.05);
  for (std::size_t i = 0; i < r.data.values.size(); ++i)
    EXPECT_EQ(std::isnan(r.data.values[i]), r.data.missing_mask[i] == 1);
}

TEST(Synth, NoiseHasRequestedScale) {
  RegimeSpec s = small_spec();
  s.noise_sigma = 0.3;
  const auto r = generate(s);
  const std::size_t F = r.data.frame_size();
  double ss = 0.0;
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t e = 0; e < F; ++e) {
      const double d = r.data.values[t * F + e] - r.regime_means[r.truth[t]][e];
      ss += d * d;
    }
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(30 * F)), 0.3, 0.02);
}

TEST(Synth, InvalidSpecs) {
  RegimeSpec s = small_spec();
  s.segment_lengths = {};
  EXPECT_THROW(generate(s), std::invalid_argument);
  s = small_spec();
  s.missing_rate = 1.0;
  EXPECT_THROW(generate(s), std::invalid_argument);
  s = small_spec();
  s.noise_sigma = -1;
  EXPECT_THROW(generate(s), std::invalid_argument);
}

TEST(Ari, PerfectUnderPermutation) {
  const std::vector<std::size_t> truth{0, 0, 1, 1, 2, 2};
  const auto s = score_against_truth({2, 2, 0, 0, 1, 1}, truth);
  EXPECT_EQ(s.ari, 1.0);
  EXPECT_EQ(s.confusion[2][0], 2u);
  EXPECT_NE(s.summary().find("ari=1"), std::string::npos);
}

TEST(Ari, MatchesPairEnumeration) {
  Rng rng(21);
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<std::size_t> a(n), b(n);
    for (auto& v : a) v = rng.below(4);
    for (auto& v : b) v = rng.below(3);
    EXPECT_NEAR(score_against_truth(a, b).ari, oracle::ari(a, b), 1e-12);
  }
}

TEST(Ari, RandomLabelsNearZero) {
  Rng rng(4);
  double total = 0.0;
  for (int i = 0; i < 20; ++i) {
    std::vector<std::size_t> a(300), b(300);
    for (auto& v : a) v = rng.below(3);
    for (auto& v : b) v = rng.below(3);
    total += score_against_truth(a, b).ari;
  }
  EXPECT_NEAR(total / 20.0, 0.0, 0.01);
  EXPECT_THROW(score_against_truth({0, 1}, {0}), std::invalid_argument);
}
