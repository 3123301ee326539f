#include "btgat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "btgat/random.hpp"

namespace btgat {

std::size_t RegimeSpec::frames() const {
  return std::accumulate(segment_lengths.begin(), segment_lengths.end(), std::size_t{0});
}

void RegimeSpec::validate() const {
  if (n_regimes < 1) throw std::invalid_argument("n_regimes must be >= 1");
  if (segment_lengths.empty()) throw std::invalid_argument("at least one segment is required");
  for (auto s : segment_lengths)
    if (s == 0) throw std::invalid_argument("segment lengths must be >= 1");
  if (L < 1 || W < 1 || n_vars < 1) throw std::invalid_argument("grid extents must be >= 1");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw std::invalid_argument("missing_rate must lie in [0, 1)");
}

std::vector<std::size_t> uniform_segments(std::size_t T, std::size_t length) {
  if (length < 1) throw std::invalid_argument("segment length must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < T; t += length) out.push_back(std::min(length, T - t));
  return out;
}

SynthResult generate(const RegimeSpec& spec) {
  spec.validate();
  constexpr double kTwoPi = 6.283185307179586476925;
  constexpr std::size_t kModes = 3;
  Rng rng(spec.seed);
  const std::size_t frame = spec.L * spec.W * spec.n_vars;

  std::vector<double> offset(spec.n_vars), scale(spec.n_vars);
  for (std::size_t v = 0; v < spec.n_vars; ++v) {
    offset[v] = rng.uniform(-5.0, 5.0);
    scale[v] = rng.uniform(0.5, 2.0);
  }

  SynthResult out;
  out.regime_means.assign(spec.n_regimes, std::vector<double>(frame, 0.0));
  for (std::size_t r = 0; r < spec.n_regimes; ++r) {
    for (std::size_t v = 0; v < spec.n_vars; ++v) {
      struct Mode {
        double fx, fy, phase, amp;
      };
      Mode modes[kModes];
      for (auto& m : modes) {
        m.fx = static_cast<double>(rng.below(3));
        m.fy = static_cast<double>(1 + rng.below(2));
        if (rng.below(2)) std::swap(m.fx, m.fy);
        m.phase = rng.uniform(0.0, kTwoPi);
        m.amp = rng.uniform(0.5, 1.0);
      }
      for (std::size_t x = 0; x < spec.L; ++x)
        for (std::size_t y = 0; y < spec.W; ++y) {
          double s = 0.0;
          for (const auto& m : modes)
            s += m.amp * std::sin(kTwoPi * (m.fx * static_cast<double>(x) / static_cast<double>(spec.L) +
                                            m.fy * static_cast<double>(y) / static_cast<double>(spec.W)) +
                                  m.phase);
          out.regime_means[r][(x * spec.W + y) * spec.n_vars + v] = offset[v] + scale[v] * s;
        }
    }
  }

  const std::size_t T = spec.frames();
  std::vector<std::string> names;
  for (std::size_t v = 0; v < spec.n_vars; ++v) names.push_back("v" + std::to_string(v));
  GridDataset d(T, spec.L, spec.W, spec.n_vars, std::move(names));
  out.truth.reserve(T);
  std::size_t t = 0;
  for (std::size_t s = 0; s < spec.segment_lengths.size(); ++s) {
    const std::size_t regime = s % spec.n_regimes;
    for (std::size_t i = 0; i < spec.segment_lengths[s]; ++i, ++t) {
      out.truth.push_back(regime);
      const auto& mean = out.regime_means[regime];
      for (std::size_t e = 0; e < frame; ++e) {
        const double noise = spec.noise_sigma * rng.normal();
        const bool missing = spec.missing_rate > 0.0 && rng.uniform() < spec.missing_rate;
        d.values[t * frame + e] = missing ? std::numeric_limits<double>::quiet_NaN() : mean[e] + noise;
        d.missing_mask[t * frame + e] = missing ? 1 : 0;
      }
    }
  }
  out.data = std::move(d);
  return out;
}

TruthScore score_against_truth(const std::vector<std::size_t>& labels,
                               const std::vector<std::size_t>& truth) {
  if (labels.size() != truth.size())
    throw std::invalid_argument("score_against_truth: " + std::to_string(labels.size()) + " labels vs " +
                                std::to_string(truth.size()) + " truth entries");
  TruthScore s;
  if (labels.empty()) {
    s.ari = 1.0;
    return s;
  }
  const std::size_t kp = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t kt = *std::max_element(truth.begin(), truth.end()) + 1;
  s.confusion.assign(kp, std::vector<std::size_t>(kt, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) ++s.confusion[labels[i]][truth[i]];

  auto pairs = [](double n) { return n * (n - 1.0) / 2.0; };
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  std::vector<double> col(kt, 0.0);
  for (const auto& row : s.confusion) {
    double a = 0.0;
    for (std::size_t j = 0; j < kt; ++j) {
      const double c = static_cast<double>(row[j]);
      index += pairs(c);
      a += c;
      col[j] += c;
    }
    sum_a += pairs(a);
  }
  for (double b : col) sum_b += pairs(b);
  const double expected = sum_a * sum_b / pairs(static_cast<double>(labels.size()));
  const double max_index = 0.5 * (sum_a + sum_b);
  s.ari = max_index == expected ? 1.0 : (index - expected) / (max_index - expected);
  return s;
}

std::string TruthScore::summary() const {
  std::string out = fmt::format("ari={}\n", ari);
  for (std::size_t i = 0; i < confusion.size(); ++i)
    out += fmt::format("predicted={} truth_counts={}\n", i, fmt::join(confusion[i], ","));
  return out;
}

}  // namespace btgat
