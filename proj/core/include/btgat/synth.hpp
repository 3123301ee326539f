#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "btgat/grid_data.hpp"

namespace btgat {

/// Planted-regime generator settings. Segments are assigned to regimes
/// cyclically: segment s belongs to regime s % n_regimes.
struct RegimeSpec {
  std::size_t n_regimes = 3;
  std::vector<std::size_t> segment_lengths;
  std::size_t L = 16;
  std::size_t W = 16;
  std::size_t n_vars = 3;
  double noise_sigma = 0.1;
  double missing_rate = 0.0;
  std::uint64_t seed = 0;

  std::size_t frames() const;
  void validate() const;
};

/// Splits T frames into segments of `length` (the last one may be shorter).
std::vector<std::size_t> uniform_segments(std::size_t T, std::size_t length);

struct SynthResult {
  GridDataset data;
  std::vector<std::size_t> truth;
  /// Noise-free field of each regime, (L, W, n_vars) flattened like a frame.
  std::vector<std::vector<double>> regime_means;
};

SynthResult generate(const RegimeSpec& spec);

struct TruthScore {
  double ari = 0.0;
  /// confusion[predicted][truth] counts.
  std::vector<std::vector<std::size_t>> confusion;

  std::string summary() const;
};

/// Adjusted Rand index by pair counting, with the confusion table.
TruthScore score_against_truth(const std::vector<std::size_t>& labels,
                               const std::vector<std::size_t>& truth);

}  // namespace btgat
