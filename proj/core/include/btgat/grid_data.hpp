#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "btgat/tensor.hpp"

namespace btgat {

/// Malformed or inconsistent input data. `offset` is the byte offset (or CSV
/// line number) where the problem was detected, when known.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, std::optional<std::uintmax_t> offset = std::nullopt)
      : std::runtime_error(offset ? what + " (at offset " + std::to_string(*offset) + ")" : what),
        offset_(offset) {}
  std::optional<std::uintmax_t> offset() const { return offset_; }

 private:
  std::optional<std::uintmax_t> offset_;
};

/// 4D field indexed (t, lon, lat, var). Missing cells hold NaN until imputed.
struct GridDataset {
  std::size_t T = 0;
  std::size_t L = 0;
  std::size_t W = 0;
  std::size_t n = 0;
  std::vector<std::string> var_names;
  std::vector<double> values;
  std::vector<std::uint8_t> missing_mask;
  /// Per-variable (min, max) recorded by minmax_normalize.
  std::optional<std::vector<std::pair<double, double>>> normalization;

  GridDataset() = default;
  GridDataset(std::size_t T, std::size_t L, std::size_t W, std::size_t n,
              std::vector<std::string> var_names = {});

  std::size_t index(std::size_t t, std::size_t lon, std::size_t lat, std::size_t var) const {
    return ((t * L + lon) * W + lat) * n + var;
  }
  double& at(std::size_t t, std::size_t lon, std::size_t lat, std::size_t var) {
    return values[index(t, lon, lat, var)];
  }
  double at(std::size_t t, std::size_t lon, std::size_t lat, std::size_t var) const {
    return values[index(t, lon, lat, var)];
  }
  std::size_t frame_size() const { return L * W * n; }
  std::size_t missing_count() const;
  /// Throws DataError when extents and buffers disagree.
  void validate() const;
};

enum class GridFormat { container, csv };

/// `.csv` selects CSV; anything else is treated as a grid container.
GridFormat format_from_path(const std::filesystem::path& path);

GridDataset ingest_grid(const std::filesystem::path& path, GridFormat format);
GridDataset parse_container(const std::string& bytes);
GridDataset parse_csv(const std::string& text);

/// Container bytes: `magic=STGRID1 T=.. L=.. W=.. n=.. var_names=a,b\n` then
/// T*L*W*n little-endian float64 values; missing cells are written as NaN.
std::string serialize_container(const GridDataset& d);
void write_container(const GridDataset& d, const std::filesystem::path& path);
std::string serialize_csv(const GridDataset& d);

/// Replaces every missing cell with the mean of all observed cells of the dataset.
GridDataset impute_mean(GridDataset d);

/// Per-variable min-max scaling to [0,1]; constant variables map to 0.
GridDataset minmax_normalize(GridDataset d);

/// T x (L*W*n) matrix, row t flattened over (lon, lat, var).
Tensor flatten_2d(const GridDataset& d);
GridDataset unflatten_2d(const Tensor& matrix, std::size_t L, std::size_t W, std::size_t n,
                         std::vector<std::string> var_names = {});

/// Time axis split into consecutive windows; the final window is zero-padded.
struct SequenceTensor {
  Tensor tensor;  // (B, window_length, H=L, W, C=n)
  std::size_t window_length = 0;
  std::vector<std::size_t> window_starts;
  std::vector<std::uint8_t> frame_valid;  // B * window_length flags
  std::size_t source_frames = 0;

  std::size_t windows() const { return window_starts.size(); }
  /// Source time index of frame `step` in window `b`, or nullopt for padding.
  std::optional<std::size_t> source_index(std::size_t b, std::size_t step) const;
};

SequenceTensor to_sequence_tensor(const GridDataset& d, std::size_t window_length);

}  // namespace btgat
