#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "btgat/tensor.hpp"

namespace btgat {

/// Hard partition of T samples into clusters 0..k-1.
struct Labeling {
  std::vector<std::size_t> labels;
  std::size_t k = 0;
};

/// Renumbers clusters by first appearance in sample order.
Labeling canonical_labels(const std::vector<std::size_t>& labels);

/// Labels file: one integer per line.
std::string serialize_labels(const std::vector<std::size_t>& labels);
void write_labels(const std::vector<std::size_t>& labels, const std::filesystem::path& path);
std::vector<std::size_t> read_labels(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
  std::size_t max_iters = 300;
  std::size_t restarts = 10;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Tensor centroids;  // (k, D)
  std::vector<std::size_t> labels;
  double inertia = 0.0;
  /// Inertia after each assignment step of the winning restart.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  /// Fewer distinct samples than k: some centroids coincide.
  bool duplicate_centroids = false;
};

/// Lloyd iterations from k-means++ seeding, best of `restarts` by inertia. Rows
/// are canonically ordered before seeding so the result does not depend on
/// the order of the input samples.
KMeansResult kmeans(const Tensor& data, std::size_t k, const KMeansOptions& options = {});

Labeling kmeans_cluster(const Tensor& data, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Hierarchical agglomerative clustering

enum class Linkage { ward, average };

struct HacMerge {
  std::size_t a = 0;  // surviving cluster id (the lower index)
  std::size_t b = 0;
  double height = 0.0;
};

struct HacResult {
  Labeling labeling;
  std::vector<HacMerge> merges;
};

/// Merges until k clusters remain; equal-distance candidates resolve to the
/// lexicographically smallest (a, b) pair.
HacResult hac(const Tensor& data, std::size_t k, Linkage linkage = Linkage::ward);
Labeling hac_cluster(const Tensor& data, std::size_t k, Linkage linkage = Linkage::ward);

// ---------------------------------------------------------------------------
// Internal validation

struct MetricReport {
  std::string method_name;
  double silhouette = 0.0;
  double davies_bouldin = 0.0;
  double calinski_harabasz = 0.0;
  double rmse = 0.0;
  double variance = 0.0;
  double inter_cluster_distance = 0.0;
  std::size_t k = 0;  // non-empty clusters scored
  std::size_t n_samples = 0;
  std::size_t empty_clusters = 0;
  bool silhouette_undefined = false;
  bool davies_bouldin_undefined = false;
  bool calinski_harabasz_undefined = false;
};

/// Six internal scores on `data` (T x D) under `labels`, Euclidean throughout.
/// Undefined scores are reported as NaN with their flag set.
MetricReport evaluate_internal(const Tensor& data, const Labeling& labels,
                               std::string method_name = {});

std::string to_key_value(const MetricReport& r);
std::string to_json(const MetricReport& r);

// ---------------------------------------------------------------------------
// Elbow

struct ElbowResult {
  std::size_t k_star = 0;
  std::vector<std::size_t> ks;
  std::vector<double> distortion;
  bool knee_undefined = false;
  bool non_monotone = false;

  /// Two-column "k distortion" plot data.
  std::string curve_data() const;
};

/// Knee of a decreasing curve: the point farthest below the chord joining the
/// endpoints after scaling both axes to [0, 1].
ElbowResult find_knee(std::vector<std::size_t> ks, std::vector<double> distortion);

/// k-means inertia over [k_min, k_max] and its knee.
ElbowResult elbow_k(const Tensor& data, std::size_t k_min, std::size_t k_max, std::uint64_t seed);

}  // namespace btgat
