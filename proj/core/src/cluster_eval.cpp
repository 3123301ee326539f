#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "btgat/cluster_eval.hpp"
#include "btgat/grid_data.hpp"

namespace btgat {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double dist(const double* a, const double* b, std::size_t D) {
  double s = 0.0;
  for (std::size_t j = 0; j < D; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return std::sqrt(s);
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{}", v);
}

std::string json_num(double v) {
  if (!std::isfinite(v)) return "null";
  return fmt::format("{}", v);
}

}  // namespace

std::string serialize_labels(const std::vector<std::size_t>& labels) {
  std::string out;
  for (auto l : labels) out += std::to_string(l) + "\n";
  return out;
}

void write_labels(const std::vector<std::size_t>& labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write labels file " + path.string());
  out << serialize_labels(labels);
}

std::vector<std::size_t> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open labels file " + path.string());
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size() || line[0] == '-') throw DataError("labels file: bad entry '" + line + "'", lineno);
    labels.push_back(static_cast<std::size_t>(v));
  }
  return labels;
}

MetricReport evaluate_internal(const Tensor& data, const Labeling& labeling, std::string method_name) {
  if (data.rank() != 2) throw ShapeError("evaluate_internal: expected (T, D), got " + shape_str(data.shape()));
  const std::size_t T = data.dim(0), D = data.dim(1);
  if (labeling.labels.size() != T)
    throw std::invalid_argument("evaluate_internal: " + std::to_string(labeling.labels.size()) +
                                " labels for " + std::to_string(T) + " samples");
  std::size_t k_decl = labeling.k;
  for (auto l : labeling.labels) k_decl = std::max(k_decl, l + 1);

  // Compact to the non-empty clusters.
  std::vector<std::size_t> count(k_decl, 0);
  for (auto l : labeling.labels) ++count[l];
  std::vector<std::size_t> remap(k_decl, 0);
  std::size_t k = 0;
  for (std::size_t c = 0; c < k_decl; ++c)
    if (count[c]) remap[c] = k++;
  if (k < 2) throw std::invalid_argument("evaluate_internal: need at least 2 non-empty clusters");
  std::vector<std::size_t> lab(T);
  std::vector<double> n(k, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    lab[i] = remap[labeling.labels[i]];
    n[lab[i]] += 1.0;
  }

  MetricReport r;
  r.method_name = std::move(method_name);
  r.k = k;
  r.n_samples = T;
  r.empty_clusters = k_decl - k;

  const double* X = data.storage().data();
  std::vector<double> centroid(k * D, 0.0), mean(D, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < D; ++j) {
      centroid[lab[i] * D + j] += X[i * D + j];
      mean[j] += X[i * D + j];
    }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < D; ++j) centroid[c * D + j] /= n[c];
  for (auto& m : mean) m /= static_cast<double>(T);

  // Silhouette.
  {
    std::vector<double> sums(k);
    double total = 0.0;
    bool any_spread = false;
    for (std::size_t i = 0; i < T; ++i) {
      std::fill(sums.begin(), sums.end(), 0.0);
      for (std::size_t j = 0; j < T; ++j) {
        if (j == i) continue;
        const double d = dist(&X[i * D], &X[j * D], D);
        if (d > 0.0) any_spread = true;
        sums[lab[j]] += d;
      }
      const std::size_t own = lab[i];
      if (n[own] <= 1.0) continue;
      const double a = sums[own] / (n[own] - 1.0);
      double b = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c)
        if (c != own) b = std::min(b, sums[c] / n[c]);
      const double m = std::max(a, b);
      if (m > 0.0) total += (b - a) / m;
    }
    r.silhouette = total / static_cast<double>(T);
    r.silhouette_undefined = !any_spread;
  }

  // Compactness per cluster and within-cluster sums.
  std::vector<double> sigma(k, 0.0);
  double within = 0.0;
  std::vector<double> var_sum(k * D, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t c = lab[i];
    sigma[c] += dist(&X[i * D], &centroid[c * D], D);
    for (std::size_t j = 0; j < D; ++j) {
      const double d = X[i * D + j] - centroid[c * D + j];
      var_sum[c * D + j] += d * d;
      within += d * d;
    }
  }
  for (std::size_t c = 0; c < k; ++c) sigma[c] /= n[c];

  // Davies-Bouldin.
  {
    double total = 0.0;
    for (std::size_t a = 0; a < k && !r.davies_bouldin_undefined; ++a) {
      double worst = 0.0;
      for (std::size_t b = 0; b < k; ++b) {
        if (a == b) continue;
        const double d = dist(&centroid[a * D], &centroid[b * D], D);
        if (d == 0.0) {
          r.davies_bouldin_undefined = true;
          break;
        }
        worst = std::max(worst, (sigma[a] + sigma[b]) / d);
      }
      total += worst;
    }
    r.davies_bouldin = r.davies_bouldin_undefined ? kNaN : total / static_cast<double>(k);
  }

  // Calinski-Harabasz.
  {
    double between = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double d = centroid[c * D + j] - mean[j];
        s += d * d;
      }
      between += n[c] * s;
    }
    if (T == k || within == 0.0) {
      r.calinski_harabasz_undefined = true;
      r.calinski_harabasz = kNaN;
    } else {
      r.calinski_harabasz = (between / static_cast<double>(k - 1)) /
                            (within / static_cast<double>(T - k));
    }
  }

  r.rmse = std::sqrt(within / static_cast<double>(T));

  {
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < D; ++j) s += var_sum[c * D + j] / n[c];
      total += s / static_cast<double>(D);
    }
    r.variance = total / static_cast<double>(k);
  }

  {
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b) {
        total += dist(&centroid[a * D], &centroid[b * D], D);
        ++pairs;
      }
    r.inter_cluster_distance = total / static_cast<double>(pairs);
  }
  return r;
}

std::string to_key_value(const MetricReport& r) {
  std::string out;
  out += "method=" + r.method_name + "\n";
  out += "k=" + std::to_string(r.k) + "\n";
  out += "n_samples=" + std::to_string(r.n_samples) + "\n";
  out += "silhouette=" + num(r.silhouette) + "\n";
  out += "davies_bouldin=" + num(r.davies_bouldin) + "\n";
  out += "calinski_harabasz=" + num(r.calinski_harabasz) + "\n";
  out += "rmse=" + num(r.rmse) + "\n";
  out += "variance=" + num(r.variance) + "\n";
  out += "inter_cluster_distance=" + num(r.inter_cluster_distance) + "\n";
  out += "empty_clusters=" + std::to_string(r.empty_clusters) + "\n";
  out += fmt::format("silhouette_undefined={}\n", r.silhouette_undefined);
  out += fmt::format("davies_bouldin_undefined={}\n", r.davies_bouldin_undefined);
  out += fmt::format("calinski_harabasz_undefined={}\n", r.calinski_harabasz_undefined);
  return out;
}

std::string to_json(const MetricReport& r) {
  std::string name;
  for (char ch : r.method_name) {
    if (ch == '"' || ch == '\\') name += '\\';
    name += ch;
  }
  return fmt::format(
      "{{\n  \"method\": \"{}\",\n  \"k\": {},\n  \"n_samples\": {},\n  \"silhouette\": {},\n"
      "  \"davies_bouldin\": {},\n  \"calinski_harabasz\": {},\n  \"rmse\": {},\n"
      "  \"variance\": {},\n  \"inter_cluster_distance\": {},\n  \"empty_clusters\": {},\n"
      "  \"flags\": {{\"silhouette_undefined\": {}, \"davies_bouldin_undefined\": {}, "
      "\"calinski_harabasz_undefined\": {}}}\n}}\n",
      name, r.k, r.n_samples, json_num(r.silhouette), json_num(r.davies_bouldin),
      json_num(r.calinski_harabasz), json_num(r.rmse), json_num(r.variance),
      json_num(r.inter_cluster_distance), r.empty_clusters, r.silhouette_undefined,
      r.davies_bouldin_undefined, r.calinski_harabasz_undefined);
}

std::string ElbowResult::curve_data() const {
  std::string out = "k distortion\n";
  for (std::size_t i = 0; i < ks.size(); ++i) out += fmt::format("{} {}\n", ks[i], distortion[i]);
  return out;
}

ElbowResult find_knee(std::vector<std::size_t> ks, std::vector<double> distortion) {
  if (ks.empty() || ks.size() != distortion.size())
    throw std::invalid_argument("find_knee: curve needs matching, non-empty k and distortion lists");
  ElbowResult r;
  r.ks = std::move(ks);
  r.distortion = std::move(distortion);
  r.k_star = r.ks.front();
  const auto& y = r.distortion;
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  const double span = *hi - *lo;
  for (std::size_t i = 1; i < y.size(); ++i)
    if (y[i] > y[i - 1] + 1e-12 * std::max(1.0, std::abs(*hi))) r.non_monotone = true;
  if (r.ks.size() < 3 || !(span > 0.0)) {
    r.knee_undefined = true;
    return r;
  }
  const double x0 = static_cast<double>(r.ks.front());
  const double xr = static_cast<double>(r.ks.back()) - x0;
  auto nx = [&](std::size_t i) { return (static_cast<double>(r.ks[i]) - x0) / xr; };
  auto ny = [&](std::size_t i) { return (y[i] - *lo) / span; };
  // Signed distance below the chord, up to a constant factor.
  const double x1 = nx(0), y1 = ny(0), x2 = nx(y.size() - 1), y2 = ny(y.size() - 1);
  const double len = std::hypot(x2 - x1, y2 - y1);
  double best = 0.0;
  for (std::size_t i = 1; i + 1 < y.size(); ++i) {
    const double cross = (x2 - x1) * (ny(i) - y1) - (y2 - y1) * (nx(i) - x1);
    const double below = (y2 < y1 ? -cross : cross) / len;
    if (below > best + 1e-9) {
      best = below;
      r.k_star = r.ks[i];
    }
  }
  if (best <= 1e-9) r.knee_undefined = true;
  return r;
}

ElbowResult elbow_k(const Tensor& data, std::size_t k_min, std::size_t k_max, std::uint64_t seed) {
  if (data.rank() != 2) throw ShapeError("elbow_k: expected (T, D), got " + shape_str(data.shape()));
  if (k_min < 1 || k_min > k_max) throw std::invalid_argument("elbow_k: need 1 <= k_min <= k_max");
  if (k_max >= data.dim(0))
    throw std::invalid_argument("elbow_k: k_max must be below the sample count " + std::to_string(data.dim(0)));
  std::vector<std::size_t> ks;
  std::vector<double> curve;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    KMeansOptions o;
    o.seed = seed;
    ks.push_back(k);
    curve.push_back(kmeans(data, k, o).inertia);
  }
  return find_knee(std::move(ks), std::move(curve));
}

}  // namespace btgat
