#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "btgat/cluster_eval.hpp"
#include "btgat/random.hpp"

namespace btgat {

Labeling canonical_labels(const std::vector<std::size_t>& labels) {
  Labeling out;
  std::vector<std::size_t> seen;
  out.labels.reserve(labels.size());
  for (auto l : labels) {
    auto it = std::find(seen.begin(), seen.end(), l);
    if (it == seen.end()) {
      seen.push_back(l);
      it = seen.end() - 1;
    }
    out.labels.push_back(static_cast<std::size_t>(it - seen.begin()));
  }
  out.k = seen.size();
  return out;
}

namespace {

void check_matrix(const Tensor& data, const char* who) {
  if (data.rank() != 2) throw ShapeError(std::string(who) + ": expected (T, D) matrix, got " + shape_str(data.shape()));
}

double sq_dist(const double* a, const double* b, std::size_t D) {
  double s = 0.0;
  for (std::size_t j = 0; j < D; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

struct Run {
  std::vector<double> centroids;
  std::vector<std::size_t> labels;
  double inertia = 0.0;
  std::vector<double> history;
  std::size_t iterations = 0;
  bool duplicates = false;
};

Run lloyd(const std::vector<double>& X, std::size_t T, std::size_t D, std::size_t k,
          std::size_t max_iters, Rng& rng) {
  Run run;
  auto& C = run.centroids;
  C.assign(k * D, 0.0);

  // k-means++ seeding
  std::vector<double> d2(T, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> chosen(T, 0);
  std::size_t first = rng.below(T);
  std::copy_n(&X[first * D], D, &C[0]);
  chosen[first] = 1;
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
      d2[i] = std::min(d2[i], sq_dist(&X[i * D], &C[(c - 1) * D], D));
      total += d2[i];
    }
    std::size_t pick = T;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < T; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        target -= d2[i];
        if (target < 0.0) break;
      }
    } else {
      run.duplicates = true;
      for (std::size_t i = 0; i < T && pick == T; ++i)
        if (!chosen[i]) pick = i;
      if (pick == T) pick = 0;
    }
    chosen[pick] = 1;
    std::copy_n(&X[pick * D], D, &C[c * D]);
  }

  auto& labels = run.labels;
  labels.assign(T, k);
  std::vector<double> dist(T, 0.0);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
      std::size_t best = 0;
      double bd = sq_dist(&X[i * D], &C[0], D);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(&X[i * D], &C[c * D], D);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[i] != best) changed = true;
      labels[i] = best;
      dist[i] = bd;
      inertia += bd;
    }
    run.history.push_back(inertia);
    run.iterations = iter + 1;
    if (!changed) break;

    std::vector<double> sums(k * D, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < T; ++i) {
      ++counts[labels[i]];
      for (std::size_t j = 0; j < D; ++j) sums[labels[i] * D + j] += X[i * D + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Reseed an empty cluster at the sample farthest from its centroid.
        std::size_t far = 0;
        for (std::size_t i = 1; i < T; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy_n(&X[far * D], D, &C[c * D]);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < D; ++j)
        C[c * D + j] = sums[c * D + j] / static_cast<double>(counts[c]);
    }
  }
  run.inertia = 0.0;
  for (std::size_t i = 0; i < T; ++i) run.inertia += sq_dist(&X[i * D], &C[labels[i] * D], D);
  return run;
}

}  // namespace

KMeansResult kmeans(const Tensor& data, std::size_t k, const KMeansOptions& options) {
  check_matrix(data, "kmeans");
  const std::size_t T = data.dim(0), D = data.dim(1);
  if (k < 1 || k > T)
    throw std::invalid_argument("kmeans: need 1 <= k <= T (k=" + std::to_string(k) +
                                ", T=" + std::to_string(T) + ")");

  // Canonical (lexicographic) row order makes seeding independent of input order.
  std::vector<std::size_t> order(T);
  std::iota(order.begin(), order.end(), 0);
  const auto& raw = data.storage();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(&raw[a * D], &raw[a * D] + D, &raw[b * D], &raw[b * D] + D);
  });
  std::vector<double> X(T * D);
  for (std::size_t i = 0; i < T; ++i) std::copy_n(&raw[order[i] * D], D, &X[i * D]);

  Rng rng(options.seed);
  Run best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.restarts); ++r) {
    Run run = lloyd(X, T, D, k, options.max_iters, rng);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }

  KMeansResult out;
  out.centroids = Tensor({k, D}, best.centroids);
  out.labels.assign(T, 0);
  for (std::size_t i = 0; i < T; ++i) out.labels[order[i]] = best.labels[i];
  out.inertia = best.inertia;
  out.inertia_history = std::move(best.history);
  out.iterations = best.iterations;
  out.duplicate_centroids = best.duplicates;
  return out;
}

Labeling kmeans_cluster(const Tensor& data, std::size_t k, std::uint64_t seed) {
  KMeansOptions o;
  o.seed = seed;
  auto r = kmeans(data, k, o);
  auto l = canonical_labels(r.labels);
  l.k = k;
  return l;
}

HacResult hac(const Tensor& data, std::size_t k, Linkage linkage) {
  check_matrix(data, "hac");
  const std::size_t T = data.dim(0), D = data.dim(1);
  if (k < 1 || k > T) throw std::invalid_argument("hac: need 1 <= k <= T");
  const auto& X = data.storage();
  // Ward works on squared Euclidean distances, average linkage on plain ones.
  std::vector<double> dist(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) {
      double d = sq_dist(&X[i * D], &X[j * D], D);
      if (linkage == Linkage::average) d = std::sqrt(d);
      dist[i * T + j] = dist[j * T + i] = d;
    }
  std::vector<std::size_t> size(T, 1);
  std::vector<std::uint8_t> active(T, 1);
  std::vector<std::size_t> owner(T);
  std::iota(owner.begin(), owner.end(), 0);

  HacResult result;
  for (std::size_t clusters = T; clusters > k; --clusters) {
    std::size_t ba = T, bb = T;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < T; ++a) {
      if (!active[a]) continue;
      for (std::size_t b = a + 1; b < T; ++b) {
        if (!active[b]) continue;
        if (dist[a * T + b] < bd) {
          bd = dist[a * T + b];
          ba = a;
          bb = b;
        }
      }
    }
    const double na = static_cast<double>(size[ba]), nb = static_cast<double>(size[bb]);
    for (std::size_t c = 0; c < T; ++c) {
      if (!active[c] || c == ba || c == bb) continue;
      const double nc = static_cast<double>(size[c]);
      double d;
      if (linkage == Linkage::ward) {
        d = ((na + nc) * dist[ba * T + c] + (nb + nc) * dist[bb * T + c] - nc * bd) /
            (na + nb + nc);
      } else {
        d = (na * dist[ba * T + c] + nb * dist[bb * T + c]) / (na + nb);
      }
      dist[ba * T + c] = dist[c * T + ba] = d;
    }
    size[ba] += size[bb];
    active[bb] = 0;
    for (auto& o : owner)
      if (o == bb) o = ba;
    result.merges.push_back({ba, bb, bd});
  }
  result.labeling = canonical_labels(owner);
  return result;
}

Labeling hac_cluster(const Tensor& data, std::size_t k, Linkage linkage) {
  return hac(data, k, linkage).labeling;
}

}  // namespace btgat
