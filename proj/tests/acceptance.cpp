// Acceptance checks for the full pipeline. Prints one line per criterion and
// exits non-zero if any criterion fails.
//
// usage: btgat_acceptance <path-to-btgat-cli> [scratch-dir]

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "btgat/cluster_eval.hpp"
#include "btgat/synth.hpp"
#include "btgat/training.hpp"
#include "support/grad_suite.hpp"
#include "support/oracles.hpp"

using namespace btgat;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << fmt::format("criterion {} {} {}", id, pass ? "PASS" : "FAIL", detail) << std::endl;
}

// ---------------------------------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  std::size_t checked = 0, failed = 0;
  double worst = 0.0;
  std::string first_failure;
  auto tally = [&](const std::vector<suite::Case>& cases) {
    for (const auto& c : cases) {
      ++checked;
      worst = std::max(worst, c.report.max_rel_error);
      if (!c.report.passed) {
        ++failed;
        if (first_failure.empty()) first_failure = c.name;
      }
    }
  };
  for (std::uint64_t seed = 1; seed <= 20; ++seed) tally(suite::layer_suite(seed, 1e-4));
  const std::size_t layer_checks = checked;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) tally(suite::model_suite(seed, 1e-3));
  const double secs = seconds_since(t0);
  report(1, failed == 0 && secs < 120.0,
         fmt::format("layer checks={} model checks={} failed={} worst_rel_error={:.3g} runtime={:.1f}s{}", layer_checks,
                     checked - layer_checks, failed, worst, secs,
                     first_failure.empty() ? "" : " first_failure=" + first_failure));
}

// ---------------------------------------------------------------------------

double row_entropy(const Tensor& t, std::size_t r) {
  const std::size_t k = t.dim(1);
  double h = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double v = t[r * k + j];
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

void criterion_distributions() {
  Rng rng(2718);
  double worst_q = 0.0, worst_p = 0.0, min_kl = 0.0, worst_self = 0.0, worst_entropy = -1.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t M = 1 + rng.below(12), d = 1 + rng.below(6), k = 2 + rng.below(6);
    const double alpha = rng.uniform(0.2, 4.0);
    const Tensor E = suite::random_tensor({M, d}, rng, -3, 3);
    const Tensor C = suite::random_tensor({k, d}, rng, -3, 3);
    const Tensor q = soft_assign(Var(E), Var(C), alpha).value();
    const Tensor p = target_distribution(q);
    for (std::size_t r = 0; r < M; ++r) {
      double sq = 0.0, sp = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        sq += q[r * k + j];
        sp += p[r * k + j];
      }
      worst_q = std::max(worst_q, std::abs(sq - 1.0));
      worst_p = std::max(worst_p, std::abs(sp - 1.0));
    }
    min_kl = std::min(min_kl, clustering_loss(p, q));
    worst_self = std::max(worst_self, std::abs(clustering_loss(q, q)));

    // Stacking every cyclic shift of each row makes all column frequencies equal.
    Tensor balanced({M * k, k});
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t s = 0; s < k; ++s)
        for (std::size_t j = 0; j < k; ++j) balanced[(r * k + s) * k + j] = q[r * k + (j + s) % k];
    const Tensor pb = target_distribution(balanced);
    for (std::size_t r = 0; r < M * k; ++r)
      worst_entropy = std::max(worst_entropy, row_entropy(pb, r) - row_entropy(balanced, r));
  }
  const bool pass = worst_q <= 1e-9 && worst_p <= 1e-9 && min_kl >= -1e-12 && worst_self <= 1e-12 &&
                    worst_entropy <= 1e-12;
  report(2, pass,
         fmt::format("instances=1000 max|sum q-1|={:.2g} max|sum p-1|={:.2g} min KL={:.3g} max KL(q,q)={:.2g} "
                     "max entropy gain={:.3g}",
                     worst_q, worst_p, min_kl, worst_self, worst_entropy));
}

// ---------------------------------------------------------------------------

void criterion_metrics() {
  Rng rng(31415);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    const std::size_t T = k + 1 + rng.below(40 - k);
    const std::size_t D = 1 + rng.below(8);
    Tensor X({T, D});
    oracle::Matrix rows(T, std::vector<double>(D));
    Labeling l;
    l.k = k;
    for (std::size_t i = 0; i < T; ++i) l.labels.push_back(i < k ? i : rng.below(k));
    for (std::size_t i = T - 1; i > 0; --i) std::swap(l.labels[i], l.labels[rng.below(i + 1)]);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < D; ++j) {
        X[i * D + j] = rng.uniform(-3, 3) + (j == 0 ? 1.5 * static_cast<double>(l.labels[i]) : 0.0);
        rows[i][j] = X[i * D + j];
      }
    const auto r = evaluate_internal(X, l);
    const auto o = oracle::metrics(rows, std::vector<int>(l.labels.begin(), l.labels.end()), static_cast<int>(k));
    worst = std::max({worst, std::abs(r.silhouette - o.silhouette), std::abs(r.davies_bouldin - o.davies_bouldin),
                      std::abs(r.calinski_harabasz - o.calinski_harabasz) / std::max(1.0, o.calinski_harabasz),
                      std::abs(r.rmse - o.rmse), std::abs(r.variance - o.variance),
                      std::abs(r.inter_cluster_distance - o.icd)});
  }
  const auto hand = evaluate_internal(Tensor({4, 1}, {0, 0.1, 10, 10.1}), {{0, 0, 1, 1}, 2});
  const bool hand_ok = std::abs(hand.silhouette - 0.990) <= 0.001 &&
                       std::abs(hand.inter_cluster_distance - 10.0) <= 1e-9 && std::abs(hand.rmse - 0.05) <= 1e-9;
  report(3, worst <= 1e-9 && hand_ok,
         fmt::format("instances=50 max deviation from reference={:.2g} hand silhouette={:.6f} icd={} rmse={}", worst,
                     hand.silhouette, hand.inter_cluster_distance, hand.rmse));
}

// ---------------------------------------------------------------------------

struct PlantedRun {
  SynthResult synth;
  GridDataset data;
  TrainResult result;
  Tensor embeddings;
  TrainConfig train;
  double seconds = 0.0;
};

RegimeSpec planted_spec(double noise) {
  RegimeSpec s;
  s.n_regimes = 3;
  s.segment_lengths = uniform_segments(120, 20);
  s.L = 16;
  s.W = 16;
  s.n_vars = 3;
  s.noise_sigma = noise;
  s.seed = 11;
  return s;
}

PlantedRun run_planted(double noise, std::uint64_t seed) {
  PlantedRun run;
  run.synth = generate(planted_spec(noise));
  run.data = minmax_normalize(impute_mean(run.synth.data));
  ModelConfig mc;
  mc.n_clusters = 3;
  run.train.seed = seed;
  const auto seq = to_sequence_tensor(run.data, mc.window_length);
  const auto t0 = Clock::now();
  Model model(mc, {16, 16, 3}, seed);
  run.result = train(model, seq, run.train);
  run.seconds = seconds_since(t0);
  run.embeddings = embed_frames(model, seq);
  return run;
}

// Checks the engine's Δ against a recount from the logged snapshots and that
// the stop happened at the first refresh completing a sub-tol streak.
bool delta_mechanics_hold(const PlantedRun& run, std::string& why) {
  const auto& refreshes = run.result.log.refreshes;
  const std::size_t patience = run.train.patience;
  std::size_t streak = 0;
  for (std::size_t i = 1; i < refreshes.size(); ++i) {
    const auto& a = refreshes[i - 1].labels;
    const auto& b = refreshes[i].labels;
    std::size_t changed = 0;
    for (std::size_t t = 0; t < a.size(); ++t) changed += a[t] != b[t];
    const double brute = static_cast<double>(changed) / static_cast<double>(a.size());
    if (!refreshes[i].delta || *refreshes[i].delta != brute) {
      why = fmt::format("refresh {} delta differs from recount {}", i, brute);
      return false;
    }
    streak = brute < run.train.tol ? streak + 1 : 0;
    if (streak >= patience && i + 1 != refreshes.size()) {
      why = fmt::format("streak reached patience at refresh {} but training continued", i);
      return false;
    }
  }
  if (run.result.converged != (streak >= patience)) {
    why = "converged flag disagrees with the recounted streak";
    return false;
  }
  return true;
}

void criterion_planted_recovery(const PlantedRun& run) {
  const double ari = score_against_truth(run.result.clusters.labels, run.synth.truth).ari;
  const auto elbow = elbow_k(flatten_2d(run.data), 2, 10, 0);
  const auto& steps = run.result.log.steps;
  const double first_rec = steps.front().losses.reconstruction;
  const double last_rec = steps.back().losses.reconstruction;
  const bool pass = ari >= 0.9 && elbow.k_star == 3 && run.result.converged && run.seconds < 600.0;
  report(4, pass,
         fmt::format("ARI={:.4f} elbow k_star={} converged={} steps={} L_rec first={:.4g} last={:.4g} runtime={:.1f}s",
                     ari, elbow.k_star, run.result.converged, run.result.steps, first_rec, last_rec, run.seconds));
}

void criterion_ordering(const std::vector<PlantedRun>& runs) {
  bool pass = true;
  std::string detail;
  for (const auto& run : runs) {
    const Tensor raw = flatten_2d(run.data);
    const double model_sil = evaluate_internal(run.embeddings, {run.result.clusters.labels, 3}).silhouette;
    const double km_sil = evaluate_internal(raw, kmeans_cluster(raw, 3, run.train.seed)).silhouette;
    const double hac_sil = evaluate_internal(raw, hac_cluster(raw, 3)).silhouette;
    pass = pass && model_sil >= km_sil && model_sil >= hac_sil;
    detail += fmt::format("[seed {} btgat={:.4f} kmeans={:.4f} hac={:.4f}] ", run.train.seed, model_sil, km_sil,
                          hac_sil);
  }
  detail.pop_back();
  report(5, pass, detail);
}

void criterion_convergence(const std::vector<const PlantedRun*>& runs) {
  bool pass = true;
  std::string detail;
  std::size_t refreshes = 0;
  for (const auto* run : runs) {
    std::string why;
    if (!delta_mechanics_hold(*run, why)) {
      pass = false;
      detail += fmt::format(" seed {}: {}", run->train.seed, why);
    }
    refreshes += run->result.log.refreshes.size() - 1;
  }
  report(6, pass, fmt::format("runs={} refreshes checked={}{}", runs.size(), refreshes, detail));
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::ifstream f(entry.path(), std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    files[entry.path().filename().string()] = os.str();
  }
  return files;
}

int shell(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

void criterion_reproducibility(const fs::path& cli, const fs::path& scratch) {
  const auto t0 = Clock::now();
  fs::remove_all(scratch);
  const fs::path data = scratch / "data", out = scratch / "compare";
  const std::string exe = "\"" + cli.string() + "\"";
  if (shell(fmt::format("{} synth --seed 7 --out \"{}\"", exe, data.string())) != 0) {
    report(7, false, "synth command failed");
    return;
  }
  const std::string compare = fmt::format(
      "{} compare --seed 7 --threads 1 --input \"{}\" --truth \"{}\" --set model.n_clusters=3 --out \"{}\"", exe,
      (data / "data.stgrid").string(), (data / "truth.txt").string(), out.string());
  if (shell(compare) != 0) {
    report(7, false, "first compare run failed");
    return;
  }
  const auto first = snapshot(out);
  fs::remove_all(out);
  if (shell(compare) != 0) {
    report(7, false, "second compare run failed");
    return;
  }
  const auto second = snapshot(out);
  std::string differing;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) differing += " " + name;
  }
  const bool has_outputs = first.count("comparison.txt") && first.count("model.ckpt");
  report(7, differing.empty() && first.size() == second.size() && has_outputs,
         fmt::format("files compared={} differing={} runtime={:.1f}s", first.size(),
                     differing.empty() ? "none" : differing, seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: btgat_acceptance <btgat-cli> [scratch-dir]\n";
    return 2;
  }
  const fs::path cli = argv[1];
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "btgat_acceptance";

  criterion_gradients();
  criterion_distributions();
  criterion_metrics();

  const PlantedRun clean = run_planted(0.1, 5);
  criterion_planted_recovery(clean);

  std::vector<PlantedRun> noisy;
  for (std::uint64_t seed : {5, 6, 7}) noisy.push_back(run_planted(0.3, seed));
  criterion_ordering(noisy);

  std::vector<const PlantedRun*> all{&clean};
  for (const auto& r : noisy) all.push_back(&r);
  criterion_convergence(all);

  criterion_reproducibility(cli, scratch);

  std::cout << fmt::format("{} of 7 criteria passed", 7 - failures) << std::endl;
  return failures == 0 ? 0 : 1;
}
