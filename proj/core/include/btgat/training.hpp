#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "btgat/cluster_eval.hpp"
#include "btgat/grid_data.hpp"
#include "btgat/model.hpp"

namespace btgat {

/// Loss or gradient became non-finite. Parameters are left at their last good values.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::uint64_t step)
      : std::runtime_error(what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

struct TrainConfig {
  double eta = 0.001;
  double mu = 0.9;
  double lambda = 10.0;
  std::size_t update_interval = 25;
  double tol = 0.01;
  std::size_t patience = 3;
  std::size_t max_iters = 500;
  std::size_t batch_size = 1;  // windows per step
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::size_t pretrain_steps = 200;

  void validate() const;
};

struct ClusterState {
  Tensor centroids;  // (k, d)
  Tensor q;          // (T, k)
  Tensor p;          // (T, k)
  std::vector<std::size_t> labels;
  std::vector<double> delta_history;
};

struct OptimizerState {
  std::vector<Tensor> velocity;

  static OptimizerState zeros_like(const ParameterSet& params);
};

/// Mean squared error over elements where mask is 1. target and mask are
/// constants shaped like prediction.
Var reconstruction_loss(const Tensor& target, const Var& prediction, const Tensor& mask);

/// Sharpened targets p_ij proportional to q_ij^2 / f_j with f_j = sum_i q_ij
/// floored at 1e-12.
Tensor target_distribution(const Tensor& q);

/// Row-averaged KL(p || q). p is held constant; q is clamped below at 1e-12.
Var clustering_loss(const Tensor& p, const Var& q);
double clustering_loss(const Tensor& p, const Tensor& q);

Var total_loss(const Var& reconstruction, const Var& clustering, double lambda);
double total_loss(double reconstruction, double clustering, double lambda);

/// Classical momentum: v <- mu v - eta g, theta <- theta + v. A non-finite
/// gradient throws NonFiniteError naming the parameter before anything changes.
void sgd_momentum_step(ParameterSet& params, std::span<const Tensor> grads, OptimizerState& opt,
                       double eta, double mu);

/// k-means (k-means++ seeding, best of 10 restarts) on the embedding rows.
KMeansResult init_centroids(const Tensor& embeddings, std::size_t k, std::uint64_t seed);

/// Row-wise argmax; ties go to the lowest cluster index.
std::vector<std::size_t> hard_labels(const Tensor& q);

/// Fraction of positions whose label differs.
double label_change_fraction(std::span<const std::size_t> before, std::span<const std::size_t> after);

/// Window b of a sequence tensor as (window_length, H, W, C).
Tensor window_slice(const SequenceTensor& seq, std::size_t b);

/// Per-frame latent embeddings (source_frames, d) in source time order.
Tensor embed_frames(const Model& model, const SequenceTensor& seq);

struct StepLosses {
  double reconstruction = 0.0;
  double clustering = 0.0;
  double total = 0.0;
};

/// One optimizer step on the given windows. With `p` (source_frames x k) the
/// clustering term is included; without it the step is reconstruction only.
StepLosses train_step(Model& model, OptimizerState& opt, const SequenceTensor& seq,
                      std::span<const std::size_t> windows, const Tensor* p,
                      const TrainConfig& config);

struct StepRecord {
  std::uint64_t step = 0;
  bool joint = false;
  StepLosses losses;
};

struct RefreshRecord {
  std::uint64_t step = 0;
  std::optional<double> delta;  // absent for the snapshot taken at centroid init
  std::vector<std::size_t> labels;
  std::vector<std::size_t> reseeded;
};

struct TrainingLog {
  std::vector<StepRecord> steps;
  std::vector<RefreshRecord> refreshes;
  std::string stop_reason;

  /// Newline-delimited key=value records.
  std::string text() const;
};

struct TrainResult {
  ClusterState clusters;
  TrainingLog log;
  std::uint64_t steps = 0;
  bool converged = false;
};

struct TrainHooks {
  /// Called every checkpoint_every steps, at the end, and before a divergence abort.
  std::function<void(const Model&, std::uint64_t step)> checkpoint;
  /// Receives each log line as it is produced.
  std::ostream* log_stream = nullptr;
};

/// Warm-up on reconstruction, k-means centroid init on the embeddings, then
/// joint optimization with target refreshes every update_interval steps until
/// the label-change fraction stays below tol for `patience` refreshes.
TrainResult train(Model& model, const SequenceTensor& seq, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Soft assignments, targets and labels for the current model on all frames.
ClusterState assign_clusters(const Model& model, const SequenceTensor& seq);

}  // namespace btgat
