#include "btgat/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace btgat {

namespace {

constexpr double kProbFloor = 1e-12;

/// Sum of p * (log p - log max(q, floor)); p log p is a constant with 0 log 0 = 0.
Var kl_sum(const Tensor& p, const Var& q) {
  if (p.shape() != q.shape())
    throw ShapeError("clustering_loss: p " + shape_str(p.shape()) + " vs q " + shape_str(q.shape()));
  Tensor logp(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) logp[i] = p[i] > 0.0 ? std::log(p[i]) : 0.0;
  return ops::sum(ops::mul(Var(p), ops::sub(Var(std::move(logp)), ops::log(ops::clamp_min(q, kProbFloor)))));
}

Var masked_sq_sum(const Tensor& target, const Var& prediction, const Tensor& mask) {
  if (target.shape() != prediction.shape() || mask.shape() != prediction.shape())
    throw ShapeError("reconstruction_loss: prediction " + shape_str(prediction.shape()) + ", target " +
                     shape_str(target.shape()) + ", mask " + shape_str(mask.shape()));
  return ops::sum(ops::mul(ops::square(ops::sub(prediction, Var(target))), Var(mask)));
}

double mask_count(const Tensor& mask) {
  double n = 0.0;
  for (double v : mask.data()) n += v;
  return n;
}

std::span<const std::uint8_t> window_mask(const SequenceTensor& seq, std::size_t b) {
  return {seq.frame_valid.data() + b * seq.window_length, seq.window_length};
}

std::string step_line(const StepRecord& r) {
  return fmt::format("step={} phase={} L_rec={} L_clus={} L_total={}", r.step,
                     r.joint ? "joint" : "pretrain", r.losses.reconstruction, r.losses.clustering,
                     r.losses.total);
}

std::string refresh_line(const RefreshRecord& r) {
  std::string line = fmt::format("step={} phase={}", r.step, r.delta ? "refresh" : "init");
  if (r.delta) line += fmt::format(" delta={}", *r.delta);
  line += fmt::format(" reseeded={}", fmt::join(r.reseeded, ","));
  std::vector<std::size_t> counts;
  for (auto l : r.labels) {
    if (l >= counts.size()) counts.resize(l + 1, 0);
    ++counts[l];
  }
  line += fmt::format(" sizes={}", fmt::join(counts, ","));
  return line;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be > 0");
  if (!(mu >= 0.0 && mu < 1.0)) throw std::invalid_argument("mu must lie in [0, 1)");
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
  if (!(tol > 0.0 && tol <= 1.0)) throw std::invalid_argument("tol must lie in (0, 1]");
  if (update_interval < 1) throw std::invalid_argument("update_interval must be >= 1");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

OptimizerState OptimizerState::zeros_like(const ParameterSet& params) {
  OptimizerState s;
  for (std::size_t i = 0; i < params.size(); ++i) s.velocity.emplace_back(params.value(i).shape(), 0.0);
  return s;
}

Var reconstruction_loss(const Tensor& target, const Var& prediction, const Tensor& mask) {
  Var total = masked_sq_sum(target, prediction, mask);
  const double n = mask_count(mask);
  if (!(n > 0.0)) throw std::invalid_argument("reconstruction_loss: every element is masked");
  return ops::scale(total, 1.0 / n);
}

Tensor target_distribution(const Tensor& q) {
  if (q.rank() != 2) throw ShapeError("target_distribution: expected (T, k), got " + shape_str(q.shape()));
  const std::size_t T = q.dim(0), k = q.dim(1);
  std::vector<double> f(k, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < k; ++j) f[j] += q[i * k + j];
  for (auto& v : f) v = std::max(v, kProbFloor);
  Tensor p(q.shape());
  for (std::size_t i = 0; i < T; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[i * k + j] = q[i * k + j] * q[i * k + j] / f[j];
      row += p[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= row;
  }
  return p;
}

Var clustering_loss(const Tensor& p, const Var& q) {
  const std::size_t rows = p.rank() == 1 ? 1 : p.dim(0);
  return ops::scale(kl_sum(p, q), 1.0 / static_cast<double>(rows));
}

double clustering_loss(const Tensor& p, const Tensor& q) {
  return clustering_loss(p, Var(q)).value().item();
}

Var total_loss(const Var& reconstruction, const Var& clustering, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("total_loss: lambda must be > 0");
  return ops::add(reconstruction, ops::scale(clustering, lambda));
}

double total_loss(double reconstruction, double clustering, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("total_loss: lambda must be > 0");
  return reconstruction + lambda * clustering;
}

void sgd_momentum_step(ParameterSet& params, std::span<const Tensor> grads, OptimizerState& opt,
                       double eta, double mu) {
  if (grads.size() != params.size() || opt.velocity.size() != params.size())
    throw std::invalid_argument("sgd_momentum_step: parameter, gradient and velocity counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape() || opt.velocity[i].shape() != params.value(i).shape())
      throw ShapeError("sgd_momentum_step: shape mismatch for '" + params.name(i) + "'");
    if (!grads[i].all_finite()) throw NonFiniteError("non-finite gradient for parameter '" + params.name(i) + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params.value(i).data();
    auto v = opt.velocity[i].data();
    auto g = grads[i].data();
    for (std::size_t e = 0; e < theta.size(); ++e) {
      v[e] = mu * v[e] - eta * g[e];
      theta[e] += v[e];
    }
  }
}

KMeansResult init_centroids(const Tensor& embeddings, std::size_t k, std::uint64_t seed) {
  KMeansOptions o;
  o.seed = seed;
  return kmeans(embeddings, k, o);
}

std::vector<std::size_t> hard_labels(const Tensor& q) {
  if (q.rank() != 2) throw ShapeError("hard_labels: expected (T, k), got " + shape_str(q.shape()));
  const std::size_t T = q.dim(0), k = q.dim(1);
  std::vector<std::size_t> labels(T, 0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 1; j < k; ++j)
      if (q[i * k + j] > q[i * k + labels[i]]) labels[i] = j;
  return labels;
}

double label_change_fraction(std::span<const std::size_t> before, std::span<const std::size_t> after) {
  if (before.size() != after.size() || before.empty())
    throw std::invalid_argument("label_change_fraction: label vectors must be non-empty and equally long");
  std::size_t changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) changed += before[i] != after[i];
  return static_cast<double>(changed) / static_cast<double>(before.size());
}

Tensor window_slice(const SequenceTensor& seq, std::size_t b) {
  const auto& s = seq.tensor.shape();
  if (b >= s[0]) throw std::out_of_range("window_slice: window " + std::to_string(b) + " of " + std::to_string(s[0]));
  const std::size_t n = s[1] * s[2] * s[3] * s[4];
  Tensor w({s[1], s[2], s[3], s[4]});
  std::copy_n(seq.tensor.data().data() + b * n, n, w.data().data());
  return w;
}

Tensor embed_frames(const Model& model, const SequenceTensor& seq) {
  const std::size_t d = model.config().latent_dim;
  Tensor out({seq.source_frames, d}, 0.0);
  Binding params(model.parameters(), nullptr);
  for (std::size_t b = 0; b < seq.windows(); ++b) {
    const auto mask = window_mask(seq, b);
    const auto enc = model.encode(params, Var(model.prepare_input(window_slice(seq, b))), mask);
    const auto& E = enc.frame_embeddings.value();
    for (std::size_t t = 0; t < seq.window_length; ++t) {
      const auto src = seq.source_index(b, t);
      if (!src) continue;
      std::copy_n(&E[t * d], d, &out[*src * d]);
    }
  }
  return out;
}

StepLosses train_step(Model& model, OptimizerState& opt, const SequenceTensor& seq,
                      std::span<const std::size_t> windows, const Tensor* p,
                      const TrainConfig& config) {
  if (windows.empty()) throw std::invalid_argument("train_step: empty batch");
  Tape tape;
  Binding params(model.parameters(), &tape);
  const std::size_t k = model.config().n_clusters;
  std::vector<Var> rec_terms, clus_terms;
  double count = 0.0;
  std::size_t frames = 0;
  for (auto b : windows) {
    const auto mask = window_mask(seq, b);
    const Tensor x = window_slice(seq, b);
    auto out = model.forward(params, x, mask);
    const Tensor m = model.loss_mask(seq.window_length, mask);
    rec_terms.push_back(masked_sq_sum(model.prepare_input(x), out.reconstruction, m));
    count += mask_count(m);
    if (p && !out.valid.empty()) {
      Tensor pw({out.valid.size(), k});
      for (std::size_t r = 0; r < out.valid.size(); ++r) {
        const auto src = *seq.source_index(b, out.valid[r]);
        std::copy_n(&(*p)[src * k], k, &pw[r * k]);
      }
      clus_terms.push_back(kl_sum(pw, out.q));
      frames += out.valid.size();
    }
  }
  auto add_all = [](const std::vector<Var>& xs) {
    Var s = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) s = ops::add(s, xs[i]);
    return s;
  };
  if (!(count > 0.0)) throw std::invalid_argument("train_step: batch has no valid frames");
  Var rec = ops::scale(add_all(rec_terms), 1.0 / count);
  Var loss = rec;
  StepLosses losses;
  losses.reconstruction = rec.value().item();
  if (p) {
    Var clus = ops::scale(add_all(clus_terms), 1.0 / static_cast<double>(frames));
    losses.clustering = clus.value().item();
    loss = total_loss(rec, clus, config.lambda);
  }
  losses.total = loss.value().item();
  if (!std::isfinite(losses.total)) throw DivergenceError("loss became non-finite", 0);

  const auto grads = params.gradients(tape.backward(loss));
  try {
    sgd_momentum_step(model.parameters(), grads, opt, config.eta, config.mu);
  } catch (const NonFiniteError& e) {
    throw DivergenceError(e.what(), 0);
  }
  return losses;
}

std::string TrainingLog::text() const {
  std::string out;
  std::size_t r = 0;
  for (const auto& s : steps) {
    while (r < refreshes.size() && refreshes[r].step < s.step) out += refresh_line(refreshes[r++]) + "\n";
    out += step_line(s) + "\n";
  }
  while (r < refreshes.size()) out += refresh_line(refreshes[r++]) + "\n";
  if (!stop_reason.empty()) out += "stop reason=" + stop_reason + "\n";
  return out;
}

ClusterState assign_clusters(const Model& model, const SequenceTensor& seq) {
  ClusterState s;
  s.centroids = model.parameters().value(model.centroid_param());
  const Tensor E = embed_frames(model, seq);
  s.q = soft_assign(Var(E), Var(s.centroids), model.config().alpha).value();
  s.p = target_distribution(s.q);
  s.labels = hard_labels(s.q);
  return s;
}

namespace {

/// Moves the centroid of every empty cluster onto the embedding farthest from
/// its nearest centroid. Returns the clusters that moved.
std::vector<std::size_t> reseed_empty(Tensor& centroids, const Tensor& E,
                                      std::span<const std::size_t> labels) {
  const std::size_t k = centroids.dim(0), d = centroids.dim(1), T = E.dim(0);
  std::vector<std::size_t> counts(k, 0);
  for (auto l : labels) ++counts[l];
  std::vector<std::size_t> moved;
  std::vector<std::uint8_t> used(T, 0);
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c]) continue;
    std::size_t far = T;
    double far_d = -1.0;
    for (std::size_t i = 0; i < T; ++i) {
      if (used[i]) continue;
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < d; ++e) {
          const double diff = E[i * d + e] - centroids[j * d + e];
          s += diff * diff;
        }
        nearest = std::min(nearest, s);
      }
      if (nearest > far_d) {
        far_d = nearest;
        far = i;
      }
    }
    if (far == T) break;
    used[far] = 1;
    std::copy_n(&E[far * d], d, &centroids[c * d]);
    moved.push_back(c);
  }
  return moved;
}

}  // namespace

TrainResult train(Model& model, const SequenceTensor& seq, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  const std::size_t k = model.config().n_clusters;
  if (seq.source_frames < k)
    throw std::invalid_argument("train: " + std::to_string(seq.source_frames) + " frames for " +
                                std::to_string(k) + " clusters");
  if (seq.window_length != model.config().window_length)
    throw std::invalid_argument("train: sequence window length differs from the model configuration");

  TrainResult result;
  auto& log = result.log;
  OptimizerState opt = OptimizerState::zeros_like(model.parameters());
  Rng rng(config.seed);
  std::vector<std::size_t> order(seq.windows());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(config.batch_size, order.size());
  std::vector<std::size_t> picked(batch);
  auto next_batch = [&]() -> std::span<const std::size_t> {
    for (auto& w : picked) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      w = order[cursor++];
    }
    return picked;
  };
  auto emit = [&](const std::string& line) {
    if (hooks.log_stream) *hooks.log_stream << line << '\n';
  };
  std::uint64_t step = 0;
  auto maybe_checkpoint = [&] {
    if (hooks.checkpoint && config.checkpoint_every && step % config.checkpoint_every == 0)
      hooks.checkpoint(model, step);
  };
  auto run_step = [&](const Tensor* p) {
    ++step;
    StepRecord rec;
    rec.step = step;
    rec.joint = p != nullptr;
    try {
      rec.losses = train_step(model, opt, seq, next_batch(), p, config);
    } catch (const DivergenceError& e) {
      emit(fmt::format("step={} phase=diverged reason={}", step, e.what()));
      if (hooks.checkpoint) hooks.checkpoint(model, step - 1);
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    log.steps.push_back(rec);
    emit(step_line(rec));
    maybe_checkpoint();
  };

  for (std::size_t i = 0; i < config.pretrain_steps; ++i) run_step(nullptr);

  // Centroids from k-means on the warmed-up encoder's embeddings.
  {
    const Tensor E = embed_frames(model, seq);
    auto km = init_centroids(E, k, config.seed);
    model.parameters().value(model.centroid_param()) = km.centroids;
    if (km.duplicate_centroids) emit(fmt::format("step={} phase=init warning=duplicate_centroids", step));
  }
  auto& state = result.clusters;
  state = assign_clusters(model, seq);
  log.refreshes.push_back({step, std::nullopt, state.labels, {}});
  emit(refresh_line(log.refreshes.back()));

  std::size_t streak = 0;
  log.stop_reason = "max_iters";
  for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
    run_step(&state.p);
    if (iter % config.update_interval != 0) continue;

    const Tensor E = embed_frames(model, seq);
    Tensor& C = model.parameters().value(model.centroid_param());
    Tensor q = soft_assign(Var(E), Var(C), model.config().alpha).value();
    auto labels = hard_labels(q);
    auto moved = reseed_empty(C, E, labels);
    if (!moved.empty()) {
      q = soft_assign(Var(E), Var(C), model.config().alpha).value();
      labels = hard_labels(q);
    }
    const double delta = label_change_fraction(state.labels, labels);
    state.centroids = C;
    state.q = std::move(q);
    state.p = target_distribution(state.q);
    state.labels = std::move(labels);
    state.delta_history.push_back(delta);
    log.refreshes.push_back({step, delta, state.labels, std::move(moved)});
    emit(refresh_line(log.refreshes.back()));
    streak = delta < config.tol ? streak + 1 : 0;
    if (streak >= config.patience) {
      log.stop_reason = "converged";
      result.converged = true;
      break;
    }
  }
  // Final assignments reflect the parameters as they stand at exit.
  {
    auto final_state = assign_clusters(model, seq);
    final_state.delta_history = std::move(state.delta_history);
    state = std::move(final_state);
  }
  emit("stop reason=" + log.stop_reason);
  result.steps = step;
  if (hooks.checkpoint) hooks.checkpoint(model, step);
  return result;
}

}  // namespace btgat
