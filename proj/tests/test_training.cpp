#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "btgat/synth.hpp"
#include "btgat/training.hpp"
#include "support/grad_suite.hpp"

using namespace btgat;

namespace {

Tensor tensor(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

struct Fixture {
  SequenceTensor seq;
  ModelConfig config;
};

Fixture tiny_problem() {
  RegimeSpec spec;
  spec.n_regimes = 2;
  spec.segment_lengths = uniform_segments(12, 4);
  spec.L = 8;
  spec.W = 8;
  spec.n_vars = 1;
  spec.seed = 3;
  const auto data = minmax_normalize(generate(spec).data);
  Fixture f;
  f.config.channels = {2, 2, 3, 3};
  f.config.latent_dim = 3;
  f.config.knn_k = 2;
  f.config.bilstm_hidden = 4;
  f.config.n_clusters = 2;
  f.config.window_length = 4;
  f.seq = to_sequence_tensor(data, 4);
  return f;
}

TrainConfig quick_train() {
  TrainConfig t;
  t.eta = 1e-3;
  t.pretrain_steps = 2;
  t.update_interval = 2;
  t.max_iters = 6;
  t.batch_size = 1;
  t.seed = 5;
  return t;
}

}  // namespace

TEST(Losses, ReconstructionExamples) {
  const Tensor x = tensor({2, 2}, {0.1, 0.2, 0.3, 0.4});
  const Tensor ones({2, 2}, 1.0);
  EXPECT_EQ(reconstruction_loss(x, Var(x), ones).value()[0], 0.0);
  const Tensor shifted = tensor({2, 2}, {0.2, 0.3, 0.4, 0.5});
  EXPECT_NEAR(reconstruction_loss(x, Var(shifted), ones).value()[0], 0.01, 1e-15);

  const Tensor pred = tensor({2, 2}, {0.5, -1.0, 2.0, 0.0});
  const Tensor mask = tensor({2, 2}, {1, 0, 1, 1});
  const double hand = ((0.5 - 0.1) * (0.5 - 0.1) + (2.0 - 0.3) * (2.0 - 0.3) + 0.4 * 0.4) / 3.0;
  EXPECT_NEAR(reconstruction_loss(x, Var(pred), mask).value()[0], hand, 1e-12);
  EXPECT_THROW(reconstruction_loss(x, Var(pred), Tensor({2, 2}, 0.0)), std::invalid_argument);
}

TEST(Losses, TargetDistributionExamples) {
  const Tensor single = target_distribution(tensor({1, 2}, {0.8, 0.2}));
  EXPECT_NEAR(single[0], 0.8, 1e-15);
  EXPECT_NEAR(single[1], 0.2, 1e-15);

  const Tensor p = target_distribution(tensor({2, 2}, {0.9, 0.1, 0.6, 0.4}));
  EXPECT_NEAR(p[0], 0.54 / 0.56, 1e-12);
  EXPECT_NEAR(p[0], 0.9643, 5e-5);
  EXPECT_NEAR(p[1], 0.0357, 5e-5);

  const Tensor u = target_distribution(Tensor({3, 4}, 0.25));
  for (double v : u.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Losses, TargetDistributionSharpensAndNormalizes) {
  Rng rng(12);
  auto entropy = [](const double* row, std::size_t k) {
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (row[j] > 0) h -= row[j] * std::log(row[j]);
    return h;
  };
  for (int trial = 0; trial < 200; ++trial) {
    // Two rows that are mirror images keep both column sums equal.
    const double a = rng.uniform(0.01, 0.99);
    const Tensor q = tensor({2, 2}, {a, 1 - a, 1 - a, a});
    const Tensor p = target_distribution(q);
    for (std::size_t r = 0; r < 2; ++r) {
      EXPECT_NEAR(p[r * 2] + p[r * 2 + 1], 1.0, 1e-9);
      EXPECT_LE(entropy(&p[r * 2], 2), entropy(&q[r * 2], 2) + 1e-12);
    }
    const Tensor wide = suite::random_tensor({5, 3}, rng, 0.01, 1.0);
    Tensor norm = wide;
    for (std::size_t r = 0; r < 5; ++r) {
      const double s = wide[r * 3] + wide[r * 3 + 1] + wide[r * 3 + 2];
      for (std::size_t j = 0; j < 3; ++j) norm[r * 3 + j] /= s;
    }
    const Tensor pw = target_distribution(norm);
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(pw[r * 3] + pw[r * 3 + 1] + pw[r * 3 + 2], 1.0, 1e-9);
  }
}

TEST(Losses, KlExamplesAndGibbs) {
  const Tensor q = tensor({1, 2}, {0.5, 0.5});
  EXPECT_NEAR(clustering_loss(tensor({1, 2}, {1, 0}), q), std::log(2.0), 1e-15);
  EXPECT_NEAR(clustering_loss(tensor({1, 2}, {1, 0}), Var(q)).value()[0], std::log(2.0), 1e-15);
  EXPECT_EQ(clustering_loss(q, q), 0.0);

  Rng rng(31);
  for (int i = 0; i < 1000; ++i) {
    Tensor p({1, 3}), r({1, 3});
    double sp = 0, sr = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      p[j] = rng.uniform(0.0, 1.0);
      r[j] = rng.uniform(1e-6, 1.0);
      sp += p[j];
      sr += r[j];
    }
    for (std::size_t j = 0; j < 3; ++j) {
      p[j] /= sp;
      r[j] /= sr;
    }
    EXPECT_GE(clustering_loss(p, r), 0.0);
    EXPECT_LE(std::abs(clustering_loss(p, p)), 1e-12);
  }
}

TEST(Losses, KlClampsZeroQ) {
  const double v = clustering_loss(tensor({1, 2}, {1, 0}), tensor({1, 2}, {0, 1}));
  EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
}

TEST(Losses, TotalExamples) {
  EXPECT_NEAR(total_loss(0.5, 0.2, 1.0), 0.7, 1e-15);
  EXPECT_EQ(total_loss(0.3, 0.0, 5.0), 0.3);
  EXPECT_NEAR(total_loss(1.0, 2.0, 0.1), 1.2, 1e-15);
  EXPECT_THROW(total_loss(1.0, 2.0, 0.0), std::invalid_argument);
}

TEST(Optimizer, MomentumUnroll) {
  ParameterSet ps;
  ps.add("theta", Tensor({1}, 0.0));
  auto opt = OptimizerState::zeros_like(ps);
  const std::vector<Tensor> g{Tensor({1}, 1.0)};
  sgd_momentum_step(ps, g, opt, 0.1, 0.9);
  EXPECT_NEAR(ps.value(0)[0], -0.1, 1e-15);
  sgd_momentum_step(ps, g, opt, 0.1, 0.9);
  EXPECT_NEAR(ps.value(0)[0], -0.29, 1e-15);
}

TEST(Optimizer, PlainSgdAndDecay) {
  ParameterSet ps;
  ps.add("w", tensor({2}, {1.0, -2.0}));
  auto opt = OptimizerState::zeros_like(ps);
  sgd_momentum_step(ps, std::vector<Tensor>{tensor({2}, {0.5, 1.0})}, opt, 0.2, 0.0);
  EXPECT_NEAR(ps.value(0)[0], 0.9, 1e-15);
  EXPECT_NEAR(ps.value(0)[1], -2.2, 1e-15);

  opt.velocity[0] = tensor({2}, {1.0, -1.0});
  const std::vector<Tensor> zero{Tensor({2}, 0.0)};
  for (int i = 1; i <= 3; ++i) {
    sgd_momentum_step(ps, zero, opt, 0.2, 0.5);
    EXPECT_NEAR(opt.velocity[0][0], std::pow(0.5, i), 1e-15);
  }
}

TEST(Optimizer, NonFiniteGradientLeavesParameters) {
  ParameterSet ps;
  ps.add("a", Tensor({1}, 1.0));
  ps.add("b", Tensor({1}, 2.0));
  auto opt = OptimizerState::zeros_like(ps);
  const std::vector<Tensor> g{Tensor({1}, 1.0), Tensor({1}, std::nan(""))};
  try {
    sgd_momentum_step(ps, g, opt, 0.1, 0.9);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(ps.value(0)[0], 1.0);
  EXPECT_EQ(opt.velocity[0][0], 0.0);
}

TEST(CentroidInit, Examples) {
  const Tensor E = tensor({4, 1}, {0, 0.1, 10, 10.1});
  auto r = init_centroids(E, 2, 0);
  std::vector<double> c{r.centroids[0], r.centroids[1]};
  std::sort(c.begin(), c.end());
  EXPECT_NEAR(c[0], 0.05, 1e-12);
  EXPECT_NEAR(c[1], 10.05, 1e-12);

  const Tensor one = init_centroids(tensor({3, 2}, {1, 2, 3, 4, 5, 9}), 1, 0).centroids;
  EXPECT_NEAR(one[0], 3.0, 1e-12);
  EXPECT_NEAR(one[1], 5.0, 1e-12);
}

TEST(CentroidInit, PermutationInvariant) {
  Rng rng(44);
  const Tensor E = suite::random_tensor({30, 2}, rng, -5, 5);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 29; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor shuffled({30, 2});
  for (std::size_t i = 0; i < 30; ++i) {
    shuffled[i * 2] = E[perm[i] * 2];
    shuffled[i * 2 + 1] = E[perm[i] * 2 + 1];
  }
  const auto a = init_centroids(E, 3, 9);
  const auto b = init_centroids(shuffled, 3, 9);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.inertia, b.inertia);
}

TEST(Refresh, LabelsAndDelta) {
  EXPECT_EQ(hard_labels(tensor({3, 3}, {0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.1, 0.1, 0.8})),
            (std::vector<std::size_t>{1, 0, 2}));
  const std::vector<std::size_t> before{0, 1, 2, 1}, after{0, 1, 1, 1};
  EXPECT_EQ(label_change_fraction(before, after), 0.25);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.mu = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.tol = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.update_interval = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainStep, VanishingLambdaMatchesReconstructionOnly) {
  const auto f = tiny_problem();
  Model a(f.config, {8, 8, 1}, 7);
  Model b = a;
  const Tensor p = assign_clusters(a, f.seq).p;
  TrainConfig cfg = quick_train();
  cfg.lambda = 1e-300;
  auto oa = OptimizerState::zeros_like(a.parameters());
  auto ob = OptimizerState::zeros_like(b.parameters());
  const std::vector<std::size_t> windows{0, 2};
  train_step(a, oa, f.seq, windows, nullptr, cfg);
  train_step(b, ob, f.seq, windows, &p, cfg);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (i == a.centroid_param()) continue;
    const auto& x = a.parameters().value(i);
    const auto& y = b.parameters().value(i);
    for (std::size_t j = 0; j < x.size(); ++j) ASSERT_NEAR(x[j], y[j], 1e-12) << a.parameters().name(i);
  }
}

TEST(Train, DegenerateToleranceStopsAfterPatience) {
  const auto f = tiny_problem();
  Model m(f.config, {8, 8, 1}, 3);
  TrainConfig cfg = quick_train();
  cfg.tol = 1.0;
  cfg.patience = 2;
  cfg.max_iters = 50;
  std::ostringstream lines;
  std::vector<std::uint64_t> checkpoints;
  TrainHooks hooks;
  hooks.log_stream = &lines;
  hooks.checkpoint = [&](const Model&, std::uint64_t s) { checkpoints.push_back(s); };
  const auto r = train(m, f.seq, cfg, hooks);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.log.stop_reason, "converged");
  EXPECT_EQ(r.steps, cfg.pretrain_steps + 2 * cfg.update_interval);
  ASSERT_EQ(r.log.refreshes.size(), 3u);
  EXPECT_FALSE(r.log.refreshes[0].delta.has_value());
  EXPECT_EQ(r.clusters.labels.size(), 12u);
  EXPECT_EQ(r.clusters.delta_history.size(), 2u);
  EXPECT_EQ(checkpoints, (std::vector<std::uint64_t>{r.steps}));
  EXPECT_EQ(lines.str(), r.log.text());
  EXPECT_NE(lines.str().find("stop reason=converged"), std::string::npos);
}

TEST(Train, DeltaHistoryMatchesLabelSnapshots) {
  const auto f = tiny_problem();
  Model m(f.config, {8, 8, 1}, 4);
  TrainConfig cfg = quick_train();
  cfg.tol = 1e-9;
  const auto r = train(m, f.seq, cfg);
  EXPECT_EQ(r.log.stop_reason, "max_iters");
  EXPECT_EQ(r.steps, cfg.pretrain_steps + cfg.max_iters);
  const auto& refreshes = r.log.refreshes;
  ASSERT_EQ(refreshes.size(), 1 + cfg.max_iters / cfg.update_interval);
  for (std::size_t i = 1; i < refreshes.size(); ++i) {
    std::size_t changed = 0;
    for (std::size_t t = 0; t < 12; ++t) changed += refreshes[i].labels[t] != refreshes[i - 1].labels[t];
    EXPECT_EQ(*refreshes[i].delta, static_cast<double>(changed) / 12.0);
  }
}

TEST(Train, ReproducibleAndPeriodicCheckpoints) {
  const auto f = tiny_problem();
  TrainConfig cfg = quick_train();
  cfg.checkpoint_every = 3;
  std::vector<std::string> first, second;
  for (auto* sink : {&first, &second}) {
    Model m(f.config, {8, 8, 1}, 11);
    TrainHooks hooks;
    hooks.checkpoint = [&](const Model& model, std::uint64_t s) { sink->push_back(serialize_checkpoint(model, s)); };
    train(m, f.seq, cfg, hooks);
  }
  EXPECT_EQ(first.size(), 3u);  // steps 3, 6, and the final step 8
  EXPECT_EQ(first, second);
}

TEST(Train, DivergenceAbortsWithLastGoodCheckpoint) {
  const auto f = tiny_problem();
  Model m(f.config, {8, 8, 1}, 2);
  TrainConfig cfg = quick_train();
  cfg.eta = 1e150;
  cfg.pretrain_steps = 20;
  std::vector<std::uint64_t> saved;
  TrainHooks hooks;
  hooks.checkpoint = [&](const Model&, std::uint64_t s) { saved.push_back(s); };
  try {
    train(m, f.seq, cfg, hooks);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    ASSERT_EQ(saved.size(), 1u);
    EXPECT_EQ(saved[0], e.step() - 1);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) EXPECT_TRUE(m.parameters().value(i).all_finite());
  }
}

TEST(Train, RejectsMismatchedWindowAndTooFewFrames) {
  auto f = tiny_problem();
  Model m(f.config, {8, 8, 1}, 1);
  const auto wrong = to_sequence_tensor(unflatten_2d(Tensor({12, 64}, 0.5), 8, 8, 1), 3);
  EXPECT_THROW(train(m, wrong, quick_train()), std::invalid_argument);
}
