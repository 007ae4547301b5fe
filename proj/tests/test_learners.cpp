#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "wscl/learners.hpp"
#include "wscl/runner.hpp"

using namespace wscl;

namespace {

const Method kAll[] = {Method::sgd, Method::joint, Method::er, Method::pseudo_er, Method::cic, Method::ccic};

// Single affine layer set to the identity: logits == embedding == input.
Network identity_net(std::size_t n) {
  Network net = Network::mlp(n, {}, n);
  auto th = net.parameters();
  for (std::size_t i = 0; i < n; ++i) th[i * n + i] = 1.0;
  return net;
}

Network random_net(std::uint64_t seed, std::size_t in = 4, std::size_t classes = 4) {
  Rng rng(seed);
  Network net = Network::mlp(in, {8}, classes);
  net.init(rng);
  return net;
}

Batch random_batch(Rng& rng, std::size_t n_l, std::size_t n_u, std::vector<int> classes, std::size_t dim = 4) {
  Batch b;
  b.labeled = Tensor({n_l, dim});
  b.unlabeled = Tensor({n_u, dim});
  for (double& v : b.labeled.values()) v = rng.normal();
  for (double& v : b.unlabeled.values()) v = rng.normal();
  for (std::size_t i = 0; i < n_l; ++i) b.labels.push_back(classes[rng.index(classes.size())]);
  return b;
}

LearnerConfig config_for(Method m) {
  LearnerConfig c;
  c.method = m;
  c.buffer_size = 16;
  c.replay_batch = 4;
  return c;
}

std::vector<double> params(const Learner& l) {
  auto p = l.network().parameters();
  return {p.begin(), p.end()};
}

// Two tasks of two classes; returns the learner after both.
Learner train_two_tasks(LearnerConfig cfg, std::uint64_t seed, int steps = 6) {
  Learner l(random_net(seed), std::move(cfg), seed);
  Rng data(seed + 1);
  for (int t = 0; t < 2; ++t) {
    const std::vector<int> cls{2 * t, 2 * t + 1};
    l.begin_task(t, cls);
    for (int s = 0; s < steps; ++s) l.step(random_batch(data, 3, 3, cls));
    l.end_task();
  }
  return l;
}

int brute_knn(const Tensor& emb, const std::vector<int>& labels, std::span<const double> q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < labels.size(); ++i) d.push_back({squared_distance(q, emb.row(i)), i});
  std::sort(d.begin(), d.end());
  std::map<int, std::pair<std::size_t, double>> v;
  for (std::size_t i = 0; i < k; ++i) {
    ++v[labels[d[i].second]].first;
    v[labels[d[i].second]].second += d[i].first;
  }
  auto best = v.begin();
  for (auto it = v.begin(); it != v.end(); ++it)
    if (it->second.first > best->second.first ||
        (it->second.first == best->second.first && it->second.second < best->second.second))
      best = it;
  return best->first;
}

}  // namespace

TEST(Learner, ZeroLearningRateLeavesParametersUnchanged) {
  for (Method m : kAll) {
    LearnerConfig cfg = config_for(m);
    cfg.learning_rate = 0.0;
    Learner l(random_net(1), cfg, 2);
    const auto before = params(l);
    Rng data(3);
    for (int t = 0; t < 2; ++t) {
      l.begin_task(t, {2 * t, 2 * t + 1});
      for (int s = 0; s < 4; ++s) l.step(random_batch(data, 3, 3, {2 * t, 2 * t + 1}));
      l.end_task();
    }
    EXPECT_EQ(params(l), before) << to_string(m);
  }
}

TEST(Learner, EmptyLabeledBatchIsNoOpForSupervisedMethods) {
  for (Method m : {Method::sgd, Method::joint, Method::er, Method::pseudo_er}) {
    LearnerConfig cfg = config_for(m);
    cfg.eta = std::numeric_limits<double>::infinity();
    Learner l(random_net(4), cfg, 5);
    l.begin_task(0, {0, 1});
    const auto before = params(l);
    Rng data(6);
    const auto loss = l.step(random_batch(data, 0, 5, {0, 1}));
    EXPECT_TRUE(loss.skipped) << to_string(m);
    EXPECT_EQ(loss.total(), 0.0);
    EXPECT_EQ(params(l), before) << to_string(m);
  }
}

TEST(Learner, FullySupervisedSgdIsPlainTraining) {
  LearnerConfig cfg = config_for(Method::sgd);
  cfg.augment = false;
  cfg.learning_rate = 0.05;
  Learner l(random_net(7), cfg, 8);
  Network ref = random_net(7);
  l.begin_task(0, {0, 1});
  Rng data(9);
  for (int s = 0; s < 10; ++s) {
    const Batch b = random_batch(data, 6, 0, {0, 1});
    l.step(b);
    ref.forward(b.labeled);
    const auto g = ref.backward(loss_supervised(ref.infer(b.labeled).logits, b.labels).grad);
    auto th = ref.parameters();
    for (std::size_t i = 0; i < th.size(); ++i) th[i] -= 0.05 * g[i];
  }
  const auto mine = params(l);
  const auto th = ref.parameters();
  for (std::size_t i = 0; i < th.size(); ++i) EXPECT_NEAR(mine[i], th[i], 1e-12);
}

TEST(Learner, ReplayDrawsConfiguredBatch) {
  LearnerConfig cfg = config_for(Method::er);
  cfg.buffer_size = 64;
  cfg.replay_batch = 32;
  Learner l(random_net(10), cfg, 11);
  l.begin_task(0, {0, 1});
  Rng data(12);
  std::size_t offered = 0;
  for (int s = 0; s < 20; ++s) {
    const Batch b = random_batch(data, 5, 2, {0, 1});
    offered += b.labeled.rows();
    l.step(b);
  }
  EXPECT_EQ(l.buffer().seen(), offered);
  EXPECT_EQ(l.buffer().size(), 64u);
  EXPECT_EQ(l.buffer().sample_batch(32, data, {4}).size(), 32u);
}

TEST(PseudoEr, AcceptsWideGapWithFirstClassOfTask) {
  LearnerConfig cfg = config_for(Method::pseudo_er);
  cfg.learning_rate = 0.0;
  cfg.augment = false;
  cfg.eta = 2.0;
  Learner l(identity_net(4), cfg, 1);
  l.begin_task(1, {2, 3});
  // Logits [9, 9, 4, 1]: classes outside the task are ignored.
  EXPECT_EQ(l.top2_gap(std::vector<double>{9, 9, 4, 1}), (std::pair<int, double>{2, 3.0}));
  Batch b;
  b.labeled = Tensor({0, 4});
  b.unlabeled = Tensor::from_rows({{9, 9, 4, 1}}, {4});
  l.step(b);
  ASSERT_EQ(l.buffer().size(), 1u);
  EXPECT_EQ(l.buffer().items()[0].label, 2);
  EXPECT_EQ(l.buffer().items()[0].task_id, 1);

  b.unlabeled = Tensor::from_rows({{0, 0, 3, 3}}, {4});
  for (double eta : {1e-9, 0.5, 2.0}) {
    LearnerConfig c2 = cfg;
    c2.eta = eta;
    Learner tie(identity_net(4), c2, 1);
    tie.begin_task(1, {2, 3});
    tie.step(b);
    EXPECT_EQ(tie.buffer().size(), 0u) << "eta " << eta;
  }
}

TEST(PseudoEr, NeedsTwoClasses) {
  Learner l(identity_net(2), config_for(Method::pseudo_er), 1);
  l.begin_task(0, {0});
  Batch b;
  b.labeled = Tensor::from_rows({{1, 0}}, {2});
  b.labels = {0};
  b.unlabeled = Tensor({0, 2});
  EXPECT_THROW(l.step(b), ConfigError);
}

TEST(PseudoEr, InfiniteThresholdIsEr) {
  LearnerConfig er = config_for(Method::er);
  LearnerConfig ps = config_for(Method::pseudo_er);
  ps.eta = std::numeric_limits<double>::infinity();
  const Learner a = train_two_tasks(er, 21);
  const Learner b = train_two_tasks(ps, 21);
  EXPECT_EQ(params(a), params(b));
  EXPECT_EQ(a.buffer().seen(), b.buffer().seen());
}

TEST(Cic, FullSupervisionHasNoConsistencyTerm) {
  Learner l(random_net(30), config_for(Method::cic), 31);
  Rng data(32);
  for (int t = 0; t < 2; ++t) {
    l.begin_task(t, {2 * t, 2 * t + 1});
    for (int s = 0; s < 5; ++s) {
      const auto loss = l.step(random_batch(data, 4, 0, {2 * t, 2 * t + 1}));
      EXPECT_EQ(loss.unsupervised, 0.0);
      EXPECT_GT(loss.supervised, 0.0);
    }
  }
}

TEST(Cic, KViewsShareOneTarget) {
  LearnerConfig cfg = config_for(Method::cic);
  cfg.augmentations = 3;
  Learner l(random_net(33), cfg, 34);
  l.begin_task(0, {0, 1});
  Rng data(35);
  const auto plan = l.plan_interpolation(random_batch(data, 2, 5, {0, 1}), false);
  EXPECT_EQ(plan.n_u, 15u);
  EXPECT_EQ(plan.n_s, 2u);
  EXPECT_EQ(plan.targets.rows(), 15u);
  EXPECT_EQ(plan.inputs.rows(), 17u);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 1; k < 3; ++k)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(plan.targets(i * 3 + k, c), plan.targets(i * 3, c));
}

TEST(Cic, IdentityAugmentationCollapsesToSharpenedSoftmax) {
  LearnerConfig cfg = config_for(Method::cic);
  cfg.augment = false;
  cfg.use.mixup = false;
  cfg.tau = 0.4;
  cfg.augmentations = 2;
  Learner l(random_net(36), cfg, 37);
  l.begin_task(0, {0, 1});
  Rng data(38);
  const Batch b = random_batch(data, 1, 3, {0, 1});
  const auto plan = l.plan_interpolation(b, false);
  const Tensor logits = l.network().infer(b.unlabeled).logits;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto z = logits.row(i);
    const auto expect = sharpen(softmax(std::vector<double>(z.begin(), z.end())), 0.4);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(plan.targets(i * 2 + k, c), expect[c], 1e-12);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(plan.inputs(1 + i * 2 + k, j), b.unlabeled(i, j));
    }
  }
}

TEST(Ccic, TotalIsWeightedSumOfRecomputedTerms) {
  LearnerConfig cfg = config_for(Method::ccic);
  cfg.lambda = 0.3;
  cfg.mu = 0.7;
  cfg.alpha = 4.0;
  cfg.beta = 2.0;
  Learner l = train_two_tasks(cfg, 40, 3);
  Rng data(41);
  const auto plan = l.plan_interpolation(random_batch(data, 3, 4, {2, 3}), true);
  ASSERT_FALSE(plan.pairs.empty());
  ASSERT_FALSE(plan.triplets.empty());
  const auto got = l.interpolation_loss(plan, nullptr);

  const auto out = l.network().infer(plan.inputs);
  const double ls = loss_supervised(out.logits.slice_rows(0, plan.n_s), plan.labels).value;
  const double lu = loss_unsupervised(out.logits.slice_rows(plan.n_s, plan.n_s + plan.n_u), plan.targets).value;
  const double lum = loss_unsup_mining(out.embedding, plan.pairs, 4.0).value;
  const double lsm = loss_sup_mining(out.embedding, plan.triplets, 2.0).value;
  EXPECT_NEAR(got.supervised, ls, 1e-12);
  EXPECT_NEAR(got.unsupervised, lu, 1e-12);
  EXPECT_NEAR(got.unsup_mining, lum, 1e-12);
  EXPECT_NEAR(got.sup_mining, lsm, 1e-12);
  EXPECT_NEAR(got.total(), ls + 0.3 * lu + lsm + 0.7 * lum, 1e-9);
}

TEST(Ccic, ZeroWeightsLeaveOnlySupervisedTerm) {
  LearnerConfig cfg = config_for(Method::ccic);
  cfg.lambda = cfg.mu = cfg.alpha = cfg.beta = 0.0;
  cfg.use.sup_mining = false;  // L_SM carries no weight of its own
  Learner l = train_two_tasks(cfg, 42, 3);
  Rng data(43);
  const auto loss = l.interpolation_loss(l.plan_interpolation(random_batch(data, 3, 4, {2, 3}), true), nullptr);
  EXPECT_EQ(loss.unsup_mining, 0.0);
  EXPECT_NEAR(loss.total(), loss.supervised, 1e-12);
}

TEST(Ccic, FirstTaskHasNoAcrossTaskNegatives) {
  LearnerConfig cfg = config_for(Method::ccic);
  Learner l(random_net(44), cfg, 45);
  l.begin_task(0, {0, 1});
  Rng data(46);
  for (int s = 0; s < 5; ++s) {
    const Batch b = random_batch(data, 3, 3, {0, 1});
    EXPECT_TRUE(l.plan_interpolation(b, true).pairs.empty());
    EXPECT_EQ(l.step(b).unsup_mining, 0.0);
  }
  cfg.mining = MiningVariant::within_task;
  Learner w(random_net(44), cfg, 45);
  w.begin_task(0, {0, 1});
  EXPECT_EQ(w.plan_interpolation(random_batch(data, 3, 3, {0, 1}), true).pairs.size(), 3u);
}

TEST(Ccic, MiningVariantsDrawFromTheirPools) {
  for (auto v : {MiningVariant::across_task, MiningVariant::within_task, MiningVariant::task_agnostic}) {
    LearnerConfig cfg = config_for(Method::ccic);
    cfg.mining = v;
    cfg.learning_rate = 0.0;
    Learner l = train_two_tasks(cfg, 47, 4);
    Rng data(480);
    const Batch b = random_batch(data, 2, 3, {2, 3});
    const auto plan = l.plan_interpolation(b, true);
    ASSERT_EQ(plan.pairs.size(), 3u) << to_string(v);
    for (const auto& [a, n] : plan.pairs) {
      const auto neg = plan.inputs.row(n);
      bool from_old = false, from_buffer = false, from_batch = false;
      for (const auto& it : l.buffer().items())
        if (std::equal(neg.begin(), neg.end(), it.features.begin())) {
          from_buffer = true;
          from_old = from_old || it.task_id < 1;
        }
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto r = i < 2 ? b.labeled.row(i) : b.unlabeled.row(i - 2);
        if (std::equal(neg.begin(), neg.end(), r.begin())) from_batch = true;
      }
      EXPECT_NE(a, n);
      switch (v) {
        case MiningVariant::across_task: EXPECT_TRUE(from_old && !from_batch); break;
        case MiningVariant::within_task: EXPECT_TRUE(from_batch && !from_old); break;
        case MiningVariant::task_agnostic: EXPECT_TRUE(from_batch || from_buffer); break;
      }
    }
  }
}

TEST(Learner, NeverReadsHiddenClassDuringTraining) {
  Dataset ds = make_blobs(BlobOptions{4, 3}, 40, 1, 1, 1).train;
  const TaskStream stream = build_split(ds, 2, 0.25, 3, 2, 8);
  for (Method m : kAll) {
    const long before = class_true_reads().load();
    Learner l(Network::mlp(3, {8}, 4), config_for(m), 4);
    for (const auto& task : stream.tasks) {
      l.begin_task(task.id, task.classes);
      BatchCursor cur(stream, static_cast<std::size_t>(task.id), Rng(5));
      while (!cur.exhausted()) l.step(cur.next_batch());
      l.end_task();
    }
    EXPECT_EQ(class_true_reads().load(), before) << to_string(m);
  }
}

TEST(Learner, BufferOnlyHoldsOfferedLabeledItems) {
  for (Method m : {Method::er, Method::cic, Method::ccic}) {
    const Learner l = train_two_tasks(config_for(m), 50);
    EXPECT_EQ(l.buffer().seen(), 2u * 6 * 3) << to_string(m);
    EXPECT_LE(l.buffer().size(), 16u);
  }
}

TEST(Predict, ArgmaxOverSeenClasses) {
  Learner l(identity_net(3), config_for(Method::er), 1);
  const Tensor x = Tensor::from_rows({{0.1, 2.0, -1.0}}, {3});
  EXPECT_EQ(l.predict(x), std::vector<int>{1});
  l.begin_task(0, {0, 2});
  EXPECT_EQ(l.predict(x), std::vector<int>{0});
}

TEST(Predict, CcicSingleClassBuffer) {
  LearnerConfig cfg = config_for(Method::ccic);
  cfg.learning_rate = 0.0;
  Learner l(identity_net(2), cfg, 1);
  l.begin_task(0, {0, 1});
  Batch b;
  b.labeled = Tensor::from_rows({{1, 0}, {2, 0}, {0, 5}}, {2});
  b.labels = {1, 1, 1};
  b.unlabeled = Tensor({0, 2});
  l.step(b);
  l.end_task();
  EXPECT_EQ(l.predict(Tensor::from_rows({{9, 0}, {0, 9}, {-3, -3}}, {2})), (std::vector<int>{1, 1, 1}));
}

TEST(Predict, CcicEmptyBufferFallsBackWithWarning) {
  set_warnings_enabled(false);
  Learner l(identity_net(3), config_for(Method::ccic), 1);
  l.begin_task(0, {0, 1, 2});
  l.end_task();
  const int before = warnings_emitted();
  EXPECT_EQ(l.predict(Tensor::from_rows({{0.1, 2.0, -1.0}}, {3})), std::vector<int>{1});
  EXPECT_GT(warnings_emitted(), before);
  set_warnings_enabled(true);
}

TEST(Predict, CcicMatchesBruteForceKnn) {
  LearnerConfig cfg = config_for(Method::ccic);
  cfg.buffer_size = 500;
  cfg.knn_k = 7;
  cfg.embedding = EmbeddingSource::penultimate;
  Learner l(random_net(60), cfg, 61);
  Rng data(62);
  l.begin_task(0, {0, 1, 2, 3});
  for (int s = 0; s < 100; ++s) l.step(random_batch(data, 6, 1, {0, 1, 2, 3}));
  l.end_task();
  ASSERT_EQ(l.buffer().size(), 500u);

  const ReplayBatch all = l.buffer().all({4});
  const Tensor emb = l.network().infer(all.features).embedding;
  Tensor q({100, 4});
  for (double& v : q.values()) v = data.normal();
  const auto got = l.predict(q);
  const Tensor qe = l.network().infer(q).embedding;
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(got[i], brute_knn(emb, all.labels, qe.row(i), 7));
}

TEST(Learner, ConfigValidation) {
  LearnerConfig c = config_for(Method::er);
  c.buffer_size = 0;
  EXPECT_THROW(Learner(random_net(1), c, 1), ConfigError);
  c = config_for(Method::cic);
  c.tau = 0.0;
  EXPECT_THROW(Learner(random_net(1), c, 1), ConfigError);
  EXPECT_THROW(parse_method("lwf"), ConfigError);
  EXPECT_EQ(config_for(Method::ccic).optimizer_kind(), OptimizerKind::adam);
  EXPECT_EQ(config_for(Method::cic).optimizer_kind(), OptimizerKind::sgd);
}

TEST(Learner, AblationSwitchesAllRun) {
  bool Components::*switches[] = {&Components::knn,    &Components::sharpen,      &Components::unsup_loss,
                                  &Components::mixup,  &Components::unsup_mining, &Components::sup_mining};
  for (auto sw : switches) {
    LearnerConfig cfg = config_for(Method::ccic);
    cfg.use.*sw = false;
    Learner l = train_two_tasks(cfg, 70, 3);
    Rng data(71);
    Tensor q({5, 4});
    for (double& v : q.values()) v = data.normal();
    EXPECT_EQ(l.predict(q).size(), 5u);
  }
}

TEST(Learner, SgdForgetsFirstTaskOnBlobs) {
  auto c = RunConfig::from({{"dataset", "blobs"}, {"method", "sgd"}, {"label_rate", "1"}, {"epochs", "3"},
                            {"train_per_class", "200"}, {"test_per_class", "100"}});
  const auto data = load_data(c);
  const SeedResult r = run_seed(c, data, 0);
  EXPECT_GT(r.matrix.at(0, 0), 0.9);
  EXPECT_LE(r.matrix.at(4, 0), 0.1 + 0.1);
}
