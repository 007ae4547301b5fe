#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wscl/buffer.hpp"
#include "wscl/errors.hpp"
#include "wscl/losses.hpp"
#include "wscl/network.hpp"
#include "wscl/optimizer.hpp"
#include "wscl/random.hpp"
#include "wscl/stream.hpp"

namespace wscl {

enum class Method { sgd, joint, er, pseudo_er, cic, ccic };

inline Method parse_method(const std::string& s) {
  if (s == "sgd") return Method::sgd;
  if (s == "joint") return Method::joint;
  if (s == "er") return Method::er;
  if (s == "pseudo_er") return Method::pseudo_er;
  if (s == "cic") return Method::cic;
  if (s == "ccic") return Method::ccic;
  throw ConfigError("unknown method '" + s + "'");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::sgd: return "sgd";
    case Method::joint: return "joint";
    case Method::er: return "er";
    case Method::pseudo_er: return "pseudo_er";
    case Method::cic: return "cic";
    case Method::ccic: return "ccic";
  }
  return "?";
}

inline bool uses_buffer(Method m) { return m == Method::er || m == Method::pseudo_er || m == Method::cic || m == Method::ccic; }

// Where L_UM draws its negatives from.
enum class MiningVariant {
  across_task,    // buffer items of earlier tasks
  within_task,    // other items of the current task in the batch
  task_agnostic,  // anything in the buffer or the current batch
};

inline MiningVariant parse_mining(const std::string& s) {
  if (s == "across_task" || s == "across") return MiningVariant::across_task;
  if (s == "within_task" || s == "within") return MiningVariant::within_task;
  if (s == "task_agnostic" || s == "agnostic") return MiningVariant::task_agnostic;
  throw ConfigError("unknown mining variant '" + s + "'");
}

inline std::string to_string(MiningVariant v) {
  switch (v) {
    case MiningVariant::across_task: return "across_task";
    case MiningVariant::within_task: return "within_task";
    case MiningVariant::task_agnostic: return "task_agnostic";
  }
  return "?";
}

// Component switches for the CCIC knockouts. All on by default.
struct Components {
  bool knn = true;
  bool sharpen = true;
  bool unsup_loss = true;
  bool mixup = true;
  bool unsup_mining = true;
  bool sup_mining = true;
};

struct LearnerConfig {
  Method method = Method::er;
  std::size_t buffer_size = 200;
  std::size_t replay_batch = 32;
  double learning_rate = 0.1;
  std::optional<OptimizerKind> optimizer;  // default: adam for CCIC, sgd otherwise

  double lambda = 1.0;  // L_U weight
  double mu = 1.0;      // L_UM weight
  double alpha = 1.0;   // L_UM margin
  double beta = 1.0;    // L_SM margin
  double tau = 0.5;     // sharpening temperature
  double gamma = 0.75;  // mixUp Beta(gamma, gamma)
  double eta = 0.5;     // PseudoER logit-gap threshold
  std::size_t augmentations = 2;  // K
  std::size_t knn_k = 5;

  bool augment = true;
  AugmentOptions augment_options;
  MiningVariant mining = MiningVariant::across_task;
  EmbeddingSource embedding = EmbeddingSource::logits;
  Components use;

  OptimizerKind optimizer_kind() const {
    return optimizer.value_or(method == Method::ccic ? OptimizerKind::adam : OptimizerKind::sgd);
  }

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
    if (augmentations == 0) throw ConfigError("K (augmentations) must be >= 1");
    if (knn_k == 0) throw ConfigError("knn k must be >= 1");
    if (uses_buffer(method) && buffer_size == 0) throw ConfigError("replay methods need a buffer size > 0");
  }
};

// One training strategy bound to one network, buffer and random stream.
class Learner {
 public:
  Learner(Network net, LearnerConfig cfg, std::uint64_t seed)
      : net_(std::move(net)), cfg_(std::move(cfg)), rng_(seed), buffer_(uses_buffer(cfg_.method) ? cfg_.buffer_size : 0) {
    cfg_.validate();
    net_.set_embedding(cfg_.embedding);
    data_shape_ = net_.input_shape();
    opt_.kind = cfg_.optimizer_kind();
    opt_.learning_rate = cfg_.learning_rate;
  }

  const LearnerConfig& config() const { return cfg_; }
  Network& network() { return net_; }
  const Network& network() const { return net_; }
  const ReservoirBuffer& buffer() const { return buffer_; }
  int current_task() const { return task_; }
  const std::vector<int>& current_classes() const { return task_classes_; }

  void begin_task(int task_id, std::vector<int> classes) {
    task_ = task_id;
    task_classes_ = std::move(classes);
    seen_classes_.insert(task_classes_.begin(), task_classes_.end());
  }

  // Called once training on the current task is over.
  void end_task() {
    if (cfg_.method == Method::ccic && cfg_.use.knn && !buffer_.empty()) knn_ = knn_fit(buffer_, net_);
  }

  LossBreakdown step(const Batch& b) {
    if (b.labeled.rows() > 0)
      data_shape_ = b.labeled.row_shape();
    else if (b.unlabeled.rows() > 0)
      data_shape_ = b.unlabeled.row_shape();
    switch (cfg_.method) {
      case Method::sgd:
      case Method::joint: return step_sgd_finetune(b);
      case Method::er: return step_er(b);
      case Method::pseudo_er: return step_pseudo_er(b);
      case Method::cic: return step_cic(b);
      case Method::ccic: return step_ccic(b);
    }
    throw ConfigError("unhandled method");
  }

  // Cross-entropy on the labeled part of the batch only.
  LossBreakdown step_sgd_finetune(const Batch& b) {
    return supervised_update(maybe_augment(b.labeled), b.labels);
  }

  // Cross-entropy on stream labels plus a replayed minibatch; unlabeled
  // items are dropped.
  LossBreakdown step_er(const Batch& b) {
    Tensor x = b.labeled;
    std::vector<int> y = b.labels;
    append_replay(x, y);
    auto out = supervised_update(maybe_augment(x), y);
    store_labeled(b);
    return out;
  }

  // ER where confident unlabeled items join the labeled set with their
  // predicted class. Confidence is the gap between the two largest logits
  // among the current task's classes.
  LossBreakdown step_pseudo_er(const Batch& b) {
    if (task_classes_.size() < 2) throw ConfigError("PseudoER needs at least two classes per task");
    Tensor x = b.labeled;
    std::vector<int> y = b.labels;
    Tensor accepted;
    std::vector<int> pseudo;
    if (b.unlabeled.rows() > 0) {
      const Tensor logits = net_.infer(b.unlabeled).logits;
      std::vector<std::vector<double>> rows;
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto [label, gap] = top2_gap(logits.row(i));
        if (gap > cfg_.eta) {
          auto r = b.unlabeled.row(i);
          rows.emplace_back(r.begin(), r.end());
          pseudo.push_back(label);
        }
      }
      accepted = Tensor::from_rows(rows, data_shape_);
    }
    x.append_rows(accepted);
    y.insert(y.end(), pseudo.begin(), pseudo.end());
    append_replay(x, y);
    auto out = supervised_update(maybe_augment(x), y);
    store_labeled(b);
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
      auto r = accepted.row(i);
      buffer_.try_insert({std::vector<double>(r.begin(), r.end()), pseudo[i], task_}, rng_);
    }
    return out;
  }

  LossBreakdown step_cic(const Batch& b) { return interpolation_step(b, false); }
  LossBreakdown step_ccic(const Batch& b) { return interpolation_step(b, true); }

  // Class-IL prediction: kNN over the buffer for CCIC, otherwise argmax of
  // the logits over every class seen so far.
  std::vector<int> predict(const Tensor& x) const {
    if (cfg_.method == Method::ccic && cfg_.use.knn) {
      if (knn_.empty()) {
        warn("CCIC prediction without a fitted kNN (empty buffer); falling back to argmax");
      } else {
        return knn_.predict(net_.infer(x).embedding, cfg_.knn_k);
      }
    }
    return argmax_seen(net_.infer(x).logits);
  }

  std::vector<int> argmax_seen(const Tensor& logits) const {
    std::vector<int> out;
    out.reserve(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      auto z = logits.row(i);
      int best = -1;
      for (std::size_t c = 0; c < z.size(); ++c) {
        if (!seen_classes_.empty() && !seen_classes_.count(static_cast<int>(c))) continue;
        if (best < 0 || z[c] > z[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
      }
      out.push_back(best);
    }
    return out;
  }

  // Most confident class of the current task and its margin over the runner-up.
  std::pair<int, double> top2_gap(std::span<const double> logits) const {
    int first = -1, second = -1;
    for (int c : task_classes_) {
      const double v = logits[static_cast<std::size_t>(c)];
      if (first < 0 || v > logits[static_cast<std::size_t>(first)]) {
        second = first;
        first = c;
      } else if (second < 0 || v > logits[static_cast<std::size_t>(second)]) {
        second = c;
      }
    }
    return {first, logits[static_cast<std::size_t>(first)] - logits[static_cast<std::size_t>(second)]};
  }

  // Everything random about one CIC/CCIC step, drawn up front: the network
  // input rows [S' ; U' ; mining rows], labels for S', frozen soft targets
  // for U', and the mining index sets.
  struct InterpolationPlan {
    Tensor inputs;
    std::vector<int> labels;
    Tensor targets;
    std::size_t n_s = 0;
    std::size_t n_u = 0;
    std::vector<NegativePair> pairs;
    std::vector<Triplet> triplets;
    bool contrastive = false;

    bool empty() const { return inputs.rows() == 0; }
  };

  InterpolationPlan plan_interpolation(const Batch& b, bool contrastive) {
    InterpolationPlan p;
    p.contrastive = contrastive;
    const Shape& shape = data_shape_;
    const std::size_t K = cfg_.augmentations;

    // Labeled pool: stream labels plus a replayed minibatch.
    Tensor xl = b.labeled;
    std::vector<int> yl = b.labels;
    ReplayBatch replay;
    if (!buffer_.empty()) replay = buffer_.sample_batch(cfg_.replay_batch, rng_, shape);
    xl.append_rows(replay.features);
    yl.insert(yl.end(), replay.labels.begin(), replay.labels.end());

    const std::size_t n_s = xl.rows();
    const std::size_t n_x = b.unlabeled.rows();
    const std::size_t n_u = n_x * K;
    p.n_s = n_s;
    p.n_u = n_u;
    p.labels = yl;
    if (n_s == 0 && n_x == 0) return p;

    const Tensor s = maybe_augment(xl);
    Tensor u(batch_shape(n_u));
    for (std::size_t i = 0; i < n_x; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const auto a = cfg_.augment ? augment(b.unlabeled.row(i), shape, cfg_.augment_options, rng_)
                                    : std::vector<double>(b.unlabeled.row(i).begin(), b.unlabeled.row(i).end());
        copy_row(u, i * K + k, a);
      }

    // Soft targets: mean logits over the K views, softmax, sharpen, repeat K.
    p.targets = Tensor(Shape{n_u, net_.num_classes()});
    if (n_u > 0) {
      const Tensor logits = net_.infer(u).logits;
      for (std::size_t i = 0; i < n_x; ++i) {
        std::vector<double> mean(net_.num_classes(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          auto z = logits.row(i * K + k);
          for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += z[c] / static_cast<double>(K);
        }
        std::vector<double> soft = softmax(mean);
        if (cfg_.use.sharpen) soft = sharpen(soft, cfg_.tau);
        for (std::size_t k = 0; k < K; ++k) copy_row(p.targets, i * K + k, soft);
      }
    }

    // W = shuffle(S ++ U); S' = mixUp(S, W[:|S|]), U' = mixUp(U, W[|S|:]).
    Tensor mixed(batch_shape(n_s + n_u));
    for (std::size_t i = 0; i < n_s; ++i) copy_row(mixed, i, s.row(i));
    for (std::size_t i = 0; i < n_u; ++i) copy_row(mixed, n_s + i, u.row(i));
    if (cfg_.use.mixup) {
      const Tensor base = mixed;
      const auto w = rng_.permutation(n_s + n_u);
      for (std::size_t i = 0; i < n_s + n_u; ++i)
        copy_row(mixed, i, mixup(base.row(i), base.row(w[i]), cfg_.gamma, rng_));
    }

    // Mining rows are appended after the interpolated rows.
    if (contrastive) append_mining_rows(b, xl, yl, replay, mixed, p.pairs, p.triplets);
    p.inputs = std::move(mixed);
    return p;
  }

  // Loss of a plan at the current parameters; targets stay frozen. Fills
  // grad (dL/dtheta) when given.
  LossBreakdown interpolation_loss(const InterpolationPlan& p, std::vector<double>* grad) {
    LossBreakdown l;
    l.lambda = cfg_.lambda;
    l.mu = cfg_.mu;
    if (p.empty()) {
      l.skipped = true;
      return l;
    }
    const auto out = net_.forward(p.inputs);
    Tensor grad_logits(out.logits.shape());

    const LossGrad ce = loss_supervised(out.logits.slice_rows(0, p.n_s), p.labels);
    l.supervised = ce.value;
    auto gl = grad_logits.values();
    std::copy(ce.grad.values().begin(), ce.grad.values().end(), gl.begin());

    if (p.n_u > 0 && cfg_.use.unsup_loss) {
      const LossGrad cons = loss_unsupervised(out.logits.slice_rows(p.n_s, p.n_s + p.n_u), p.targets);
      l.unsupervised = cons.value;
      const std::size_t off = p.n_s * net_.num_classes();
      auto cg = cons.grad.values();
      for (std::size_t j = 0; j < cg.size(); ++j) gl[off + j] += cfg_.lambda * cg[j];
    }

    Tensor grad_emb(out.embedding.shape());
    if (p.contrastive) {
      auto ge = grad_emb.values();
      if (cfg_.use.unsup_mining) {
        const LossGrad um = loss_unsup_mining(out.embedding, p.pairs, cfg_.alpha);
        l.unsup_mining = um.value;
        auto g = um.grad.values();
        for (std::size_t j = 0; j < g.size(); ++j) ge[j] += cfg_.mu * g[j];
      }
      if (cfg_.use.sup_mining) {
        const LossGrad sm = loss_sup_mining(out.embedding, p.triplets, cfg_.beta);
        l.sup_mining = sm.value;
        auto g = sm.grad.values();
        for (std::size_t j = 0; j < g.size(); ++j) ge[j] += g[j];
      }
    }
    std::vector<double> g = net_.backward(grad_logits, p.contrastive ? &grad_emb : nullptr);
    if (grad) *grad = std::move(g);
    return l;
  }

 private:
  Tensor maybe_augment(const Tensor& x) {
    if (!cfg_.augment || x.rows() == 0) return x;
    return augment_rows(x, data_shape_, cfg_.augment_options, rng_);
  }

  void append_replay(Tensor& x, std::vector<int>& y) {
    if (buffer_.empty()) return;
    ReplayBatch r = buffer_.sample_batch(cfg_.replay_batch, rng_, data_shape_);
    x.append_rows(r.features);
    y.insert(y.end(), r.labels.begin(), r.labels.end());
  }

  // Only ground-truth-labeled stream items enter the buffer.
  void store_labeled(const Batch& b) {
    for (std::size_t i = 0; i < b.labeled.rows(); ++i) {
      auto r = b.labeled.row(i);
      buffer_.try_insert({std::vector<double>(r.begin(), r.end()), b.labels[i], task_}, rng_);
    }
  }

  void apply(const std::vector<double>& grad, const LossBreakdown& l) {
    if (!std::isfinite(l.total()))
      throw NonFiniteError("non-finite loss (L_S=" + std::to_string(l.supervised) + ", L_U=" +
                           std::to_string(l.unsupervised) + ", L_SM=" + std::to_string(l.sup_mining) +
                           ", L_UM=" + std::to_string(l.unsup_mining) + ")");
    optimizer_step(opt_, net_.parameters(), grad);
  }

  LossBreakdown supervised_update(const Tensor& x, const std::vector<int>& y) {
    LossBreakdown l;
    l.lambda = cfg_.lambda;
    l.mu = cfg_.mu;
    if (x.rows() == 0) {
      l.skipped = true;
      return l;
    }
    const auto out = net_.forward(x);
    const LossGrad ce = loss_supervised(out.logits, y);
    l.supervised = ce.value;
    apply(net_.backward(ce.grad), l);
    return l;
  }

  static void copy_row(Tensor& dst, std::size_t i, std::span<const double> src) {
    std::copy(src.begin(), src.end(), dst.row(i).begin());
  }

  // CIC (and CCIC when contrastive): consistency on augmented unlabeled
  // items, asymmetric mixUp, replay, and for CCIC the two mining hinges.
  LossBreakdown interpolation_step(const Batch& b, bool contrastive) {
    const InterpolationPlan plan = plan_interpolation(b, contrastive);
    if (plan.empty()) {
      LossBreakdown l;
      l.lambda = cfg_.lambda;
      l.mu = cfg_.mu;
      l.skipped = true;
      return l;
    }
    std::vector<double> grad;
    const LossBreakdown l = interpolation_loss(plan, &grad);
    apply(grad, l);
    store_labeled(b);
    return l;
  }

  Shape batch_shape(std::size_t n) const {
    Shape s{n};
    const Shape& in = data_shape_;
    s.insert(s.end(), in.begin(), in.end());
    return s;
  }

  // Adds raw (un-augmented) anchor/positive/negative rows to `rows` and the
  // matching index pairs. Unsupervised anchors are the unlabeled stream
  // items; supervised anchors are the labeled pool (stream + replay) with
  // positives/negatives drawn from that pool and the whole buffer.
  void append_mining_rows(const Batch& b, const Tensor& xl, const std::vector<int>& yl, const ReplayBatch& replay,
                          Tensor& rows, std::vector<NegativePair>& pairs, std::vector<Triplet>& triplets) {
    std::vector<std::vector<double>> extra;
    const std::size_t base = rows.rows();
    auto push = [&](std::span<const double> r) {
      extra.emplace_back(r.begin(), r.end());
      return base + extra.size() - 1;
    };
    const auto& items = buffer_.items();

    if (cfg_.use.unsup_mining && b.unlabeled.rows() > 0) {
      // Candidate negatives as (source, index): source 0 = buffer, 1 = batch.
      std::vector<std::size_t> past;
      for (std::size_t j = 0; j < items.size(); ++j)
        if (items[j].task_id < task_) past.push_back(j);
      const std::size_t n_batch = b.labeled.rows() + b.unlabeled.rows();
      auto batch_row = [&](std::size_t j) {
        return j < b.labeled.rows() ? b.labeled.row(j) : b.unlabeled.row(j - b.labeled.rows());
      };
      for (std::size_t i = 0; i < b.unlabeled.rows(); ++i) {
        const std::size_t self = b.labeled.rows() + i;
        std::optional<std::vector<double>> neg;
        switch (cfg_.mining) {
          case MiningVariant::across_task:
            if (!past.empty()) neg = items[past[rng_.index(past.size())]].features;
            break;
          case MiningVariant::within_task:
            if (n_batch > 1) {
              std::size_t j = rng_.index(n_batch - 1);
              if (j >= self) ++j;
              auto r = batch_row(j);
              neg.emplace(r.begin(), r.end());
            }
            break;
          case MiningVariant::task_agnostic: {
            const std::size_t total = items.size() + n_batch - 1;
            if (total == 0) break;
            std::size_t j = rng_.index(total);
            if (j < items.size()) {
              neg = items[j].features;
            } else {
              j -= items.size();
              if (j >= self) ++j;
              auto r = batch_row(j);
              neg.emplace(r.begin(), r.end());
            }
            break;
          }
        }
        if (!neg) continue;
        const std::size_t a = push(b.unlabeled.row(i));
        const std::size_t n = push(*neg);
        pairs.push_back({a, n});
      }
    }

    if (cfg_.use.sup_mining && xl.rows() > 0) {
      // Pool entries: stream-labeled rows, then every buffer item. Replayed
      // anchors are buffer items, so they refer to their buffer slot.
      struct Entry {
        std::span<const double> x;
        int label;
      };
      std::vector<Entry> pool;
      for (std::size_t i = 0; i < b.labeled.rows(); ++i) pool.push_back({b.labeled.row(i), b.labels[i]});
      for (const auto& it : items) pool.push_back({it.features, it.label});
      std::map<int, std::vector<std::size_t>> by_label;
      for (std::size_t p = 0; p < pool.size(); ++p) by_label[pool[p].label].push_back(p);

      // Stream anchors are pool entries 0..n-1; replayed anchors refer to
      // their buffer slot so they are never their own positive.
      std::vector<std::size_t> anchor_entry(xl.rows());
      for (std::size_t i = 0; i < b.labeled.rows(); ++i) anchor_entry[i] = i;
      for (std::size_t i = 0; i < replay.size(); ++i) anchor_entry[b.labeled.rows() + i] = b.labeled.rows() + replay.indices[i];
      for (std::size_t i = 0; i < xl.rows(); ++i) {
        const auto& same = by_label[yl[i]];
        const std::size_t self = anchor_entry[i];
        const std::size_t n_same = same.size() - (std::find(same.begin(), same.end(), self) != same.end() ? 1 : 0);
        const std::size_t n_other = pool.size() - same.size();
        if (n_same == 0 || n_other == 0) continue;
        std::size_t pos;
        do {
          pos = same[rng_.index(same.size())];
        } while (pos == self);
        std::size_t neg = rng_.index(n_other);
        std::size_t chosen = 0;
        for (std::size_t p = 0; p < pool.size(); ++p) {
          if (pool[p].label == yl[i]) continue;
          if (neg-- == 0) {
            chosen = p;
            break;
          }
        }
        const std::size_t a = push(xl.row(i));
        const std::size_t pr = push(pool[pos].x);
        const std::size_t nr = push(pool[chosen].x);
        triplets.push_back({a, pr, nr});
      }
    }

    if (!extra.empty()) rows.append_rows(Tensor::from_rows(extra, data_shape_));
  }

  Network net_;
  LearnerConfig cfg_;
  Rng rng_;
  ReservoirBuffer buffer_;
  OptimizerState opt_;
  KnnClassifier knn_;
  Shape data_shape_;  // row shape of incoming batches; may be image-shaped for a flat network
  int task_ = 0;
  std::vector<int> task_classes_;
  std::set<int> seen_classes_;
};

}  // namespace wscl
