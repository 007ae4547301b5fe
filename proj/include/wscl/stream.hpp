#pragma once

#include <atomic>
#include <cmath>
#include <optional>
#include <vector>

#include "wscl/dataset.hpp"
#include "wscl/errors.hpp"
#include "wscl/random.hpp"
#include "wscl/tensor.hpp"

namespace wscl {

// Number of labeled examples for a class of n examples at label rate p:
// floor(p * n). The relative guard keeps products that are integers in exact
// arithmetic (5000 * 0.008) from rounding down through representation error.
inline std::size_t labeled_count(std::size_t n, double rate) {
  const double v = static_cast<double>(n) * rate;
  return static_cast<std::size_t>(std::floor(v + 1e-9 * std::max(1.0, v)));
}

// Reads of the evaluation-only ground truth are counted so tests can prove
// that no learner path touches the class of an unlabeled example.
inline std::atomic<long>& class_true_reads() {
  static std::atomic<long> reads{0};
  return reads;
}

// One stream item.
class Example {
 public:
  Example(std::vector<double> features, int class_true, std::optional<int> label, int task_id)
      : features_(std::move(features)), class_true_(class_true), label_(label), task_id_(task_id) {
    if (label_ && *label_ != class_true_) throw ConfigError("example label disagrees with its class");
  }

  const std::vector<double>& features() const { return features_; }
  const std::optional<int>& label() const { return label_; }
  bool labeled() const { return label_.has_value(); }
  int task_id() const { return task_id_; }

  int class_true_for_evaluation() const {
    class_true_reads().fetch_add(1, std::memory_order_relaxed);
    return class_true_;
  }

 private:
  std::vector<double> features_;
  int class_true_;
  std::optional<int> label_;
  int task_id_;
};

struct Task {
  int id = 0;
  std::vector<int> classes;
  std::vector<Example> examples;

  std::size_t labeled_size() const {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.labeled();
    return n;
  }
};

// What a learner sees per step: labeled rows with labels and unlabeled rows
// with nothing but features and the (known) task index.
struct Batch {
  int task_id = 0;
  Tensor labeled;            // X_s
  std::vector<int> labels;   // Y_s
  Tensor unlabeled;          // X_u

  std::size_t size() const { return labeled.rows() + unlabeled.rows(); }
  bool empty() const { return size() == 0; }
};

struct TaskStream {
  std::vector<Task> tasks;
  Shape feature_shape;
  std::size_t num_classes = 0;
  double label_rate = 1.0;
  std::size_t epochs_per_task = 1;
  std::size_t batch_size = 32;

  std::size_t num_tasks() const { return tasks.size(); }
  std::size_t feature_dim() const { return shape_volume(feature_shape); }

  int task_of_class(int c) const {
    for (const auto& t : tasks)
      for (int k : t.classes)
        if (k == c) return t.id;
    return -1;
  }
};

// Classes are assigned to tasks in consecutive groups of num_classes / T.
inline std::vector<std::vector<int>> class_partition(std::size_t num_classes, std::size_t num_tasks) {
  if (num_tasks == 0 || num_classes % num_tasks != 0)
    throw ConfigError(std::to_string(num_classes) + " classes cannot be split into " + std::to_string(num_tasks) +
                      " equal tasks");
  const std::size_t per = num_classes / num_tasks;
  std::vector<std::vector<int>> parts(num_tasks);
  for (std::size_t c = 0; c < num_classes; ++c) parts[c / per].push_back(static_cast<int>(c));
  return parts;
}

// Cuts a dataset into a class-incremental task sequence and marks exactly
// labeled_count(n_c, rate) examples of every class as labeled, chosen at
// random. The labeled/unlabeled status is fixed per example for the run.
inline TaskStream build_split(const Dataset& ds, std::size_t num_tasks, double rate, std::uint64_t seed,
                              std::size_t epochs_per_task = 1, std::size_t batch_size = 32) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("label rate must lie in (0, 1]");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  ds.validate();
  const auto parts = class_partition(ds.num_classes, num_tasks);

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(seed);
  std::vector<char> is_labeled(ds.size(), 0);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    const std::size_t k = labeled_count(idx.size(), rate);
    if (k == 0)
      throw ConfigError("label rate " + std::to_string(rate) + " leaves class " + std::to_string(c) + " (" +
                        std::to_string(idx.size()) + " examples) without labels");
    auto shuffled = idx;
    rng.shuffle(shuffled);
    for (std::size_t j = 0; j < k; ++j) is_labeled[shuffled[j]] = 1;
  }

  TaskStream s;
  s.feature_shape = ds.feature_shape;
  s.num_classes = ds.num_classes;
  s.label_rate = rate;
  s.epochs_per_task = epochs_per_task;
  s.batch_size = batch_size;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    Task task;
    task.id = static_cast<int>(t);
    task.classes = parts[t];
    for (int c : parts[t])
      for (std::size_t i : by_class[static_cast<std::size_t>(c)]) {
        auto row = ds.features.row(i);
        std::optional<int> label;
        if (is_labeled[i]) label = c;
        task.examples.emplace_back(std::vector<double>(row.begin(), row.end()), c, label, task.id);
      }
    s.tasks.push_back(std::move(task));
  }
  return s;
}

// Iterates the epochs of one task. Within an epoch items are visited once in
// a random order; the end of each epoch is signalled by an empty batch.
class BatchCursor {
 public:
  BatchCursor(const TaskStream& stream, std::size_t task, Rng rng)
      : stream_(&stream), task_(task), rng_(std::move(rng)) {
    if (task >= stream.num_tasks()) throw ConfigError("task index out of range");
    start_epoch();
  }

  Batch next_batch() {
    if (exhausted()) throw UsageError("epoch budget of task " + std::to_string(task_) + " is exhausted");
    const Task& t = stream_->tasks[task_];
    Batch b;
    b.task_id = t.id;
    if (pos_ >= order_.size()) {
      ++epoch_;
      if (!exhausted()) start_epoch();
      return b;
    }
    const std::size_t end = std::min(order_.size(), pos_ + stream_->batch_size);
    std::vector<std::vector<double>> xs, xu;
    for (; pos_ < end; ++pos_) {
      const Example& e = t.examples[order_[pos_]];
      if (e.labeled()) {
        xs.push_back(e.features());
        b.labels.push_back(*e.label());
      } else {
        xu.push_back(e.features());
      }
    }
    b.labeled = Tensor::from_rows(xs, stream_->feature_shape);
    b.unlabeled = Tensor::from_rows(xu, stream_->feature_shape);
    return b;
  }

  std::size_t epoch() const { return epoch_; }
  bool exhausted() const { return epoch_ >= stream_->epochs_per_task; }

 private:
  void start_epoch() {
    order_ = rng_.permutation(stream_->tasks[task_].examples.size());
    pos_ = 0;
  }

  const TaskStream* stream_;
  std::size_t task_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
  int crop_padding = 1;       // images: random translation in [-p, p] with zero fill
  bool horizontal_flip = false;
  double jitter_sigma = 0.1;  // flat vectors: additive Gaussian noise
};

// Translates a (C, H, W) image by (dy, dx), filling vacated pixels with 0.
// Equivalent to a crop at offset (p + dy, p + dx) of the p-padded image.
inline std::vector<double> translate(std::span<const double> x, const Shape& shape, int dy, int dx) {
  const auto c = static_cast<int>(shape[0]), h = static_cast<int>(shape[1]), w = static_cast<int>(shape[2]);
  std::vector<double> out(x.size(), 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col) {
        const int sr = r - dy, sc = col - dx;
        if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;
        out[static_cast<std::size_t>((ch * h + r) * w + col)] = x[static_cast<std::size_t>((ch * h + sr) * w + sc)];
      }
  return out;
}

inline std::vector<double> hflip(std::span<const double> x, const Shape& shape) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  std::vector<double> out(x.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col)
        out[(ch * h + r) * w + col] = x[(ch * h + r) * w + (w - 1 - col)];
  return out;
}

// Label-preserving random perturbation: crop (+ optional flip) for images,
// Gaussian jitter for flat vectors.
inline std::vector<double> augment(std::span<const double> x, const Shape& shape, const AugmentOptions& o, Rng& rng) {
  if (shape.size() == 3) {
    const int p = o.crop_padding;
    const int span = 2 * p + 1;
    const int dy = static_cast<int>(rng.index(static_cast<std::size_t>(span))) - p;
    const int dx = static_cast<int>(rng.index(static_cast<std::size_t>(span))) - p;
    auto out = translate(x, shape, dy, dx);
    if (o.horizontal_flip && rng.bernoulli(0.5)) out = hflip(out, shape);
    return out;
  }
  std::vector<double> out(x.begin(), x.end());
  if (o.jitter_sigma > 0.0)
    for (double& v : out) v += rng.normal(0.0, o.jitter_sigma);
  return out;
}

inline Tensor augment_rows(const Tensor& x, const Shape& shape, const AugmentOptions& o, Rng& rng) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto a = augment(x.row(i), shape, o, rng);
    std::copy(a.begin(), a.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace wscl
