#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wscl/dataset.hpp"
#include "wscl/errors.hpp"
#include "wscl/network.hpp"
#include "wscl/random.hpp"
#include "wscl/tensor.hpp"

namespace wscl {

struct BufferItem {
  std::vector<double> features;
  int label = 0;  // ground-truth or pseudo-label
  int task_id = 0;
};

struct ReplayBatch {
  Tensor features;
  std::vector<int> labels;
  std::vector<int> task_ids;
  std::vector<std::size_t> indices;  // buffer slots the rows came from

  std::size_t size() const { return labels.size(); }
};

// Fixed-capacity replay memory filled by reservoir sampling (Vitter's
// algorithm R): after n insertion attempts every offered item is resident
// with probability min(1, m/n).
class ReservoirBuffer {
 public:
  explicit ReservoirBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  bool try_insert(BufferItem item, Rng& rng) {
    ++seen_;
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
      return true;
    }
    if (capacity_ == 0) return false;
    const std::size_t j = rng.index(seen_);
    if (j >= capacity_) return false;
    items_[j] = std::move(item);
    return true;
  }

  // k items drawn uniformly: without replacement when k <= size, with
  // replacement otherwise. An empty buffer yields an empty batch.
  ReplayBatch sample_batch(std::size_t k, Rng& rng, const Shape& feature_shape) const {
    std::vector<std::size_t> picks;
    if (!items_.empty() && k > 0) {
      if (k > items_.size()) {
        for (std::size_t i = 0; i < k; ++i) picks.push_back(rng.index(items_.size()));
      } else {
        std::vector<std::size_t> idx(items_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
        picks.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
      }
    }
    return gather(picks, feature_shape);
  }

  ReplayBatch gather(const std::vector<std::size_t>& picks, const Shape& feature_shape) const {
    ReplayBatch b;
    std::vector<std::vector<double>> rows;
    for (std::size_t i : picks) {
      rows.push_back(items_[i].features);
      b.labels.push_back(items_[i].label);
      b.task_ids.push_back(items_[i].task_id);
    }
    b.indices = picks;
    b.features = Tensor::from_rows(rows, feature_shape);
    return b;
  }

  ReplayBatch all(const Shape& feature_shape) const {
    std::vector<std::size_t> picks(items_.size());
    for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    return gather(picks, feature_shape);
  }

  const std::vector<BufferItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t seen() const { return seen_; }

  // Container file with a task_id column (see dataset.hpp for the layout).
  void save(const std::string& path, std::size_t num_classes) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    ContainerRows rows;
    rows.num_classes = num_classes;
    rows.feature_dims = items_.empty() ? 0 : items_.front().features.size();
    std::vector<std::vector<double>> feats;
    for (const auto& it : items_) {
      feats.push_back(it.features);
      rows.labels.push_back(it.label);
      rows.task_ids.push_back(it.task_id);
    }
    rows.features = Tensor::from_rows(feats, {rows.feature_dims});
    if (has_suffix(path, ".csv"))
      write_container_csv(os, rows);
    else
      write_container(os, rows);
  }

  // Restores the resident items only; the attempt counter is set to size().
  static ReservoirBuffer load(const std::string& path, std::size_t capacity) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    ContainerRows rows = has_suffix(path, ".csv") ? read_container_csv(is) : read_container(is);
    if (rows.labels.size() > capacity) throw ConfigError("buffer file holds more items than capacity");
    ReservoirBuffer buf(capacity);
    for (std::size_t i = 0; i < rows.labels.size(); ++i) {
      auto r = rows.features.row(i);
      buf.items_.push_back({std::vector<double>(r.begin(), r.end()), rows.labels[i],
                            rows.task_ids.empty() ? 0 : rows.task_ids[i]});
    }
    buf.seen_ = buf.items_.size();
    return buf;
  }

 private:
  std::size_t capacity_;
  std::vector<BufferItem> items_;
  std::size_t seen_ = 0;
};

// k-nearest-neighbour vote in embedding space (squared Euclidean distance).
// Neighbours are the k smallest (distance, index) pairs; the vote goes to the
// most frequent label, then the smallest summed distance, then the lowest id.
class KnnClassifier {
 public:
  KnnClassifier() = default;
  KnnClassifier(Tensor embeddings, std::vector<int> labels) : emb_(std::move(embeddings)), labels_(std::move(labels)) {
    if (emb_.rows() != labels_.size()) throw ConfigError("knn: embedding/label count mismatch");
  }

  bool empty() const { return labels_.empty(); }
  std::size_t size() const { return labels_.size(); }

  int predict_one(std::span<const double> query, std::size_t k) const {
    if (labels_.empty()) throw ConfigError("knn: no stored items");
    if (k == 0) throw ConfigError("knn: k must be positive");
    if (k > labels_.size()) {
      warn("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(labels_.size()) + " stored items; clamping");
      k = labels_.size();
    }
    std::vector<std::pair<double, std::size_t>> d(labels_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) d[i] = {squared_distance(query, emb_.row(i)), i};
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    struct Vote {
      std::size_t count = 0;
      double dist = 0.0;
    };
    std::map<int, Vote> votes;
    for (std::size_t i = 0; i < k; ++i) {
      auto& v = votes[labels_[d[i].second]];
      ++v.count;
      v.dist += d[i].first;
    }
    int best = votes.begin()->first;
    Vote bv = votes.begin()->second;
    for (const auto& [label, v] : votes)
      if (v.count > bv.count || (v.count == bv.count && v.dist < bv.dist)) {
        best = label;
        bv = v;
      }
    return best;
  }

  std::vector<int> predict(const Tensor& queries, std::size_t k) const {
    if (k > labels_.size() && !labels_.empty()) {
      warn("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(labels_.size()) + " stored items; clamping");
      k = labels_.size();
    }
    std::vector<int> out;
    out.reserve(queries.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) out.push_back(predict_one(queries.row(i), k));
    return out;
  }

 private:
  Tensor emb_;
  std::vector<int> labels_;
};

// Embeds the buffer with the network and classifies query inputs by kNN.
inline KnnClassifier knn_fit(const ReservoirBuffer& buf, const Network& net) {
  if (buf.empty()) throw ConfigError("knn: buffer is empty");
  const ReplayBatch all = buf.all(net.input_shape());
  return KnnClassifier(net.infer(all.features).embedding, all.labels);
}

inline std::vector<int> knn_fit_and_predict(const ReservoirBuffer& buf, const Network& net, const Tensor& queries,
                                            std::size_t k) {
  return knn_fit(buf, net).predict(net.infer(queries).embedding, k);
}

}  // namespace wscl
