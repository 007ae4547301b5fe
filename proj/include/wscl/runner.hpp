#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "wscl/buffer.hpp"
#include "wscl/config.hpp"
#include "wscl/dataset.hpp"
#include "wscl/learners.hpp"
#include "wscl/metrics.hpp"
#include "wscl/network.hpp"
#include "wscl/stream.hpp"

namespace wscl {

// Every recognised configuration key with its default. Desk-scale defaults:
// 5 tasks x 2 classes, 500 train / 200 test examples per class, 10 epochs
// per task, batch and replay minibatch of 32.
inline const KeyValues& default_config() {
  static const KeyValues defaults = {
      // data
      {"dataset", "blobs"},  // blobs | digits | file
      {"dataset_path", ""},
      {"test_path", ""},
      {"feature_shape", ""},  // e.g. 1x8x8 for image files
      {"num_classes", "10"},
      {"blob_dim", "16"},
      {"blob_modes", "1"},
      {"blob_separation", "3"},
      {"blob_mode_spread", "1"},
      {"blob_noise", "1"},
      {"digit_noise", "0.15"},
      {"digit_dropout", "0.1"},
      {"digit_shift", "1"},
      {"train_per_class", "500"},
      {"test_per_class", "200"},
      {"data_seed", "7"},
      // protocol
      {"tasks", "5"},
      {"label_rate", "0.25"},
      {"epochs", "10"},
      {"batch_size", "32"},
      {"seeds", "0,1,2,3,4"},
      {"validation", "false"},
      {"out", ""},
      {"log_losses", "true"},
      {"save_buffer", "true"},
      // model
      {"arch", "mlp"},  // mlp | conv
      {"hidden", "64,64"},
      {"conv_channels", "8"},
      {"embedding", "logits"},  // logits | penultimate
      // learner
      {"method", "er"},
      {"buffer_size", "200"},
      {"replay_batch", "32"},
      {"lr", "auto"},  // auto: 0.1 with sgd, 0.001 with adam
      {"optimizer", "auto"},  // auto | sgd | adam
      {"lambda", "1"},
      {"mu", "1"},
      {"alpha", "1"},
      {"beta", "1"},
      {"tau", "0.5"},
      {"gamma", "0.75"},
      {"eta", "0.5"},
      {"K", "2"},
      {"knn_k", "5"},
      {"augment", "true"},
      {"crop_padding", "1"},
      {"flip", "false"},
      {"jitter_sigma", "0.1"},
      {"mining", "across_task"},
      {"use_knn", "true"},
      {"use_sharpen", "true"},
      {"use_unsup_loss", "true"},
      {"use_mixup", "true"},
      {"use_unsup_mining", "true"},
      {"use_sup_mining", "true"},
  };
  return defaults;
}

// Keys that describe where and how often to run, not what is run.
inline bool is_run_control_key(const std::string& k) { return k == "out" || k == "seeds" || k == "log_losses" || k == "save_buffer"; }

inline bool is_dataset_key(const std::string& k) {
  static const std::vector<std::string> prefixes = {"dataset", "test_path", "feature_shape", "num_classes", "blob_",
                                                    "digit_", "train_per_class", "test_per_class", "data_seed"};
  return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return k.rfind(p, 0) == 0; });
}

struct RunConfig {
  KeyValues values;

  std::string dataset;
  std::size_t tasks = 5;
  double label_rate = 0.25;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  std::uint64_t data_seed = 7;
  bool validation = false;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  bool log_losses = true;
  bool save_buffer = true;
  std::string arch = "mlp";
  std::vector<std::size_t> hidden;
  std::size_t conv_channels = 8;
  LearnerConfig learner;

  const std::string& get(const std::string& k) const { return values.at(k); }

  // All keys except run-control ones, sorted: the identity of the config.
  std::string canonical() const {
    KeyValues kv;
    for (const auto& [k, v] : values)
      if (!is_run_control_key(k)) kv[k] = v;
    return format_key_values(kv);
  }
  std::string hash() const { return hex64(fnv1a(canonical())); }

  std::string dataset_identity() const {
    std::string s;
    for (const auto& [k, v] : values)
      if (is_dataset_key(k)) s += k + "=" + v + ";";
    return s + "tasks=" + get("tasks");
  }

  static RunConfig from(const KeyValues& overrides) {
    RunConfig c;
    c.values = default_config();
    for (const auto& [k, v] : overrides) {
      if (!c.values.count(k)) throw ConfigError("unknown config key '" + k + "'");
      c.values[k] = v;
    }
    const auto& kv = c.values;
    auto num = [&](const char* k) { return to_double(k, kv.at(k)); };
    auto sz = [&](const char* k) { return to_size(k, kv.at(k)); };
    auto flag = [&](const char* k) { return to_bool(k, kv.at(k)); };

    c.dataset = kv.at("dataset");
    if (c.dataset != "blobs" && c.dataset != "digits" && c.dataset != "file")
      throw ConfigError("unknown dataset '" + c.dataset + "'");
    c.tasks = sz("tasks");
    c.label_rate = num("label_rate");
    if (!(c.label_rate > 0.0 && c.label_rate <= 1.0)) throw ConfigError("label_rate must lie in (0, 1]");
    c.epochs = sz("epochs");
    c.batch_size = sz("batch_size");
    c.train_per_class = sz("train_per_class");
    c.test_per_class = sz("test_per_class");
    c.data_seed = sz("data_seed");
    c.validation = flag("validation");
    for (std::size_t s : to_size_list("seeds", kv.at("seeds"))) c.seeds.push_back(s);
    if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    c.out_dir = kv.at("out");
    c.log_losses = flag("log_losses");
    c.save_buffer = flag("save_buffer");
    c.arch = kv.at("arch");
    if (c.arch != "mlp" && c.arch != "conv") throw ConfigError("unknown arch '" + c.arch + "'");
    c.hidden = to_size_list("hidden", kv.at("hidden"));
    c.conv_channels = sz("conv_channels");

    LearnerConfig& l = c.learner;
    l.method = parse_method(kv.at("method"));
    l.buffer_size = sz("buffer_size");
    l.replay_batch = sz("replay_batch");
    if (kv.at("optimizer") != "auto") l.optimizer = parse_optimizer(kv.at("optimizer"));
    if (kv.at("lr") == "auto")
      l.learning_rate = l.optimizer_kind() == OptimizerKind::adam ? 1e-3 : 0.1;
    else
      l.learning_rate = num("lr");
    l.lambda = num("lambda");
    l.mu = num("mu");
    l.alpha = num("alpha");
    l.beta = num("beta");
    l.tau = num("tau");
    l.gamma = num("gamma");
    l.eta = num("eta");
    l.augmentations = sz("K");
    l.knn_k = sz("knn_k");
    l.augment = flag("augment");
    l.augment_options.crop_padding = static_cast<int>(sz("crop_padding"));
    l.augment_options.horizontal_flip = flag("flip");
    l.augment_options.jitter_sigma = num("jitter_sigma");
    l.mining = parse_mining(kv.at("mining"));
    const std::string emb = kv.at("embedding");
    if (emb == "logits")
      l.embedding = EmbeddingSource::logits;
    else if (emb == "penultimate")
      l.embedding = EmbeddingSource::penultimate;
    else
      throw ConfigError("unknown embedding '" + emb + "'");
    l.use.knn = flag("use_knn");
    l.use.sharpen = flag("use_sharpen");
    l.use.unsup_loss = flag("use_unsup_loss");
    l.use.mixup = flag("use_mixup");
    l.use.unsup_mining = flag("use_unsup_mining");
    l.use.sup_mining = flag("use_sup_mining");
    l.validate();
    return c;
  }
};

inline RunConfig load_run_config(const std::string& path) { return RunConfig::from(read_key_values(path)); }

inline Shape parse_shape(const std::string& s) {
  Shape out;
  for (const auto& p : split(s, 'x')) out.push_back(to_size("feature_shape", p));
  return out;
}

// Train/evaluation data for a config. With validation on, 10% of each
// training class is held out and replaces the test split; the test split is
// then never loaded.
inline DatasetPair load_data(const RunConfig& c) {
  DatasetPair d;
  if (c.dataset == "blobs") {
    BlobOptions o;
    o.num_classes = to_size("num_classes", c.get("num_classes"));
    o.dim = to_size("blob_dim", c.get("blob_dim"));
    o.modes_per_class = to_size("blob_modes", c.get("blob_modes"));
    o.separation = to_double("blob_separation", c.get("blob_separation"));
    o.mode_spread = to_double("blob_mode_spread", c.get("blob_mode_spread"));
    o.noise = to_double("blob_noise", c.get("blob_noise"));
    d = make_blobs(o, c.train_per_class, c.test_per_class, c.data_seed, c.data_seed + 1);
  } else if (c.dataset == "digits") {
    DigitOptions o;
    o.noise = to_double("digit_noise", c.get("digit_noise"));
    o.dropout = to_double("digit_dropout", c.get("digit_dropout"));
    o.max_shift = static_cast<int>(to_size("digit_shift", c.get("digit_shift")));
    d = make_digits(o, c.train_per_class, c.test_per_class, c.data_seed);
  } else {
    const Shape shape = c.get("feature_shape").empty() ? Shape{} : parse_shape(c.get("feature_shape"));
    if (c.get("dataset_path").empty()) throw ConfigError("dataset=file needs dataset_path");
    d.train = load_dataset(c.get("dataset_path"), shape);
    if (!c.validation) {
      if (c.get("test_path").empty()) throw ConfigError("dataset=file needs test_path");
      d.test = load_dataset(c.get("test_path"), shape);
    }
  }
  if (!c.validation) return d;

  Rng rng(c.data_seed ^ 0x5eed5eedull);
  std::vector<std::vector<std::size_t>> by_class(d.train.num_classes);
  for (std::size_t i = 0; i < d.train.size(); ++i) by_class[static_cast<std::size_t>(d.train.labels[i])].push_back(i);
  std::vector<char> held(d.train.size(), 0);
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    const std::size_t n_val = std::max<std::size_t>(1, idx.size() / 10);
    for (std::size_t j = 0; j < n_val && j < idx.size(); ++j) held[idx[j]] = 1;
  }
  DatasetPair out;
  for (Dataset* ds : {&out.train, &out.test}) {
    ds->feature_shape = d.train.feature_shape;
    ds->num_classes = d.train.num_classes;
  }
  std::vector<std::vector<double>> tr, va;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    auto r = d.train.features.row(i);
    (held[i] ? va : tr).emplace_back(r.begin(), r.end());
    (held[i] ? out.test.labels : out.train.labels).push_back(d.train.labels[i]);
  }
  out.train.features = Tensor::from_rows(tr, d.train.feature_shape);
  out.test.features = Tensor::from_rows(va, d.train.feature_shape);
  return out;
}

inline Network make_network(const RunConfig& c, const Shape& feature_shape, std::size_t num_classes) {
  if (c.arch == "conv") {
    if (feature_shape.size() != 3) throw ConfigError("arch=conv needs image-shaped (C,H,W) features");
    return Network::conv(feature_shape[0], feature_shape[1], feature_shape[2], c.conv_channels, c.hidden, num_classes,
                         c.learner.embedding);
  }
  return Network::mlp(shape_volume(feature_shape), c.hidden, num_classes, c.learner.embedding);
}

struct StepLog {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown loss;
};

struct SeedResult {
  std::uint64_t seed = 0;
  MetricsMatrix matrix;
  std::vector<StepLog> losses;
  ReservoirBuffer buffer;
  std::size_t num_classes = 0;

  double final_accuracy() const { return wscl::final_accuracy(matrix); }
  double forgetting() const { return matrix.num_tasks() >= 2 ? wscl::forgetting(matrix) : 0.0; }
};

namespace detail {
struct TaskTestSet {
  Tensor x;
  std::vector<int> y;
};

inline std::vector<TaskTestSet> split_test_by_task(const Dataset& test, const std::vector<std::vector<int>>& parts) {
  std::vector<TaskTestSet> out(parts.size());
  std::vector<int> task_of(test.num_classes, -1);
  for (std::size_t t = 0; t < parts.size(); ++t)
    for (int c : parts[t]) task_of[static_cast<std::size_t>(c)] = static_cast<int>(t);
  std::vector<std::vector<std::vector<double>>> rows(parts.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto t = static_cast<std::size_t>(task_of[static_cast<std::size_t>(test.labels[i])]);
    auto r = test.features.row(i);
    rows[t].emplace_back(r.begin(), r.end());
    out[t].y.push_back(test.labels[i]);
  }
  for (std::size_t t = 0; t < parts.size(); ++t) out[t].x = Tensor::from_rows(rows[t], test.feature_shape);
  return out;
}

inline double accuracy(const Learner& learner, const TaskTestSet& set) {
  if (set.y.empty()) return 0.0;
  const auto pred = learner.predict(set.x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == set.y[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}
}  // namespace detail

// Trains one seed of a config on already-loaded data and fills the accuracy
// matrix after every task.
inline SeedResult run_seed(const RunConfig& c, const DatasetPair& data, std::uint64_t seed) {
  Rng master(seed * 0x9E3779B97F4A7C15ull + 0x1234567ull);
  const std::uint64_t split_seed = master.engine()();
  Rng init_rng = master.fork();
  const std::uint64_t learner_seed = master.engine()();
  Rng order_rng = master.fork();

  const bool joint = c.learner.method == Method::joint;
  const TaskStream stream = build_split(data.train, c.tasks, joint ? 1.0 : c.label_rate, split_seed, c.epochs,
                                        c.batch_size);
  const auto parts = class_partition(data.train.num_classes, c.tasks);
  const auto test_sets = detail::split_test_by_task(data.test, parts);

  Network net = make_network(c, data.train.feature_shape, data.train.num_classes);
  net.init(init_rng);
  Learner learner(std::move(net), c.learner, learner_seed);

  SeedResult r;
  r.seed = seed;
  r.matrix = MetricsMatrix(c.tasks);
  r.num_classes = data.train.num_classes;

  auto train_task = [&](const TaskStream& s, std::size_t t, std::size_t log_task) {
    learner.begin_task(s.tasks[t].id, s.tasks[t].classes);
    BatchCursor cursor(s, t, order_rng.fork());
    std::size_t step = 0;
    while (!cursor.exhausted()) {
      const std::size_t epoch = cursor.epoch();
      const Batch b = cursor.next_batch();
      if (b.empty()) continue;
      const LossBreakdown l = learner.step(b);
      if (c.log_losses) r.losses.push_back({log_task, epoch, step, l});
      ++step;
    }
    learner.end_task();
  };

  if (joint) {
    // Upper bound: one task holding every class and every label.
    TaskStream all = stream;
    Task merged;
    merged.id = 0;
    for (auto& t : all.tasks) {
      merged.classes.insert(merged.classes.end(), t.classes.begin(), t.classes.end());
      for (auto& e : t.examples) merged.examples.push_back(e);
    }
    all.tasks = {merged};
    train_task(all, 0, 0);
    std::vector<double> acc;
    for (std::size_t i = 0; i < c.tasks; ++i) acc.push_back(detail::accuracy(learner, test_sets[i]));
    for (std::size_t k = 0; k < c.tasks; ++k) r.matrix.record_eval(k, std::vector<double>(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(k + 1)));
  } else {
    for (std::size_t t = 0; t < c.tasks; ++t) {
      train_task(stream, t, t);
      std::vector<double> acc;
      for (std::size_t i = 0; i <= t; ++i) acc.push_back(detail::accuracy(learner, test_sets[i]));
      r.matrix.record_eval(t, std::move(acc));
    }
  }
  r.buffer = learner.buffer();
  return r;
}

inline void write_losses_csv(std::ostream& os, const std::vector<StepLog>& log) {
  os << "task,epoch,step,L_S,L_U,L_SM,L_UM,total\n";
  for (const auto& s : log)
    os << s.task << ',' << s.epoch << ',' << s.step << ',' << format_real(s.loss.supervised) << ','
       << format_real(s.loss.unsupervised) << ',' << format_real(s.loss.sup_mining) << ','
       << format_real(s.loss.unsup_mining) << ',' << format_real(s.loss.total()) << '\n';
}

struct RunRecord {
  std::string config_hash;
  std::string method;
  std::size_t buffer_size = 0;
  double label_rate = 0.0;
  std::string dataset;
  std::size_t tasks = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_accuracies;
  std::vector<double> forgettings;
  double wall_seconds = 0.0;

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  // Sample standard deviation (n - 1); 0 for a single seed.
  static double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  double af_mean() const { return mean(final_accuracies); }
  double af_std() const { return stddev(final_accuracies); }
  double f_mean() const { return mean(forgettings); }
  double f_std() const { return stddev(forgettings); }
};

inline void write_record(std::ostream& os, const RunRecord& r) {
  auto join = [](const auto& v, auto fmt) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
  };
  auto real = [](double x) { return format_real(x); };
  auto integer = [](std::uint64_t x) { return std::to_string(x); };
  os << "config_hash=" << r.config_hash << '\n'
     << "method=" << r.method << '\n'
     << "buffer_size=" << r.buffer_size << '\n'
     << "label_rate=" << format_real(r.label_rate) << '\n'
     << "dataset=" << r.dataset << '\n'
     << "tasks=" << r.tasks << '\n'
     << "seeds=" << join(r.seeds, integer) << '\n'
     << "final_accuracy=" << join(r.final_accuracies, real) << '\n'
     << "forgetting=" << join(r.forgettings, real) << '\n'
     << "af_mean=" << format_real(r.af_mean()) << '\n'
     << "af_std=" << format_real(r.af_std()) << '\n'
     << "f_mean=" << format_real(r.f_mean()) << '\n'
     << "f_std=" << format_real(r.f_std()) << '\n'
     << "wall_seconds=" << format_real(r.wall_seconds) << '\n';
}

inline RunRecord read_record(const std::string& path) {
  const KeyValues kv = read_key_values(path);
  auto at = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw IoError(path + ": missing '" + k + "'");
    return it->second;
  };
  RunRecord r;
  r.config_hash = at("config_hash");
  r.method = at("method");
  r.buffer_size = to_size("buffer_size", at("buffer_size"));
  r.label_rate = to_double("label_rate", at("label_rate"));
  r.dataset = at("dataset");
  r.tasks = to_size("tasks", at("tasks"));
  for (auto s : to_size_list("seeds", at("seeds"))) r.seeds.push_back(s);
  for (const auto& s : split(at("final_accuracy"), ',')) r.final_accuracies.push_back(to_double("final_accuracy", s));
  for (const auto& s : split(at("forgetting"), ',')) r.forgettings.push_back(to_double("forgetting", s));
  r.wall_seconds = to_double("wall_seconds", at("wall_seconds"));
  return r;
}

inline std::size_t worker_count() {
  if (const char* env = std::getenv("WSCL_WORKERS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; nothing else is shared.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline void write_file(const std::filesystem::path& p, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  body(os);
  if (!os) throw IoError("write failed for " + p.string());
}

// Runs every seed of a config. When the config names an output directory,
// writes per seed metrics.csv, losses.csv and buffer.bin under seed_<s>/ and
// a record.txt summary at the top.
inline RunRecord run(const RunConfig& c, std::vector<SeedResult>* results_out = nullptr) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  if (!c.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(c.out_dir, ec);
    if (ec || !fs::is_directory(c.out_dir)) throw IoError("cannot create output directory " + c.out_dir);
  }
  const DatasetPair data = load_data(c);
  std::vector<SeedResult> results(c.seeds.size());
  parallel_for(c.seeds.size(), worker_count(), [&](std::size_t i) { results[i] = run_seed(c, data, c.seeds[i]); });

  RunRecord rec;
  rec.config_hash = c.hash();
  rec.method = c.get("method");
  rec.buffer_size = uses_buffer(c.learner.method) ? c.learner.buffer_size : 0;
  rec.label_rate = c.learner.method == Method::joint ? 1.0 : c.label_rate;
  rec.dataset = c.dataset_identity();
  rec.tasks = c.tasks;
  rec.seeds = c.seeds;
  for (const auto& r : results) {
    rec.final_accuracies.push_back(r.final_accuracy());
    rec.forgettings.push_back(r.forgetting());
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!c.out_dir.empty()) {
    const fs::path root(c.out_dir);
    write_file(root / "config.cfg", [&](std::ostream& os) { os << format_key_values(c.values); });
    for (const auto& r : results) {
      const fs::path dir = root / ("seed_" + std::to_string(r.seed));
      fs::create_directories(dir);
      write_file(dir / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r.matrix); });
      if (c.log_losses) write_file(dir / "losses.csv", [&](std::ostream& os) { write_losses_csv(os, r.losses); });
      if (c.save_buffer && uses_buffer(c.learner.method)) r.buffer.save((dir / "buffer.bin").string(), r.num_classes);
    }
    write_file(root / "record.txt", [&](std::ostream& os) { write_record(os, rec); });
  }
  if (results_out) *results_out = std::move(results);
  return rec;
}

// ---------------------------------------------------------------------------
// Grid search

using Grid = std::map<std::string, std::vector<std::string>>;

inline Grid read_grid(const std::string& path) {
  Grid g;
  for (const auto& [k, v] : read_key_values(path)) g[k] = split(v, ',');
  return g;
}

// Cartesian product in key order, last key varying fastest.
inline std::vector<KeyValues> grid_points(const Grid& grid) {
  std::vector<KeyValues> points{{}};
  for (const auto& [k, values] : grid) {
    if (values.empty()) throw ConfigError("grid key '" + k + "' has no values");
    std::vector<KeyValues> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        KeyValues q = p;
        q[k] = v;
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  return points;
}

struct GridResult {
  std::vector<KeyValues> points;
  std::vector<RunRecord> records;
  std::size_t best = 0;
  KeyValues best_config;  // base overrides + winning point
};

// Picks the point with the highest validation A_f; ties go to lower
// forgetting, then to the lexicographically smaller point.
inline std::size_t select_best(const std::vector<KeyValues>& points, const std::vector<RunRecord>& records) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& a = records[i];
    const auto& b = records[best];
    if (a.af_mean() != b.af_mean()) {
      if (a.af_mean() > b.af_mean()) best = i;
    } else if (a.f_mean() != b.f_mean()) {
      if (a.f_mean() < b.f_mean()) best = i;
    } else if (format_key_values(points[i]) < format_key_values(points[best])) {
      best = i;
    }
  }
  return best;
}

inline GridResult grid_search(const KeyValues& base, const Grid& grid, const std::string& out_dir = "") {
  if (grid.empty()) throw ConfigError("grid search needs a non-empty grid");
  namespace fs = std::filesystem;
  GridResult g;
  g.points = grid_points(grid);
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    KeyValues kv = base;
    for (const auto& [k, v] : g.points[i]) kv[k] = v;
    kv["validation"] = "true";
    kv["out"] = out_dir.empty() ? "" : (fs::path(out_dir) / ("point_" + std::to_string(i))).string();
    g.records.push_back(run(RunConfig::from(kv)));
  }
  g.best = select_best(g.points, g.records);
  g.best_config = base;
  for (const auto& [k, v] : g.points[g.best]) g.best_config[k] = v;
  g.best_config.erase("out");
  g.best_config.erase("validation");

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "grid.csv", [&](std::ostream& os) {
      os << "point,config,af_mean,af_std,f_mean,f_std\n";
      for (std::size_t i = 0; i < g.points.size(); ++i) {
        std::string desc;
        for (const auto& [k, v] : g.points[i]) desc += (desc.empty() ? "" : ";") + k + "=" + v;
        os << i << ',' << desc << ',' << format_real(g.records[i].af_mean()) << ','
           << format_real(g.records[i].af_std()) << ',' << format_real(g.records[i].f_mean()) << ','
           << format_real(g.records[i].f_std()) << '\n';
      }
    });
    write_file(fs::path(out_dir) / "best.cfg", [&](std::ostream& os) { os << format_key_values(g.best_config); });
  }
  return g;
}

// ---------------------------------------------------------------------------
// Report

struct ComparisonTable {
  std::vector<std::string> row_labels;  // method[_buffer]
  std::vector<double> label_rates;      // ascending
  // cells[row][col]; missing cells are absent.
  std::vector<std::vector<std::optional<std::pair<double, double>>>> cells;

  void write_csv(std::ostream& os) const {
    os << "method";
    for (double r : label_rates) os << ",rate_" << format_real(r);
    os << '\n';
    for (std::size_t i = 0; i < row_labels.size(); ++i) {
      os << row_labels[i];
      for (const auto& c : cells[i]) {
        os << ',';
        if (c) os << format_real(c->first) << " +- " << format_real(c->second);
      }
      os << '\n';
    }
  }

  // Percentages with two decimals, columns padded to a common width.
  void write_text(std::ostream& os) const {
    auto pct = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
      return std::string(buf);
    };
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> head{"Method"};
    for (double r : label_rates) head.push_back(pct(r) + "%");
    grid.push_back(head);
    for (std::size_t i = 0; i < row_labels.size(); ++i) {
      std::vector<std::string> line{row_labels[i]};
      for (const auto& c : cells[i]) line.push_back(c ? pct(c->first) + " +- " + pct(c->second) : "-");
      grid.push_back(line);
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& line : grid)
      for (std::size_t j = 0; j < line.size(); ++j) width[j] = std::max(width[j], line[j].size());
    for (const auto& line : grid) {
      for (std::size_t j = 0; j < line.size(); ++j) {
        if (j) os << "  ";
        os << (j == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[j])) << line[j];
      }
      os << '\n';
    }
  }
};

// Rows are method x buffer (methods in canonical order), columns label rates.
inline ComparisonTable report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ConfigError("report: no records");
  for (const auto& r : records)
    if (r.dataset != records.front().dataset || r.tasks != records.front().tasks)
      throw ConfigError("report: records come from different datasets or task counts");

  static const std::vector<std::string> order = {"sgd", "joint", "er", "pseudo_er", "cic", "ccic"};
  auto rank = [&](const std::string& m) {
    return static_cast<std::size_t>(std::find(order.begin(), order.end(), m) - order.begin());
  };
  std::vector<std::pair<std::string, std::size_t>> rows;
  std::vector<double> rates;
  for (const auto& r : records) {
    if (std::find(rows.begin(), rows.end(), std::make_pair(r.method, r.buffer_size)) == rows.end())
      rows.emplace_back(r.method, r.buffer_size);
    if (std::find(rates.begin(), rates.end(), r.label_rate) == rates.end()) rates.push_back(r.label_rate);
  }
  std::sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) {
    return std::make_tuple(a.second != 0, a.second, rank(a.first), a.first) <
           std::make_tuple(b.second != 0, b.second, rank(b.first), b.first);
  });
  std::sort(rates.begin(), rates.end());

  ComparisonTable t;
  t.label_rates = rates;
  for (const auto& [m, buf] : rows) {
    t.row_labels.push_back(buf ? m + "_" + std::to_string(buf) : m);
    std::vector<std::optional<std::pair<double, double>>> line(rates.size());
    for (const auto& r : records)
      if (r.method == m && r.buffer_size == buf) {
        const auto col = static_cast<std::size_t>(std::find(rates.begin(), rates.end(), r.label_rate) - rates.begin());
        line[col] = std::make_pair(r.af_mean(), r.af_std());
      }
    t.cells.push_back(std::move(line));
  }
  return t;
}

// Collects every record.txt below `dir` in sorted path order.
inline std::vector<RunRecord> collect_records(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "record.txt") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<RunRecord> out;
  for (const auto& p : paths) out.push_back(read_record(p.string()));
  return out;
}

}  // namespace wscl
