// Acceptance run: one PASS/FAIL line per criterion. Criteria 7-11 train the
// frozen benchmark configs in configs/ on the test split with seeds 0-4.
//
//   acceptance [CONFIG_DIR]
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "grad_sweeps.hpp"
#include "wscl/wscl.hpp"

using namespace wscl;
namespace fs = std::filesystem;

#ifndef WSCL_CONFIG_DIR
#define WSCL_CONFIG_DIR "configs"
#endif

namespace {

int failures = 0;

void verdict(int id, bool pass, const std::string& what) {
  std::printf("[%s] %2d  %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  failures += !pass;
}

void detail(const std::string& s) {
  std::printf("          %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 -------------------------------------------------------------------------

void split_arithmetic() {
  struct Row {
    std::size_t n, at[4];
  };
  const double rates[4] = {0.008, 0.05, 0.25, 1.0};
  const Row svhn[10] = {{4948, {39, 247, 1237, 4948}},  {13861, {110, 693, 3465, 13861}},
                        {10585, {84, 529, 2646, 10585}}, {8497, {67, 424, 2124, 8497}},
                        {7458, {59, 372, 1864, 7458}},   {6882, {55, 344, 1720, 6882}},
                        {5727, {45, 286, 1431, 5727}},   {5595, {44, 279, 1398, 5595}},
                        {5045, {40, 252, 1261, 5045}},   {4659, {37, 232, 1164, 4659}}};
  Dataset ds;
  ds.feature_shape = {1};
  ds.num_classes = 10;
  std::vector<std::vector<double>> rows;
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t i = 0; i < svhn[c].n; ++i) {
      rows.push_back({static_cast<double>(i)});
      ds.labels.push_back(static_cast<int>(c));
    }
  ds.features = Tensor::from_rows(rows, {1});
  int exact = 0;
  for (int k = 0; k < 4; ++k) {
    const TaskStream s = build_split(ds, 5, rates[k], 1);
    std::vector<std::size_t> got(10, 0);
    for (const auto& t : s.tasks)
      for (const auto& e : t.examples)
        if (e.labeled()) ++got[static_cast<std::size_t>(*e.label())];
    for (std::size_t c = 0; c < 10; ++c) {
      if (got[c] == svhn[c].at[k]) {
        ++exact;
      } else {
        detail(fmt("class %zu rate %g: got %zu, table %zu", c, rates[k], got[c], svhn[c].at[k]));
      }
    }
  }
  verdict(1, exact == 40, fmt("split arithmetic: %d/40 SVHN cells exact (tolerance: exact)", exact));
}

// 2 -------------------------------------------------------------------------

void gradient_suite() {
  bool ok = true;
  double worst = 0.0;
  for (const auto& r : sweeps::all()) {
    detail(fmt("%-22s points %d  checked %zu  kink-skipped %zu  worst rel err %.2e", r.name.c_str(), r.points, r.checked,
               r.skipped, r.worst));
    ok = ok && r.ok();
    worst = std::max(worst, r.worst);
  }
  verdict(2, ok, fmt("gradient suite: worst relative error %.2e over >=100 points per loss (eps 1e-5, tol 1e-4)", worst));
}

// 3 -------------------------------------------------------------------------

void loss_oracles() {
  std::vector<std::pair<std::string, bool>> cases;
  auto near = [&](const std::string& what, double got, double want, double tol) {
    cases.push_back({what + fmt(" = %.10g (want %.10g)", got, want), std::abs(got - want) <= tol});
  };
  const auto s = sharpen(std::vector<double>{0.25, 0.75}, 0.5);
  near("sharpen([.25,.75],.5)[0]", s[0], 0.1, 1e-9);
  near("sharpen([.25,.75],.5)[1]", s[1], 0.9, 1e-9);
  const auto m = mixup(std::vector<double>{2, 0}, std::vector<double>{0, 2}, 0.3);
  near("mixup zeta=.3 [0]", m[0], 1.4, 1e-9);
  near("mixup zeta=.3 [1]", m[1], 0.6, 1e-9);
  near("CE([.25,.75], 1)", cross_entropy(std::vector<double>{0.25, 0.75}, 1), 0.28768, 1e-5);
  auto lu = [](std::vector<double> h, std::vector<double> z) {
    return loss_unsupervised(Tensor::from_rows({h}, {2}), Tensor::from_rows({z}, {2})).value;
  };
  near("L_U diff [.5,-.5]", lu({0.5, -0.5}, {0, 0}), 0.5, 1e-9);
  near("L_U z=[1,0] h=[0,1]", lu({0, 1}, {1, 0}), 2.0, 1e-9);
  near("L_UM alpha=1 D=.5", unsup_mining_term(1.0, 0.5), 0.5, 1e-9);
  near("L_UM D=alpha", unsup_mining_term(1.0, 1.0), 0.0, 1e-9);
  near("L_UM D=0", unsup_mining_term(1.0, 0.0), 1.0, 1e-9);
  near("L_SM beta=1 DN=.3 DP=.5", sup_mining_term(1.0, 0.3, 0.5), 1.2, 1e-9);
  near("L_SM DN=DP", sup_mining_term(0.7, 0.4, 0.4), 0.7, 1e-9);
  near("L_SM DN-DP>=beta", sup_mining_term(1.0, 2.5, 0.5), 0.0, 1e-9);
  bool ok = true;
  for (const auto& [what, pass] : cases) {
    if (!pass) detail("mismatch: " + what);
    ok = ok && pass;
  }
  verdict(3, ok, fmt("loss oracles: %zu hand cases (sharpen/mixup/L_U/hinges 1e-9, CE 1e-5)", cases.size()));
}

// 4 -------------------------------------------------------------------------

void reservoir_uniformity() {
  const std::size_t n = 10000, m = 100;
  const int trials = 1000;
  Rng rng(2024);
  std::vector<int> resident(n, 0);
  bool capacity_ok = true;
  for (int t = 0; t < trials; ++t) {
    ReservoirBuffer buf(m);
    for (std::size_t i = 0; i < n; ++i) {
      buf.try_insert({{static_cast<double>(i)}, 0, 0}, rng);
      capacity_ok = capacity_ok && buf.size() <= m;
    }
    for (const auto& it : buf.items()) ++resident[static_cast<std::size_t>(it.features[0])];
  }
  // Per-item count ~ Binomial(trials, m/n). With 10^4 items some counts fall
  // outside 3 sigma by chance; compare that share with its exact expectation.
  const double p = static_cast<double>(m) / n;
  const double sigma = std::sqrt(p * (1 - p) / trials);
  double expected_outside = 0.0;
  for (int k = 0; k <= trials; ++k) {
    const double lp = std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) +
                      k * std::log(p) + (trials - k) * std::log1p(-p);
    if (std::abs(static_cast<double>(k) / trials - p) > 3 * sigma) expected_outside += std::exp(lp);
  }
  std::size_t outside = 0;
  double max_z = 0.0;
  for (int r : resident) {
    const double z = std::abs(static_cast<double>(r) / trials - p) / sigma;
    outside += z > 3.0;
    max_z = std::max(max_z, z);
  }
  const double share = static_cast<double>(outside) / n;
  detail(fmt("items outside 3 sigma: %zu of %zu (binomial expectation %.1f); max |z| %.2f", outside, n,
             expected_outside * n, max_z));
  verdict(4, capacity_ok && share <= 2 * expected_outside && max_z <= 6.0,
          fmt("reservoir uniformity: n=%zu m=%zu x%d trials; capacity never exceeded: %s; share outside 3 sigma "
              "<= 2x binomial expectation, max |z| <= 6",
              n, m, trials, capacity_ok ? "yes" : "NO"));
}

// 5 -------------------------------------------------------------------------

void knn_oracle() {
  Rng rng(77);
  std::size_t agree = 0, total = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const auto emb = rng.index(2) ? EmbeddingSource::logits : EmbeddingSource::penultimate;
    Network net = Network::mlp(6, {8}, 5, emb);
    net.init(rng);
    const std::size_t size = 1 + rng.index(500);
    ReservoirBuffer buf(size);
    for (std::size_t i = 0; i < size; ++i) {
      std::vector<double> x(6);
      for (double& v : x) v = rng.normal();
      buf.try_insert({x, static_cast<int>(rng.index(5)), 0}, rng);
    }
    const std::size_t k = 1 + rng.index(std::min<std::size_t>(size, 15));
    Tensor q({5, 6});
    for (double& v : q.values()) v = rng.normal();
    const auto got = knn_fit_and_predict(buf, net, q, k);

    // All-pairs scan, embedding every row on its own.
    for (std::size_t a = 0; a < q.rows(); ++a) {
      const Tensor qe = net.infer(q.slice_rows(a, a + 1)).embedding;
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const Tensor e = net.infer(Tensor::from_rows({buf.items()[i].features}, {6})).embedding;
        double s = 0.0;
        for (std::size_t j = 0; j < e.row_size(); ++j) s += (qe(0, j) - e(0, j)) * (qe(0, j) - e(0, j));
        d.push_back({s, i});
      }
      std::sort(d.begin(), d.end());
      std::map<int, std::pair<std::size_t, double>> votes;
      for (std::size_t i = 0; i < k; ++i) {
        auto& v = votes[buf.items()[d[i].second].label];
        ++v.first;
        v.second += d[i].first;
      }
      auto best = votes.begin();
      for (auto it = votes.begin(); it != votes.end(); ++it)
        if (it->second.first > best->second.first ||
            (it->second.first == best->second.first && it->second.second < best->second.second))
          best = it;
      agree += got[a] == best->first;
      ++total;
    }
  }
  verdict(5, agree == total,
          fmt("kNN oracle: %zu/%zu predictions agree with all-pairs scan over 100 buffers of <=500 items (exact)", agree,
              total));
}

// 6 -------------------------------------------------------------------------

void metric_oracles() {
  MetricsMatrix two(2);
  two.record_eval(0, {0.9});
  two.record_eval(1, {0.8, 0.6});
  MetricsMatrix three(3);
  three.record_eval(0, {0.9});
  three.record_eval(1, {0.7, 0.8});
  three.record_eval(2, {0.5, 0.6, 0.9});
  const double af = final_accuracy(two), f = forgetting(three);
  Rng rng(5);
  bool bounded = true;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t T = 2 + rng.index(9);
    MetricsMatrix mm(T);
    for (std::size_t k = 0; k < T; ++k) {
      std::vector<double> row(k + 1);
      for (double& v : row) v = rng.uniform();
      mm.record_eval(k, row);
    }
    const double v = forgetting(mm);
    bounded = bounded && v >= -1.0 && v <= 1.0;
  }
  verdict(6, std::abs(af - 0.7) <= 1e-12 && std::abs(f - 0.3) <= 1e-12 && bounded,
          fmt("metric oracles: A_f=%.12f (0.7), F=%.12f (0.3), F in [-1,1] on 1000 random matrices: %s", af, f,
              bounded ? "yes" : "NO"));
}

// 7-11 ----------------------------------------------------------------------

struct Experiments {
  fs::path config_dir;
  std::map<std::string, std::pair<RunRecord, std::vector<SeedResult>>> cache;

  const std::pair<RunRecord, std::vector<SeedResult>>& get(const std::string& method, const KeyValues& extra) {
    KeyValues kv = read_key_values((config_dir / "benchmark.cfg").string());
    for (const auto& [k, v] : read_key_values((config_dir / (method + ".cfg")).string())) kv[k] = v;
    for (const auto& [k, v] : extra) kv[k] = v;
    kv["log_losses"] = "false";
    const std::string key = format_key_values(kv);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<SeedResult> seeds;
    RunRecord r = run(RunConfig::from(kv), &seeds);
    std::string tag = method;
    for (const auto& [k, v] : extra) tag += " " + k + "=" + v;
    detail(fmt("%-52s A_f %.4f +- %.4f  F %.4f  (%.0f s)", tag.c_str(), r.af_mean(), r.af_std(), r.f_mean(),
               r.wall_seconds));
    return cache.emplace(key, std::make_pair(std::move(r), std::move(seeds))).first->second;
  }
  double af(const std::string& method, const KeyValues& extra) { return get(method, extra).first.af_mean(); }
};

void forgetting_reproduction(Experiments& ex) {
  const auto& sgd = ex.get("sgd", {{"label_rate", "1"}});
  const auto& joint = ex.get("joint", {{"label_rate", "1"}});
  const double chance = 1.0 / 10.0;
  int ok = 0;
  std::string task0;
  for (std::size_t i = 0; i < sgd.second.size(); ++i) {
    const double a0 = sgd.second[i].matrix.at(sgd.second[i].matrix.num_tasks() - 1, 0);
    const double gap = joint.second[i].final_accuracy() - sgd.second[i].final_accuracy();
    task0 += fmt(" %.3f", a0);
    ok += a0 <= chance + 0.10 && gap >= 0.30;
  }
  detail("SGD final task-0 accuracy per seed:" + task0);
  verdict(7, 2 * ok > static_cast<int>(sgd.second.size()),
          fmt("catastrophic forgetting: %d/%zu seeds with SGD task-0 final acc <= chance+10pts and joint - SGD A_f "
              ">= 30pts (p_s=1; majority needed); means joint %.4f vs SGD %.4f",
              ok, sgd.second.size(), joint.first.af_mean(), sgd.first.af_mean()));
}

void replay_benefit(Experiments& ex) {
  const double sgd = ex.af("sgd", {{"label_rate", "0.25"}});
  std::vector<const RunRecord*> er;
  for (const char* m : {"50", "200", "500"}) er.push_back(&ex.get("er", {{"label_rate", "0.25"}, {"buffer_size", m}}).first);
  const bool beats = er[1]->af_mean() - sgd >= 0.20;
  bool monotone = true;
  for (std::size_t i = 0; i + 1 < er.size(); ++i) {
    const double pooled = std::sqrt(0.5 * (er[i]->af_std() * er[i]->af_std() + er[i + 1]->af_std() * er[i + 1]->af_std()));
    monotone = monotone && er[i + 1]->af_mean() >= er[i]->af_mean() - pooled;
  }
  verdict(8, beats && monotone,
          fmt("replay benefit: ER(m=200) - SGD = %.4f (>= 0.20) at p_s=0.25; ER A_f over m=50/200/500 = "
              "%.4f/%.4f/%.4f non-decreasing within one pooled std: %s",
              er[1]->af_mean() - sgd, er[0]->af_mean(), er[1]->af_mean(), er[2]->af_mean(), monotone ? "yes" : "NO"));
}

void wscl_benefit(Experiments& ex) {
  bool ok = true;
  std::string parts;
  for (const char* rate : {"0.05", "0.25"}) {
    const double er = ex.af("er", {{"label_rate", rate}});
    const double cic = ex.af("cic", {{"label_rate", rate}});
    const double ccic = ex.af("ccic", {{"label_rate", rate}});
    ok = ok && cic >= er && ccic >= er;
    parts += fmt("p_s=%s ER %.4f CIC %.4f CCIC %.4f; ", rate, er, cic, ccic);
  }
  const double er_full = ex.af("er", {{"label_rate", "1"}});
  const double ccic_25 = ex.af("ccic", {{"label_rate", "0.25"}});
  ok = ok && ccic_25 >= 0.9 * er_full;
  verdict(9, ok,
          fmt("WSCL benefit (m=200, 5-seed means): %sCCIC@0.25 %.4f >= 0.9 x ER@1.0 %.4f = %.4f", parts.c_str(), ccic_25,
              er_full, 0.9 * er_full));
}

void ablation_direction(Experiments& ex) {
  const KeyValues base{{"label_rate", "0.05"}, {"buffer_size", "500"}};
  auto with = [&](const char* k) {
    KeyValues kv = base;
    kv[k] = "false";
    return kv;
  };
  const double full = ex.af("ccic", base);
  const double no_mixup = ex.af("ccic", with("use_mixup"));
  const double no_sharpen = ex.af("ccic", with("use_sharpen"));
  verdict(10, full - no_mixup > full - no_sharpen,
          fmt("ablation (p_s=0.05, m=500): drop without mixUp %.4f > drop without sharpening %.4f (full %.4f)",
              full - no_mixup, full - no_sharpen, full));
}

void mining_order(Experiments& ex) {
  const double across = ex.af("ccic", {{"label_rate", "0.05"}, {"mining", "across_task"}});
  const double agnostic = ex.af("ccic", {{"label_rate", "0.05"}, {"mining", "task_agnostic"}});
  verdict(11, across >= agnostic,
          fmt("mining variants (p_s=0.05, m=200): across-task %.4f >= task-agnostic %.4f", across, agnostic));
}

// 12 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void determinism(const fs::path& config_dir) {
  const fs::path root = fs::temp_directory_path() / "wscl_acceptance_determinism";
  fs::remove_all(root);
  bool same = true;
  std::string which;
  for (const char* method : {"er", "cic", "ccic", "pseudo_er"}) {
    KeyValues kv = read_key_values((config_dir / "benchmark.cfg").string());
    for (const auto& [k, v] : read_key_values((config_dir / (std::string(method) + ".cfg")).string())) kv[k] = v;
    kv["seeds"] = "3";
    kv["label_rate"] = "0.05";
    for (const char* rep : {"a", "b"}) {
      kv["out"] = (root / method / rep).string();
      run(RunConfig::from(kv));
    }
    const std::string a = slurp(root / method / "a" / "seed_3" / "metrics.csv");
    const std::string b = slurp(root / method / "b" / "seed_3" / "metrics.csv");
    same = same && !a.empty() && a == b;
    which += fmt(" %s:%s", method, a == b ? "identical" : "DIFFERENT");
  }
  verdict(12, same, "determinism: metrics.csv byte-identical on rerun (seed 3, p_s=0.05):" + which);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config_dir = argc > 1 ? fs::path(argv[1]) : fs::path(WSCL_CONFIG_DIR);
  set_warnings_enabled(false);
  std::printf("acceptance: configs from %s\n", config_dir.string().c_str());
  try {
    split_arithmetic();
    gradient_suite();
    loss_oracles();
    reservoir_uniformity();
    knn_oracle();
    metric_oracles();
    Experiments ex{config_dir, {}};
    forgetting_reproduction(ex);
    replay_benefit(ex);
    wscl_benefit(ex);
    ablation_direction(ex);
    mining_order(ex);
    determinism(config_dir);
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 2;
  }
  std::printf("acceptance: %d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
