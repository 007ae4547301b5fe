#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "wscl/runner.hpp"

namespace {

void print_record(const wscl::RunRecord& r) {
  std::cout << "config " << r.config_hash << "  method " << r.method << "  seeds " << r.seeds.size() << '\n'
            << "A_f " << wscl::format_real(r.af_mean()) << " +- " << wscl::format_real(r.af_std()) << '\n'
            << "F   " << wscl::format_real(r.f_mean()) << " +- " << wscl::format_real(r.f_std()) << '\n'
            << "wall " << wscl::format_real(r.wall_seconds) << " s\n";
}

// Later files override earlier ones.
wscl::KeyValues read_configs(const std::vector<std::string>& paths) {
  wscl::KeyValues kv;
  for (const auto& p : paths)
    for (const auto& [k, v] : wscl::read_key_values(p)) kv[k] = v;
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised continual learning experiments"};
  app.require_subcommand(1);

  std::string out_dir, grid_path, in_dir;
  std::vector<std::string> config_paths;
  std::vector<std::string> overrides;
  long long seed = -1;

  auto* run = app.add_subcommand("run", "Train and evaluate one config over its seeds");
  run->add_option("--config", config_paths, "key=value config file(s); later files override earlier")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Run this single seed instead of the config's seed list");
  run->add_option("--out", out_dir, "Output directory (overrides 'out')");
  run->add_option("--set", overrides, "Extra key=value overrides");

  auto* grid = app.add_subcommand("grid", "Grid search on the validation split");
  grid->add_option("--config", config_paths, "Base config file(s)")->required()->check(CLI::ExistingFile);
  grid->add_option("--grid", grid_path, "Grid file: key=v1,v2,... per line")->required()->check(CLI::ExistingFile);
  grid->add_option("--out", out_dir, "Directory for per-point records, grid.csv and best.cfg");

  auto* rep = app.add_subcommand("report", "Tabulate every record.txt below a directory");
  rep->add_option("--in", in_dir, "Directory to scan")->required();
  rep->add_option("--out", out_dir, "Write table.csv and table.txt here (default: --in)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      wscl::KeyValues kv = read_configs(config_paths);
      for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw wscl::ConfigError("--set expects key=value, got '" + o + "'");
        kv[wscl::trim(o.substr(0, eq))] = wscl::trim(o.substr(eq + 1));
      }
      if (seed >= 0) kv["seeds"] = std::to_string(seed);
      if (!out_dir.empty()) kv["out"] = out_dir;
      print_record(wscl::run(wscl::RunConfig::from(kv)));
    } else if (*grid) {
      const auto g = wscl::grid_search(read_configs(config_paths), wscl::read_grid(grid_path), out_dir);
      for (std::size_t i = 0; i < g.points.size(); ++i) {
        std::cout << (i == g.best ? "* " : "  ");
        for (const auto& [k, v] : g.points[i]) std::cout << k << '=' << v << ' ';
        std::cout << " A_f " << wscl::format_real(g.records[i].af_mean()) << " F "
                  << wscl::format_real(g.records[i].f_mean()) << '\n';
      }
      std::cout << "best:\n" << wscl::format_key_values(g.best_config);
    } else if (*rep) {
      const auto table = wscl::report(wscl::collect_records(in_dir));
      const std::string dest = out_dir.empty() ? in_dir : out_dir;
      std::ofstream csv(dest + "/table.csv"), txt(dest + "/table.txt");
      if (!csv || !txt) throw wscl::IoError("cannot write tables into " + dest);
      table.write_csv(csv);
      table.write_text(txt);
      table.write_text(std::cout);
    }
  } catch (const wscl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
