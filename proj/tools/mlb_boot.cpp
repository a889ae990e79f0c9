// Command-line front end: data generation, training, the ablation table and
// weight-map dumps, all driven by a flat key=value config file.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlbseg/harness.hpp"

namespace {

std::vector<uint64_t> parse_u64_list(const std::string& csv) {
  std::vector<uint64_t> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    std::string tok = mlbseg::detail::trim(
        comma == std::string::npos ? csv.substr(pos) : csv.substr(pos, comma - pos));
    if (tok.empty()) throw mlbseg::Error("empty entry in list '" + csv + "'");
    out.push_back(static_cast<uint64_t>(mlbseg::detail::parse_int(tok, "list '" + csv + "'")));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  for (uint64_t v : parse_u64_list(csv)) out.push_back(static_cast<int>(v));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learned label bootstrapping for 2d segmentation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string seeds_csv = "1,2,3";
  std::string steps_csv;
  bool resume = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "config file (flat key = value lines)")->required();
    sub->add_option("--set", sets, "override a config key, e.g. --set seed=7");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic splits and a manifest");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "run one experiment into out_dir");
  add_common(train);
  train->add_flag("--resume", resume, "continue from out_dir/snapshot.bin");

  CLI::App* ablate = app.add_subcommand("ablate", "run the five-configuration comparison");
  add_common(ablate);
  ablate->add_option("--seeds", seeds_csv, "comma-separated seeds (default 1,2,3)");

  CLI::App* dump = app.add_subcommand("dump-weights", "write weight maps for chosen training steps");
  add_common(dump);
  dump->add_option("--steps", steps_csv, "comma-separated global step indices")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    mlbseg::ExperimentConfig cfg = mlbseg::ExperimentConfig::from_file(config_path, sets);
    if (gen->parsed()) {
      mlbseg::write_splits(cfg);
      std::printf("wrote splits and manifest under %s\n", cfg.out_dir.c_str());
    } else if (train->parsed()) {
      mlbseg::RunResult r = mlbseg::run_experiment(cfg, resume);
      if (r.completed) {
        std::printf("%s: best epoch %d, dice %.4f, jaccard %.4f\n", r.phase.c_str(), r.best_epoch,
                    r.best.dice, r.best.jaccard);
      } else {
        std::printf("%s: stopped after epoch limit, snapshot kept for --resume\n", r.phase.c_str());
      }
    } else if (ablate->parsed()) {
      std::vector<uint64_t> seeds = parse_u64_list(seeds_csv);
      std::vector<mlbseg::AblationRow> rows = mlbseg::run_ablation(cfg, seeds);
      std::printf("%-16s %8s\n", "config", "dice");
      for (const auto& row : rows) {
        double mean = 0;
        for (const auto& e : row.finals) mean += e.dice;
        std::printf("%-16s %8.4f\n", row.name.c_str(), mean / static_cast<double>(row.finals.size()));
      }
      std::printf("table written to %s/ablation.csv\n", cfg.out_dir.c_str());
    } else if (dump->parsed()) {
      mlbseg::dump_weight_maps(cfg, parse_int_list(steps_csv));
      std::printf("weight maps written under %s\n", cfg.out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
