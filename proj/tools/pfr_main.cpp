#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pfr/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3, kDiverged = 4 };

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const pfr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const pfr::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated recommendation experiments"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;

  auto* run_cmd = app.add_subcommand("run", "Train one configuration and write its run directory");
  bool resume = false;
  std::size_t stop_after = 0;
  std::size_t checkpoint_every = 0;
  bool quiet = false;
  run_cmd->add_option("-c,--config", config_file, "Flat key = value config file");
  run_cmd->add_option("overrides", overrides, "key=value settings, applied after the file");
  run_cmd->add_flag("--resume", resume, "Continue from checkpoint.bin in the output directory");
  run_cmd->add_option("--stop-after", stop_after, "Checkpoint and stop once this many rounds are done");
  run_cmd->add_option("--checkpoint-every", checkpoint_every, "Also checkpoint every N rounds");
  run_cmd->add_flag("-q,--quiet", quiet, "No per-round progress on stdout");

  auto* dry_cmd = app.add_subcommand("dry-run", "Print the resolved config and predicted costs");
  dry_cmd->add_option("-c,--config", config_file, "Flat key = value config file");
  dry_cmd->add_option("overrides", overrides, "key=value settings, applied after the file");

  auto* report_cmd = app.add_subcommand("report", "Aggregate finished runs into tables and curves");
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  report_cmd->add_option("runs", run_dirs, "Run directories")->required();
  report_cmd->add_option("-o,--out", report_out, "Output directory");

  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a synthetic dataset in ratings.dat format");
  std::string gen_out;
  gen_cmd->add_option("-o,--out", gen_out, "Output ratings file")->required();
  gen_cmd->add_option("overrides", overrides, "synthetic.* key=value settings");

  CLI11_PARSE(app, argc, argv);

  if (run_cmd->parsed()) {
    return guarded([&] {
      const auto cfg = pfr::parse_config(config_file, overrides);
      pfr::RunOptions options;
      options.resume = resume;
      if (stop_after > 0) options.stop_after = stop_after;
      options.checkpoint_every = checkpoint_every;
      options.log = quiet ? nullptr : &std::cout;
      const auto outcome = pfr::run(cfg, options);
      if (outcome.status == pfr::RunStatus::kStopped) {
        std::cout << "stopped after round " << outcome.rounds_completed << "; resume with --resume\n";
      } else if (outcome.final_metric) {
        std::cout << "final " << pfr::format_fixed4(*outcome.final_metric) << '\n';
      }
      return static_cast<int>(kOk);
    });
  }
  if (dry_cmd->parsed()) {
    return guarded([&] {
      pfr::dry_run(pfr::parse_config(config_file, overrides), std::cout);
      return static_cast<int>(kOk);
    });
  }
  if (report_cmd->parsed()) {
    return guarded([&] {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      pfr::emit_report(dirs, report_out);
      std::ifstream md(std::filesystem::path(report_out) / "table.md");
      std::cout << md.rdbuf();
      return static_cast<int>(kOk);
    });
  }
  if (gen_cmd->parsed()) {
    return guarded([&] {
      for (const auto& token : overrides) {
        if (token.rfind("synthetic.", 0) != 0) throw pfr::ConfigError("gen-synthetic accepts synthetic.* keys only");
      }
      const auto cfg = pfr::parse_config({}, overrides);
      auto spec = cfg.synthetic;
      spec.scale = pfr::kMovieLensScale;
      const auto matrix = pfr::generate_synthetic(spec);
      std::ofstream out(gen_out);
      if (!out) throw std::runtime_error("cannot write " + gen_out);
      pfr::write_movielens(out, matrix);
      std::cout << matrix.num_users() << " users, " << matrix.num_items() << " items, " << matrix.num_entries()
                << " ratings\n";
      return static_cast<int>(kOk);
    });
  }
  return kUsage;
}
