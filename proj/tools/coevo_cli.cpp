#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "coevo/ablation.hpp"
#include "coevo/config.hpp"
#include "coevo/experiment.hpp"
#include "coevo/gradcheck.hpp"
#include "coevo/gsd.hpp"
#include "coevo/synthdata.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool dry_run = false;
  int workers = 0;
};

coevo::config::ExperimentConfig load(const CommonOpts& opts) {
  coevo::config::ExperimentConfig cfg =
      opts.config_path.empty() ? coevo::config::default_config()
                               : coevo::config::load_config_file(opts.config_path);
  if (opts.seed_set) cfg.seed = opts.seed;
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (opts.workers > 0) cfg.ablation.workers = opts.workers;
  cfg.resolve();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_workers = false) {
  cmd->add_option("--config", opts.config_path, "experiment config (JSON)");
  cmd->add_option("--out", opts.out_dir, "output directory override");
  cmd->add_option("--seed", opts.seed, "seed override")
      ->each([&](const std::string&) { opts.seed_set = true; });
  cmd->add_flag("--dry-run", opts.dry_run, "validate and print the plan only");
  if (with_workers)
    cmd->add_option("--workers", opts.workers, "worker threads for grid cells");
}

int run_phase(const char* phase, const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const coevo::config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error [" << phase << "]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated domain-generalization simulator"};
  app.require_subcommand(1);

  CommonOpts run_opts, ablate_opts, gen_opts, grad_opts;
  std::string grid = "components";
  std::string bank_path;
  int grad_configs = 10;

  CLI::App* run_cmd = app.add_subcommand("run", "run one experiment end to end");
  add_common(run_cmd, run_opts);

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  add_common(ablate_cmd, ablate_opts, /*with_workers=*/true);
  ablate_cmd->add_option("--grid", grid, "one of: components, anchoring, scope, metadata, tokens, lambda_c3");

  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate and export a federation dataset");
  add_common(gen_cmd, gen_opts);

  CLI::App* inspect_cmd = app.add_subcommand("inspect-bank", "print a style bank");
  inspect_cmd->add_option("--bank", bank_path, "bank.bin path")->required();

  CLI::App* grad_cmd = app.add_subcommand("grad-check", "validate analytic gradients");
  grad_cmd->add_option("--configs", grad_configs, "random configurations per loss");
  grad_cmd->add_option("--seed", grad_opts.seed, "seed")
      ->each([&](const std::string&) { grad_opts.seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  if (run_cmd->parsed()) {
    return run_phase("run", [&] {
      const auto cfg = load(run_opts);
      if (run_opts.dry_run) {
        std::cout << coevo::config::dump_config(cfg) << "\n";
        std::cout << "plan: protocol " << cfg.protocol << ", "
                  << cfg.dataset.num_sources << " clients, " << cfg.fed.rounds
                  << " rounds -> " << cfg.out_dir << "\n";
        return;
      }
      const auto artifacts = coevo::experiment::run_experiment(cfg);
      std::cout << "wrote " << artifacts.manifest_path << "\n";
    });
  }

  if (ablate_cmd->parsed()) {
    return run_phase("ablate", [&] {
      const auto cfg = load(ablate_opts);
      const auto cells = coevo::evalkit::grid_cells(cfg, grid);
      if (ablate_opts.dry_run) {
        std::cout << "grid " << grid << ": " << cells.size() << " cells x "
                  << cfg.ablation.seeds.size() << " seeds\n";
        for (const auto& [name, cell_cfg] : cells) {
          (void)cell_cfg;
          std::cout << "  " << name << "\n";
        }
        return;
      }
      const auto table = coevo::evalkit::ablation_harness(
          cfg, grid, cfg.ablation.seeds, cfg.ablation.workers);
      std::filesystem::create_directories(cfg.out_dir);
      const std::string csv =
          (std::filesystem::path(cfg.out_dir) / "ablation.csv").string();
      coevo::evalkit::write_ablation_csv(table, csv);
      std::cout << coevo::evalkit::format_ablation_text(table);
      std::cout << "wrote " << csv << "\n";
    });
  }

  if (gen_cmd->parsed()) {
    return run_phase("gen-data", [&] {
      const auto cfg = load(gen_opts);
      if (gen_opts.dry_run) {
        std::cout << coevo::config::dump_config(cfg) << "\n";
        return;
      }
      const auto dataset = coevo::synthdata::generate_federation(cfg.dataset, cfg.seed);
      coevo::synthdata::export_federation(dataset, cfg.out_dir);
      std::cout << "wrote dataset to " << cfg.out_dir << "\n";
    });
  }

  if (inspect_cmd->parsed()) {
    return run_phase("inspect-bank", [&] {
      const auto bank = coevo::gsd::load_bank(bank_path);
      std::printf("%zu templates\n", bank.size());
      for (const auto& t : bank.templates) {
        std::printf("client %d group %d  mean[", t.origin_client, t.origin_group);
        for (std::size_t c = 0; c < t.stats.mean.size(); ++c)
          std::printf("%s%.4f", c ? " " : "", t.stats.mean[c]);
        std::printf("]  var[");
        for (std::size_t c = 0; c < t.stats.var.size(); ++c)
          std::printf("%s%.4f", c ? " " : "", t.stats.var[c]);
        std::printf("]\n");
      }
    });
  }

  if (grad_cmd->parsed()) {
    return run_phase("grad-check", [&] {
      const std::uint64_t seed = grad_opts.seed_set ? grad_opts.seed : 1;
      const auto entries = coevo::gradcheck::run_battery(grad_configs, seed);
      std::cout << coevo::gradcheck::format_battery(entries);
      for (const auto& e : entries)
        if (!e.pass) throw std::runtime_error("gradient check failed: " + e.name);
    });
  }

  return 0;
}
