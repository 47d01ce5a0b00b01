#include "coevo/ablation.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace coevo::evalkit {

const AblationCell& AblationTable::cell(const std::string& name) const {
  for (const auto& c : cells)
    if (c.name == name) return c;
  throw std::invalid_argument("no ablation cell named " + name);
}

std::vector<std::string> ablation_grids() {
  return {"components", "anchoring", "scope", "metadata", "tokens", "lambda_c3"};
}

namespace {

config::ExperimentConfig with_components(const config::ExperimentConfig& base,
                                         bool csa_on, bool gsd_on) {
  config::ExperimentConfig cfg = base;
  cfg.csa_enabled = csa_on;
  cfg.gsd.enabled = gsd_on;
  return cfg;
}

}  // namespace

std::vector<std::pair<std::string, config::ExperimentConfig>> grid_cells(
    const config::ExperimentConfig& base, const std::string& grid) {
  std::vector<std::pair<std::string, config::ExperimentConfig>> cells;
  if (grid == "components") {
    cells.emplace_back("baseline", with_components(base, false, false));
    cells.emplace_back("csa_only", with_components(base, true, false));
    cells.emplace_back("gsd_only", with_components(base, false, true));
    cells.emplace_back("full", with_components(base, true, true));
  } else if (grid == "anchoring") {
    cells.emplace_back("baseline", with_components(base, false, false));
    config::ExperimentConfig dynamic = with_components(base, true, true);
    dynamic.fed.anchoring = fedloop::Anchoring::kDynamic;
    cells.emplace_back("dynamic", dynamic);
    config::ExperimentConfig fixed = with_components(base, true, true);
    fixed.fed.anchoring = fedloop::Anchoring::kStatic;
    cells.emplace_back("static", fixed);
  } else if (grid == "scope") {
    cells.emplace_back("csa_only", with_components(base, true, false));
    for (const auto& [name, scope] :
         std::vector<std::pair<std::string, gsd::SampleScope>>{
             {"random_stat", gsd::SampleScope::kRandomStat},
             {"local", gsd::SampleScope::kLocal},
             {"global", gsd::SampleScope::kGlobal}}) {
      config::ExperimentConfig cfg = with_components(base, true, true);
      cfg.gsd.scope = scope;
      cells.emplace_back(name, cfg);
    }
  } else if (grid == "metadata") {
    cells.emplace_back("baseline", with_components(base, false, false));
    config::ExperimentConfig clean = with_components(base, true, true);
    clean.gsd.metadata = config::Metadata::kClean;
    cells.emplace_back("clean", clean);
    config::ExperimentConfig corrupt = clean;
    corrupt.gsd.metadata = config::Metadata::kCorrupt;
    cells.emplace_back("corrupt30", corrupt);
    config::ExperimentConfig pseudo = clean;
    pseudo.gsd.metadata = config::Metadata::kPseudo;
    cells.emplace_back("pseudo_group", pseudo);
  } else if (grid == "tokens") {
    for (int length : {1, 4, 8, 16}) {
      config::ExperimentConfig cfg = with_components(base, true, true);
      cfg.csa.token_len = length;
      cells.emplace_back("L" + std::to_string(length), cfg);
    }
  } else if (grid == "lambda_c3") {
    for (double weight : {0.0, 0.1, 0.2, 0.5}) {
      config::ExperimentConfig cfg = with_components(base, true, true);
      cfg.csa.lambda_c3 = weight;
      std::ostringstream name;
      name << "lambda" << weight;
      cells.emplace_back(name.str(), cfg);
    }
  } else {
    throw std::invalid_argument("unknown ablation grid: " + grid);
  }
  return cells;
}

AblationTable ablation_harness(const config::ExperimentConfig& base,
                               const std::string& grid,
                               const std::vector<std::uint64_t>& seeds,
                               int workers) {
  if (seeds.size() < 3)
    throw std::invalid_argument("ablation_harness needs at least 3 seeds");
  const auto cells = grid_cells(base, grid);

  struct Job {
    std::size_t cell = 0;
    std::size_t seed_idx = 0;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({c, s});

  // The dataset depends only on (dataset config, seed): generate one per
  // seed up front and share it across cells so comparisons are paired.
  std::vector<synthdata::FederationDataset> datasets;
  datasets.reserve(seeds.size());
  for (std::uint64_t seed : seeds)
    datasets.push_back(synthdata::generate_federation(base.dataset, seed));

  struct Outcome {
    double map = 0.0, rank1 = 0.0, same_dist = 0.0, diff_dist = 0.0;
  };
  std::vector<Outcome> outcomes(jobs.size());
  std::atomic<std::size_t> cursor{0};
  std::string split = base.protocol == "III" ? "source0" : "target";

  auto worker = [&]() {
    while (true) {
      const std::size_t j = cursor.fetch_add(1);
      if (j >= jobs.size()) return;
      const Job& job = jobs[j];
      const experiment::SimResult sim = experiment::run_simulation(
          cells[job.cell].second, datasets[job.seed_idx], seeds[job.seed_idx]);
      const fedloop::EvalOutcome& eval = sim.final_eval(split);
      outcomes[j] = {eval.map, eval.rank1, eval.same_id_cross_cam_dist,
                     eval.diff_id_dist};
    }
  };

  const int pool = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> threads;
  threads.reserve(pool);
  for (int t = 0; t < pool; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  AblationTable table;
  table.grid = grid;
  table.seeds = seeds;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    AblationCell cell;
    cell.name = cells[c].first;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const Outcome& o = outcomes[c * seeds.size() + s];
      cell.map_per_seed.push_back(o.map);
      cell.rank1_per_seed.push_back(o.rank1);
      cell.same_dist_per_seed.push_back(o.same_dist);
      cell.diff_dist_per_seed.push_back(o.diff_dist);
    }
    auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
      mean = 0.0;
      for (double x : v) mean += x;
      mean /= v.size();
      sd = 0.0;
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / v.size());
    };
    mean_std(cell.map_per_seed, cell.map_mean, cell.map_std);
    mean_std(cell.rank1_per_seed, cell.rank1_mean, cell.rank1_std);
    table.cells.push_back(std::move(cell));
  }
  return table;
}

std::string format_ablation_text(const AblationTable& table) {
  std::ostringstream out;
  out << "grid: " << table.grid << "  (" << table.seeds.size() << " seeds)\n";
  std::size_t width = 4;
  for (const auto& c : table.cells) width = std::max(width, c.name.size());
  char line[160];
  std::snprintf(line, sizeof(line), "%-*s  %10s %10s  %10s %10s\n",
                static_cast<int>(width), "cell", "mAP", "std", "rank1", "std");
  out << line;
  for (const auto& c : table.cells) {
    std::snprintf(line, sizeof(line), "%-*s  %10.4f %10.4f  %10.4f %10.4f\n",
                  static_cast<int>(width), c.name.c_str(), c.map_mean, c.map_std,
                  c.rank1_mean, c.rank1_std);
    out << line;
  }
  return out.str();
}

void write_ablation_csv(const AblationTable& table, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "grid,cell,seed,map,rank1,same_id_dist,diff_id_dist\n";
  char buf[64];
  for (const auto& c : table.cells) {
    for (std::size_t s = 0; s < table.seeds.size(); ++s) {
      f << table.grid << "," << c.name << "," << table.seeds[s];
      for (double v : {c.map_per_seed[s], c.rank1_per_seed[s],
                       c.same_dist_per_seed[s], c.diff_dist_per_seed[s]}) {
        std::snprintf(buf, sizeof(buf), ",%.17g", v);
        f << buf;
      }
      f << "\n";
    }
    f << table.grid << "," << c.name << ",mean";
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,,\n", c.map_mean, c.rank1_mean);
    f << buf;
  }
}

}  // namespace coevo::evalkit
