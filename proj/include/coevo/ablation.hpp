#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coevo/config.hpp"
#include "coevo/experiment.hpp"

namespace coevo::evalkit {

struct AblationCell {
  std::string name;
  double map_mean = 0.0;
  double map_std = 0.0;
  double rank1_mean = 0.0;
  double rank1_std = 0.0;
  std::vector<double> map_per_seed;
  std::vector<double> rank1_per_seed;
  std::vector<double> same_dist_per_seed;
  std::vector<double> diff_dist_per_seed;
};

struct AblationTable {
  std::string grid;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationCell> cells;

  const AblationCell& cell(const std::string& name) const;
};

// Known grids: components, anchoring, scope, metadata, tokens, lambda_c3.
std::vector<std::string> ablation_grids();

// Cell configs for one grid derived from the base config. Cells differ from
// the base only in the switch under study.
std::vector<std::pair<std::string, config::ExperimentConfig>> grid_cells(
    const config::ExperimentConfig& base, const std::string& grid);

// Runs every cell over every seed (cells within a seed share the generated
// dataset) and reports seed means and standard deviations of the final
// evaluation metrics. Cells fan out to at most `workers` threads; results
// are ordered deterministically regardless of scheduling.
AblationTable ablation_harness(const config::ExperimentConfig& base,
                               const std::string& grid,
                               const std::vector<std::uint64_t>& seeds,
                               int workers);

std::string format_ablation_text(const AblationTable& table);
void write_ablation_csv(const AblationTable& table, const std::string& path);

}  // namespace coevo::evalkit
