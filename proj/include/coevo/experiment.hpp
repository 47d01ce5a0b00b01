#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coevo/config.hpp"
#include "coevo/csa.hpp"
#include "coevo/fedloop.hpp"
#include "coevo/synthdata.hpp"

namespace coevo::experiment {

// In-memory result of one full experiment (Phase I + coupled loop).
struct SimResult {
  std::vector<csa::CsaResult> phase1;  // one per client; empty when CSA is off
  fedloop::FederationResult federation;
  encoders::EncoderParams initial_encoder;

  // Final-round metric for a named evaluation split.
  const fedloop::EvalOutcome& final_eval(const std::string& split) const;
};

// Applies the metadata setting (corruption or pseudo-grouping) to copies of
// the client training data; the returned camera labels feed both the
// consistency loss and template extraction.
std::vector<std::vector<synthdata::Sample>> apply_metadata_setting(
    const std::vector<std::vector<synthdata::Sample>>& clients,
    const config::GsdConfig& gsd_cfg, std::uint64_t seed);

// Runs Phase I per client (when enabled) and the federated loop on an
// already generated dataset. Pure in-memory path shared by the CLI runner,
// the ablation harness and the acceptance suite.
SimResult run_simulation(const config::ExperimentConfig& cfg,
                         const synthdata::FederationDataset& dataset,
                         std::uint64_t seed);

// Convenience wrapper that also generates the dataset from the seed.
SimResult run_simulation(const config::ExperimentConfig& cfg, std::uint64_t seed);

// Filesystem runner: writes manifest.json, rounds.csv, metrics.json,
// bank.bin/bank.json, checkpoint.bin under cfg.out_dir.
struct RunArtifacts {
  std::string manifest_path;
  std::string rounds_csv_path;
  std::string metrics_json_path;
  std::string bank_bin_path;    // empty when GSD disabled
  std::string checkpoint_path;
};

RunArtifacts run_experiment(const config::ExperimentConfig& cfg);

// FNV-1a 64-bit checksum of a file, hex-encoded; used for the manifest and
// the determinism check.
std::string file_checksum(const std::string& path);

}  // namespace coevo::experiment
