#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "coevo/csa.hpp"
#include "coevo/fedloop.hpp"
#include "coevo/synthdata.hpp"

namespace coevo::config {

// Raised for schema violations; message carries a JSON-pointer-style path
// (and line/column for parse errors).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class Metadata { kClean, kCorrupt, kPseudo };

struct EncoderConfig {
  int hidden_dim = 64;
  int embed_dim = 32;
  int token_dim = 16;
};

struct GsdConfig {
  bool enabled = true;
  gsd::SampleScope scope = gsd::SampleScope::kGlobal;
  double epsilon = 1e-5;
  Metadata metadata = Metadata::kClean;
  double corrupt_fraction = 0.3;
  int pseudo_groups = 0;  // 0 selects the per-client camera count
  bool refresh_bank = false;
  gsd::RandomStatRange random_stat;
};

struct AblationConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int workers = 2;
};

// The whole experiment: dataset, Phase I, GSD, federated loop, evaluation
// protocol. Every field has a default; unknown keys are rejected.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string protocol = "I";  // I: leave-one-out, II: reduced sources, III: source tests
  std::string out_dir = "runs/out";
  synthdata::FederationConfig dataset;
  EncoderConfig encoder;
  bool csa_enabled = true;
  csa::CsaConfig csa;
  GsdConfig gsd;
  fedloop::FedConfig fed;  // csa/gsd switches mirrored in resolve()
  AblationConfig ablation;

  // Copies cross-cutting switches (component toggles, encoder dims, GSD
  // scope) into the nested fedloop config and validates invariants.
  void resolve();
};

ExperimentConfig default_config();

// Parses and validates a config JSON document. Unknown keys anywhere are
// errors; missing keys fall back to defaults.
ExperimentConfig parse_config(const std::string& json_text,
                              const std::string& source_name = "<config>");
ExperimentConfig load_config_file(const std::string& path);

// Fully resolved config (all defaults expanded) as a JSON document; parsing
// it back yields an identical config.
std::string dump_config(const ExperimentConfig& cfg);

}  // namespace coevo::config
