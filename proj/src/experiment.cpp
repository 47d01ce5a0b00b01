#include "coevo/experiment.hpp"

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "coevo/evalkit.hpp"
#include "coevo/gsd.hpp"
#include "coevo/rng.hpp"

namespace coevo::experiment {

namespace fs = std::filesystem;

const fedloop::EvalOutcome& SimResult::final_eval(const std::string& split) const {
  for (auto it = federation.rounds.rbegin(); it != federation.rounds.rend(); ++it)
    for (const auto& e : it->evals)
      if (e.split == split) return e;
  throw std::runtime_error("no evaluation recorded for split: " + split);
}

std::vector<std::vector<synthdata::Sample>> apply_metadata_setting(
    const std::vector<std::vector<synthdata::Sample>>& clients,
    const config::GsdConfig& gsd_cfg, std::uint64_t seed) {
  std::vector<std::vector<synthdata::Sample>> out = clients;
  switch (gsd_cfg.metadata) {
    case config::Metadata::kClean:
      break;
    case config::Metadata::kCorrupt: {
      Rng rng(derive_seed(seed, {stream::kCorrupt}));
      for (auto& client : out)
        client = gsd::corrupt_camera_ids(client, gsd_cfg.corrupt_fraction, rng);
      break;
    }
    case config::Metadata::kPseudo: {
      for (std::size_t k = 0; k < out.size(); ++k) {
        std::set<int> cams;
        for (const auto& s : out[k]) cams.insert(s.camera);
        const int groups = gsd_cfg.pseudo_groups > 0
                               ? gsd_cfg.pseudo_groups
                               : static_cast<int>(cams.size());
        Rng rng(derive_seed(seed, {stream::kPseudoGroup, k}));
        const gsd::PseudoGroupResult res = gsd::pseudo_group(out[k], groups, rng);
        for (std::size_t i = 0; i < out[k].size(); ++i)
          out[k][i].camera = res.labels[i];
      }
      break;
    }
  }
  return out;
}

SimResult run_simulation(const config::ExperimentConfig& raw_cfg,
                         const synthdata::FederationDataset& dataset,
                         std::uint64_t seed) {
  config::ExperimentConfig cfg = raw_cfg;
  cfg.resolve();

  SimResult result;

  // Camera labels in the working copies already reflect the metadata
  // setting, so the consistency loss and the bank see the same grouping.
  const auto train = apply_metadata_setting(dataset.clients, cfg.gsd, seed);
  const int num_clients = static_cast<int>(train.size());

  const int in_dim = cfg.dataset.channels * cfg.dataset.height * cfg.dataset.width;
  result.initial_encoder = encoders::EncoderParams::seeded(
      in_dim, cfg.encoder.hidden_dim, cfg.encoder.embed_dim,
      derive_seed(seed, {stream::kEncoderInit}));
  const encoders::TextEncoderSurrogate surrogate =
      encoders::TextEncoderSurrogate::seeded(cfg.encoder.token_dim,
                                             cfg.encoder.embed_dim,
                                             derive_seed(seed, {stream::kSurrogate}));

  fedloop::FederationInputs inputs;
  inputs.clients = &train;
  inputs.initial_encoder = result.initial_encoder;
  inputs.surrogate = &surrogate;
  inputs.csa_config = cfg.csa;

  if (cfg.csa_enabled) {
    for (int k = 0; k < num_clients; ++k) {
      result.phase1.push_back(csa::run_csa_phase(
          train[k], result.initial_encoder, surrogate, cfg.csa,
          derive_seed(seed, {stream::kCsaClient, static_cast<std::uint64_t>(k)})));
      inputs.prototypes.push_back(
          fedloop::PrototypeTable::from(result.phase1.back().prototypes));
      inputs.tokens.push_back(result.phase1.back().tokens);
    }
  }

  if (cfg.gsd.enabled) {
    inputs.style_groups.resize(num_clients);
    for (int k = 0; k < num_clients; ++k)
      for (const auto& s : train[k]) inputs.style_groups[k].push_back(s.camera);
  }

  if (cfg.protocol == "III") {
    for (std::size_t k = 0; k < dataset.source_tests.size(); ++k)
      inputs.eval_splits.push_back({"source" + std::to_string(k),
                                    &dataset.source_tests[k].query,
                                    &dataset.source_tests[k].gallery});
  } else {
    inputs.eval_splits.push_back(
        {"target", &dataset.target.query, &dataset.target.gallery});
  }

  result.federation = fedloop::run_federation(inputs, cfg.fed, seed);
  return result;
}

SimResult run_simulation(const config::ExperimentConfig& cfg, std::uint64_t seed) {
  const synthdata::FederationDataset dataset =
      synthdata::generate_federation(cfg.dataset, seed);
  return run_simulation(cfg, dataset, seed);
}

namespace {

std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_rounds_csv(const std::string& path,
                      const std::vector<fedloop::RoundReport>& rounds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "round,metric,value\n";
  for (const auto& r : rounds) {
    for (const auto& c : r.clients) {
      const std::string prefix = "client" + std::to_string(c.client_id) + "/";
      f << r.round << "," << prefix << "id_orig," << format_double(c.orig.id) << "\n";
      f << r.round << "," << prefix << "tri_orig," << format_double(c.orig.tri) << "\n";
      f << r.round << "," << prefix << "align_orig," << format_double(c.orig.align) << "\n";
      f << r.round << "," << prefix << "id_styl," << format_double(c.styl.id) << "\n";
      f << r.round << "," << prefix << "tri_styl," << format_double(c.styl.tri) << "\n";
      f << r.round << "," << prefix << "align_styl," << format_double(c.styl.align) << "\n";
    }
    for (const auto& e : r.evals) {
      f << r.round << "," << e.split << "/map," << format_double(e.map) << "\n";
      f << r.round << "," << e.split << "/rank1," << format_double(e.rank1) << "\n";
      f << r.round << "," << e.split << "/same_id_dist,"
        << format_double(e.same_id_cross_cam_dist) << "\n";
      f << r.round << "," << e.split << "/diff_id_dist,"
        << format_double(e.diff_id_dist) << "\n";
    }
  }
}

nlohmann::json metrics_json(const SimResult& sim) {
  nlohmann::json m;
  m["rounds"] = sim.federation.rounds.size();
  m["bank_builds"] = sim.federation.bank_builds;
  nlohmann::json finals;
  std::set<std::string> split_names;
  for (const auto& r : sim.federation.rounds)
    for (const auto& e : r.evals) split_names.insert(e.split);
  for (const auto& name : split_names) {
    const fedloop::EvalOutcome* last = nullptr;
    for (const auto& r : sim.federation.rounds)
      for (const auto& e : r.evals)
        if (e.split == name) last = &e;
    finals[name] = {{"map", last->map},
                    {"rank1", last->rank1},
                    {"same_id_cross_cam_dist", last->same_id_cross_cam_dist},
                    {"diff_id_dist", last->diff_id_dist}};
  }
  m["final"] = finals;
  nlohmann::json phase1 = nlohmann::json::array();
  for (const auto& p : sim.phase1) {
    nlohmann::json c;
    c["epochs"] = p.epoch_loss.size();
    c["final_loss"] = p.epoch_loss.empty() ? 0.0 : p.epoch_loss.back();
    c["c3_inert"] = p.c3_inert;
    phase1.push_back(c);
  }
  m["phase1"] = phase1;
  return m;
}

}  // namespace

std::string file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for checksum: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!f) break;
  }
  char out[20];
  std::snprintf(out, sizeof(out), "%016" PRIx64, h);
  return out;
}

RunArtifacts run_experiment(const config::ExperimentConfig& raw_cfg) {
  config::ExperimentConfig cfg = raw_cfg;
  cfg.resolve();
  fs::create_directories(cfg.out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const synthdata::FederationDataset dataset =
      synthdata::generate_federation(cfg.dataset, cfg.seed);
  const auto t1 = std::chrono::steady_clock::now();
  const SimResult sim = run_simulation(cfg, dataset, cfg.seed);
  const auto t2 = std::chrono::steady_clock::now();

  RunArtifacts artifacts;
  const fs::path out(cfg.out_dir);

  artifacts.rounds_csv_path = (out / "rounds.csv").string();
  write_rounds_csv(artifacts.rounds_csv_path, sim.federation.rounds);

  artifacts.metrics_json_path = (out / "metrics.json").string();
  {
    std::ofstream f(artifacts.metrics_json_path);
    f << metrics_json(sim).dump(2) << "\n";
  }

  if (cfg.gsd.enabled && !sim.federation.bank.empty()) {
    artifacts.bank_bin_path = (out / "bank.bin").string();
    gsd::save_bank(sim.federation.bank, artifacts.bank_bin_path);
    gsd::save_bank_json(sim.federation.bank, (out / "bank.json").string());
  }

  artifacts.checkpoint_path = (out / "checkpoint.bin").string();
  {
    encoders::Checkpoint ckpt;
    ckpt.seed = cfg.seed;
    const auto& enc = sim.federation.global_encoder;
    ckpt.arrays.emplace_back("encoder/w1", enc.w1);
    ckpt.arrays.emplace_back("encoder/b1", enc.b1);
    ckpt.arrays.emplace_back("encoder/w2", enc.w2);
    ckpt.arrays.emplace_back("encoder/b2", enc.b2);
    ckpt.arrays.emplace_back(
        "encoder/dims",
        std::vector<double>{static_cast<double>(enc.in_dim),
                            static_cast<double>(enc.hidden_dim),
                            static_cast<double>(enc.embed_dim)});
    for (std::size_t k = 0; k < sim.federation.client_heads.size(); ++k) {
      const auto& head = sim.federation.client_heads[k];
      const std::string prefix = "head" + std::to_string(k) + "/";
      ckpt.arrays.emplace_back(prefix + "w", head.w);
      ckpt.arrays.emplace_back(prefix + "b", head.b);
    }
    encoders::save_checkpoint(artifacts.checkpoint_path, ckpt);
  }

  // Manifest last so it can carry the other artifacts' checksums. Timings
  // live only here; the deterministic outputs stay timing-free.
  artifacts.manifest_path = (out / "manifest.json").string();
  {
    nlohmann::json manifest;
    manifest["version"] = "coevo 0.1.0";
    manifest["resolved_config"] = nlohmann::json::parse(config::dump_config(cfg));
    manifest["checksums"] = {
        {"rounds.csv", file_checksum(artifacts.rounds_csv_path)},
        {"metrics.json", file_checksum(artifacts.metrics_json_path)},
        {"checkpoint.bin", file_checksum(artifacts.checkpoint_path)}};
    if (!artifacts.bank_bin_path.empty())
      manifest["checksums"]["bank.bin"] = file_checksum(artifacts.bank_bin_path);
    manifest["timings_ms"] = {
        {"dataset",
         std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count()},
        {"train",
         std::chrono::duration_cast<std::chrono::milliseconds>(t2 - t1).count()}};
    // Full-scale settings replaced by desk-scale defaults.
    nlohmann::json deviations = nlohmann::json::array();
    const int batch = cfg.fed.local.batch_p * cfg.fed.local.batch_k;
    if (batch != 64)
      deviations.push_back({{"field", "fed/batch"}, {"full_scale", 64}, {"used", batch}});
    if (cfg.fed.local.lr != 1e-3)
      deviations.push_back(
          {{"field", "fed/lr"}, {"full_scale", 1e-3}, {"used", cfg.fed.local.lr}});
    manifest["full_scale_deviations"] = deviations;
    std::ofstream f(artifacts.manifest_path);
    f << manifest.dump(2) << "\n";
  }
  return artifacts;
}

}  // namespace coevo::experiment
