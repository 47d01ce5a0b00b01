#include "coevo/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace coevo::config {

using nlohmann::json;

namespace {

// Tracks the path while walking the document so every error is anchored.
class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {}

  void known_keys(std::initializer_list<const char*> keys) const {
    for (const auto& [key, value] : node_.items()) {
      (void)value;
      bool ok = false;
      for (const char* k : keys)
        if (key == k) {
          ok = true;
          break;
        }
      if (!ok) throw ConfigError("unknown key at " + path_ + "/" + key);
    }
  }

  bool has(const char* key) const { return node_.contains(key); }

  Reader child(const char* key) const {
    const json& c = node_.at(key);
    if (!c.is_object())
      throw ConfigError("expected object at " + path_ + "/" + key);
    return Reader(c, path_ + "/" + key);
  }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!node_.contains(key)) return;
    try {
      out = node_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value type at " + path_ + "/" + key);
    }
  }

  void get_string_choice(const char* key, std::string& out,
                         std::initializer_list<const char*> choices) const {
    if (!node_.contains(key)) return;
    std::string v;
    get(key, v);
    for (const char* c : choices)
      if (v == c) {
        out = v;
        return;
      }
    throw ConfigError("invalid value at " + path_ + "/" + key + ": " + v);
  }

  const std::string& path() const { return path_; }

 private:
  const json& node_;
  std::string path_;
};

std::string scope_to_string(gsd::SampleScope scope) {
  switch (scope) {
    case gsd::SampleScope::kGlobal: return "global";
    case gsd::SampleScope::kLocal: return "local";
    case gsd::SampleScope::kRandomStat: return "random_stat";
  }
  return "global";
}

std::string metadata_to_string(Metadata m) {
  switch (m) {
    case Metadata::kClean: return "clean";
    case Metadata::kCorrupt: return "corrupt";
    case Metadata::kPseudo: return "pseudo";
  }
  return "clean";
}

void parse_dataset(const Reader& r, synthdata::FederationConfig& d) {
  r.known_keys({"num_sources", "identities_per_source", "cameras_per_domain",
                "samples_per_identity_per_camera", "identity_dim", "channels",
                "height", "width", "noise_sigma", "style_gain_spread",
                "style_bias_spread", "within_domain_spread", "style_rank",
                "target_identities",
                "target_style_outside_bank", "target_style_margin",
                "test_identities_per_source"});
  r.get("num_sources", d.num_sources);
  r.get("identities_per_source", d.identities_per_source);
  r.get("cameras_per_domain", d.cameras_per_domain);
  r.get("samples_per_identity_per_camera", d.samples_per_identity_per_camera);
  r.get("identity_dim", d.identity_dim);
  r.get("channels", d.channels);
  r.get("height", d.height);
  r.get("width", d.width);
  r.get("noise_sigma", d.noise_sigma);
  r.get("style_gain_spread", d.style_gain_spread);
  r.get("style_bias_spread", d.style_bias_spread);
  r.get("within_domain_spread", d.within_domain_spread);
  r.get("style_rank", d.style_rank);
  r.get("target_identities", d.target_identities);
  r.get("target_style_outside_bank", d.target_style_outside_bank);
  r.get("target_style_margin", d.target_style_margin);
  r.get("test_identities_per_source", d.test_identities_per_source);
}

void parse_encoder(const Reader& r, EncoderConfig& e) {
  r.known_keys({"hidden_dim", "embed_dim", "token_dim"});
  r.get("hidden_dim", e.hidden_dim);
  r.get("embed_dim", e.embed_dim);
  r.get("token_dim", e.token_dim);
}

void parse_csa(const Reader& r, bool& enabled, csa::CsaConfig& c) {
  r.known_keys({"enabled", "token_len", "lambda_c3", "tau", "epochs", "lr",
                "batch_size", "dedup_identities"});
  r.get("enabled", enabled);
  r.get("token_len", c.token_len);
  r.get("lambda_c3", c.lambda_c3);
  r.get("tau", c.tau);
  r.get("epochs", c.epochs);
  r.get("lr", c.lr);
  r.get("batch_size", c.batch_size);
  r.get("dedup_identities", c.dedup_identities);
}

void parse_gsd(const Reader& r, GsdConfig& g) {
  r.known_keys({"enabled", "scope", "epsilon", "metadata", "corrupt_fraction",
                "pseudo_groups", "refresh_bank", "random_stat"});
  r.get("enabled", g.enabled);
  std::string scope = scope_to_string(g.scope);
  r.get_string_choice("scope", scope, {"global", "local", "random_stat"});
  g.scope = scope == "global"  ? gsd::SampleScope::kGlobal
            : scope == "local" ? gsd::SampleScope::kLocal
                               : gsd::SampleScope::kRandomStat;
  r.get("epsilon", g.epsilon);
  std::string metadata = metadata_to_string(g.metadata);
  r.get_string_choice("metadata", metadata, {"clean", "corrupt", "pseudo"});
  g.metadata = metadata == "clean"     ? Metadata::kClean
               : metadata == "corrupt" ? Metadata::kCorrupt
                                       : Metadata::kPseudo;
  r.get("corrupt_fraction", g.corrupt_fraction);
  r.get("pseudo_groups", g.pseudo_groups);
  r.get("refresh_bank", g.refresh_bank);
  if (r.has("random_stat")) {
    Reader rs = r.child("random_stat");
    rs.known_keys({"mean_lo", "mean_hi", "var_lo", "var_hi"});
    rs.get("mean_lo", g.random_stat.mean_lo);
    rs.get("mean_hi", g.random_stat.mean_hi);
    rs.get("var_lo", g.random_stat.var_lo);
    rs.get("var_hi", g.random_stat.var_hi);
  }
}

void parse_fed(const Reader& r, fedloop::FedConfig& f) {
  r.known_keys({"rounds", "local_epochs", "batch_p", "batch_k", "lambda_align",
                "triplet_margin", "tau", "lr", "momentum", "weight_decay",
                "lr_decay_factor", "clip_norm", "anchoring", "dynamic_steps",
                "dynamic_lr", "mining", "shared_head", "eval_every"});
  r.get("rounds", f.rounds);
  r.get("local_epochs", f.local.local_epochs);
  r.get("batch_p", f.local.batch_p);
  r.get("batch_k", f.local.batch_k);
  r.get("lambda_align", f.local.lambda_align);
  r.get("triplet_margin", f.local.triplet_margin);
  r.get("tau", f.local.tau);
  r.get("lr", f.local.lr);
  r.get("momentum", f.local.momentum);
  r.get("weight_decay", f.local.weight_decay);
  r.get("lr_decay_factor", f.lr_decay_factor);
  r.get("clip_norm", f.local.clip_norm);
  std::string anchoring = f.anchoring == fedloop::Anchoring::kStatic ? "static" : "dynamic";
  r.get_string_choice("anchoring", anchoring, {"static", "dynamic"});
  f.anchoring = anchoring == "static" ? fedloop::Anchoring::kStatic
                                      : fedloop::Anchoring::kDynamic;
  r.get("dynamic_steps", f.dynamic_steps);
  r.get("dynamic_lr", f.dynamic_lr);
  std::string mining = f.local.batch_hard ? "hard" : "all";
  r.get_string_choice("mining", mining, {"hard", "all"});
  f.local.batch_hard = mining == "hard";
  r.get("shared_head", f.shared_head);
  r.get("eval_every", f.eval_every);
}

void parse_ablation(const Reader& r, AblationConfig& a) {
  r.known_keys({"seeds", "workers"});
  r.get("seeds", a.seeds);
  r.get("workers", a.workers);
}

}  // namespace

void ExperimentConfig::resolve() {
  fed.hidden_dim = encoder.hidden_dim;
  fed.embed_dim = encoder.embed_dim;
  fed.csa_enabled = csa_enabled;
  fed.gsd_enabled = gsd.enabled;
  fed.scope = gsd.scope;
  fed.random_stat = gsd.random_stat;
  fed.gsd_epsilon = gsd.epsilon;
  fed.refresh_bank = gsd.refresh_bank;

  if (protocol != "I" && protocol != "II" && protocol != "III")
    throw ConfigError("protocol must be one of I, II, III");
  if (protocol == "III" && dataset.test_identities_per_source < 1)
    throw ConfigError("protocol III requires dataset/test_identities_per_source >= 1");
  if (csa.token_len < 1) throw ConfigError("csa/token_len must be >= 1");
  if (csa.tau <= 0.0 || fed.local.tau <= 0.0)
    throw ConfigError("temperatures must be > 0");
  if (csa.lambda_c3 < 0.0) throw ConfigError("csa/lambda_c3 must be >= 0");
  if (fed.local.lambda_align < 0.0) throw ConfigError("fed/lambda_align must be >= 0");
  if (fed.local.triplet_margin < 0.0) throw ConfigError("fed/triplet_margin must be >= 0");
  if (fed.local.batch_p * fed.local.batch_k < 2)
    throw ConfigError("fed batch must hold at least two samples");
  if (fed.rounds < 0) throw ConfigError("fed/rounds must be >= 0");
  if (gsd.corrupt_fraction < 0.0 || gsd.corrupt_fraction > 1.0)
    throw ConfigError("gsd/corrupt_fraction must be in [0,1]");
  if (ablation.seeds.empty()) throw ConfigError("ablation/seeds must be non-empty");
  if (ablation.workers < 1) throw ConfigError("ablation/workers must be >= 1");
  if (dataset.num_sources < 2) throw ConfigError("dataset/num_sources must be >= 2");
  if (dataset.cameras_per_domain < 2)
    throw ConfigError("dataset/cameras_per_domain must be >= 2");
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.resolve();
  return cfg;
}

ExperimentConfig parse_config(const std::string& json_text,
                              const std::string& source_name) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    // Convert the byte offset into a line/column anchor.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < e.byte && i < json_text.size(); ++i) {
      if (json_text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::ostringstream msg;
    msg << source_name << ":" << line << ":" << col << ": " << e.what();
    throw ConfigError(msg.str());
  }
  if (!doc.is_object()) throw ConfigError(source_name + ": top level must be an object");

  ExperimentConfig cfg;
  Reader root(doc, source_name);
  root.known_keys({"seed", "protocol", "out_dir", "dataset", "encoder", "csa",
                   "gsd", "fed", "ablation"});
  root.get("seed", cfg.seed);
  root.get_string_choice("protocol", cfg.protocol, {"I", "II", "III"});
  root.get("out_dir", cfg.out_dir);
  if (root.has("dataset")) parse_dataset(root.child("dataset"), cfg.dataset);
  if (root.has("encoder")) parse_encoder(root.child("encoder"), cfg.encoder);
  if (root.has("csa")) parse_csa(root.child("csa"), cfg.csa_enabled, cfg.csa);
  if (root.has("gsd")) parse_gsd(root.child("gsd"), cfg.gsd);
  if (root.has("fed")) parse_fed(root.child("fed"), cfg.fed);
  if (root.has("ablation")) parse_ablation(root.child("ablation"), cfg.ablation);
  cfg.resolve();
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

std::string dump_config(const ExperimentConfig& cfg) {
  json doc;
  doc["seed"] = cfg.seed;
  doc["protocol"] = cfg.protocol;
  doc["out_dir"] = cfg.out_dir;
  const auto& d = cfg.dataset;
  doc["dataset"] = {{"num_sources", d.num_sources},
                    {"identities_per_source", d.identities_per_source},
                    {"cameras_per_domain", d.cameras_per_domain},
                    {"samples_per_identity_per_camera", d.samples_per_identity_per_camera},
                    {"identity_dim", d.identity_dim},
                    {"channels", d.channels},
                    {"height", d.height},
                    {"width", d.width},
                    {"noise_sigma", d.noise_sigma},
                    {"style_gain_spread", d.style_gain_spread},
                    {"style_bias_spread", d.style_bias_spread},
                    {"within_domain_spread", d.within_domain_spread},
                    {"style_rank", d.style_rank},
                    {"target_identities", d.target_identities},
                    {"target_style_outside_bank", d.target_style_outside_bank},
                    {"target_style_margin", d.target_style_margin},
                    {"test_identities_per_source", d.test_identities_per_source}};
  doc["encoder"] = {{"hidden_dim", cfg.encoder.hidden_dim},
                    {"embed_dim", cfg.encoder.embed_dim},
                    {"token_dim", cfg.encoder.token_dim}};
  doc["csa"] = {{"enabled", cfg.csa_enabled},
                {"token_len", cfg.csa.token_len},
                {"lambda_c3", cfg.csa.lambda_c3},
                {"tau", cfg.csa.tau},
                {"epochs", cfg.csa.epochs},
                {"lr", cfg.csa.lr},
                {"batch_size", cfg.csa.batch_size},
                {"dedup_identities", cfg.csa.dedup_identities}};
  doc["gsd"] = {{"enabled", cfg.gsd.enabled},
                {"scope", scope_to_string(cfg.gsd.scope)},
                {"epsilon", cfg.gsd.epsilon},
                {"metadata", metadata_to_string(cfg.gsd.metadata)},
                {"corrupt_fraction", cfg.gsd.corrupt_fraction},
                {"pseudo_groups", cfg.gsd.pseudo_groups},
                {"refresh_bank", cfg.gsd.refresh_bank},
                {"random_stat", {{"mean_lo", cfg.gsd.random_stat.mean_lo},
                                 {"mean_hi", cfg.gsd.random_stat.mean_hi},
                                 {"var_lo", cfg.gsd.random_stat.var_lo},
                                 {"var_hi", cfg.gsd.random_stat.var_hi}}}};
  doc["fed"] = {{"rounds", cfg.fed.rounds},
                {"local_epochs", cfg.fed.local.local_epochs},
                {"batch_p", cfg.fed.local.batch_p},
                {"batch_k", cfg.fed.local.batch_k},
                {"lambda_align", cfg.fed.local.lambda_align},
                {"triplet_margin", cfg.fed.local.triplet_margin},
                {"tau", cfg.fed.local.tau},
                {"lr", cfg.fed.local.lr},
                {"momentum", cfg.fed.local.momentum},
                {"weight_decay", cfg.fed.local.weight_decay},
                {"lr_decay_factor", cfg.fed.lr_decay_factor},
                {"clip_norm", cfg.fed.local.clip_norm},
                {"anchoring", cfg.fed.anchoring == fedloop::Anchoring::kStatic
                                  ? "static"
                                  : "dynamic"},
                {"dynamic_steps", cfg.fed.dynamic_steps},
                {"dynamic_lr", cfg.fed.dynamic_lr},
                {"mining", cfg.fed.local.batch_hard ? "hard" : "all"},
                {"shared_head", cfg.fed.shared_head},
                {"eval_every", cfg.fed.eval_every}};
  doc["ablation"] = {{"seeds", cfg.ablation.seeds},
                     {"workers", cfg.ablation.workers}};
  return doc.dump(2);
}

}  // namespace coevo::config
