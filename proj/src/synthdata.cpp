#include "coevo/synthdata.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "coevo/rng.hpp"

namespace coevo::synthdata {

void DomainSpec::validate() const {
  if (num_identities < 1 || samples_per_identity_per_camera < 1)
    throw std::invalid_argument("domain spec needs at least one identity and sample");
  if (num_cameras < 2)
    throw std::invalid_argument("domain spec needs num_cameras >= 2");
  if (channels < 1 || height < 1 || width < 1 || identity_dim < 1)
    throw std::invalid_argument("domain spec has degenerate dimensions");
  if (static_cast<int>(camera_styles.size()) != num_cameras)
    throw std::invalid_argument("camera_styles size must equal num_cameras");
  for (const auto& style : camera_styles) {
    if (static_cast<int>(style.gain.size()) != channels ||
        static_cast<int>(style.bias.size()) != channels)
      throw std::invalid_argument("camera style channel count mismatch");
    for (double g : style.gain)
      if (g <= 0.0) throw std::invalid_argument("camera gains must be positive");
  }
  if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be >= 0");
}

StyleBasis StyleBasis::seeded(int channels, int rank, std::uint64_t seed) {
  Rng rng(seed);
  StyleBasis basis;
  basis.rank = rank;
  basis.gain_dirs.resize(static_cast<std::size_t>(rank) * channels);
  basis.bias_dirs.resize(static_cast<std::size_t>(rank) * channels);
  const double scale = 1.0 / rank;
  for (auto& v : basis.gain_dirs)
    v = scale * rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  for (auto& v : basis.bias_dirs)
    v = scale * rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return basis;
}

std::vector<CameraStyle> make_camera_styles(const StyleBasis& basis, int num_cameras,
                                            double gain_spread, double bias_spread,
                                            double within_fraction,
                                            bool outside_hull, double margin,
                                            std::uint64_t seed) {
  Rng rng(seed);
  const int rank = basis.rank;
  const int channels = static_cast<int>(basis.gain_dirs.size()) / rank;

  // Sources: cameras cluster around a domain-level center, so within-domain
  // camera deltas stay small against cross-domain gaps. An out-of-hull
  // target instead draws every camera independently beyond the source range:
  // unseen cameras differ both from the sources and from one another.
  std::vector<double> contrast_center(rank, 0.0), brightness_center(rank, 0.0);
  if (!outside_hull)
    for (int j = 0; j < rank; ++j) {
      contrast_center[j] = rng.uniform(-gain_spread, gain_spread);
      brightness_center[j] = rng.uniform(-bias_spread, bias_spread);
    }

  std::vector<CameraStyle> styles(num_cameras);
  for (auto& style : styles) {
    style.gain.assign(channels, 1.0);
    style.bias.assign(channels, 0.0);
    for (int j = 0; j < rank; ++j) {
      double contrast, brightness;
      if (outside_hull) {
        const double cs = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double bs = rng.uniform() < 0.5 ? -1.0 : 1.0;
        contrast = cs * gain_spread * (margin + 0.5 * rng.uniform());
        brightness = bs * bias_spread * (margin + 0.5 * rng.uniform());
      } else {
        contrast =
            contrast_center[j] + rng.uniform(-1.0, 1.0) * within_fraction * gain_spread;
        brightness =
            brightness_center[j] + rng.uniform(-1.0, 1.0) * within_fraction * bias_spread;
      }
      for (int c = 0; c < channels; ++c) {
        style.gain[c] += contrast * basis.gain_dirs[static_cast<std::size_t>(j) * channels + c];
        style.bias[c] += brightness * basis.bias_dirs[static_cast<std::size_t>(j) * channels + c];
      }
    }
    for (int c = 0; c < channels; ++c) style.gain[c] = std::max(style.gain[c], 0.05);
  }
  return styles;
}

std::vector<Sample> generate_domain(const DomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);

  const int pixels = spec.channels * spec.height * spec.width;

  // Fixed per-domain linear render map, latent -> C*H*W.
  std::vector<double> render(static_cast<std::size_t>(pixels) * spec.identity_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.identity_dim));
  for (auto& v : render) v = rng.normal() * scale;

  std::vector<std::vector<double>> bases(spec.num_identities);
  for (int y = 0; y < spec.num_identities; ++y) {
    std::vector<double> latent(spec.identity_dim);
    for (auto& z : latent) z = rng.normal();
    bases[y].assign(pixels, 0.0);
    for (int p = 0; p < pixels; ++p) {
      double acc = 0.0;
      const double* row = render.data() + static_cast<std::size_t>(p) * spec.identity_dim;
      for (int d = 0; d < spec.identity_dim; ++d) acc += row[d] * latent[d];
      bases[y][p] = acc;
    }
  }

  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(spec.num_identities) * spec.num_cameras *
                  spec.samples_per_identity_per_camera);
  const int hw = spec.height * spec.width;
  for (int y = 0; y < spec.num_identities; ++y) {
    for (int cam = 0; cam < spec.num_cameras; ++cam) {
      const CameraStyle& style = spec.camera_styles[cam];
      for (int s = 0; s < spec.samples_per_identity_per_camera; ++s) {
        Sample sample;
        sample.identity = y;
        sample.camera = cam;
        sample.image = Tensor({spec.channels, spec.height, spec.width});
        for (int ch = 0; ch < spec.channels; ++ch) {
          for (int p = 0; p < hw; ++p) {
            const double base = bases[y][ch * hw + p];
            // Noise is always drawn so the stream layout does not depend on
            // noise_sigma.
            const double noise = rng.normal();
            sample.image.values[static_cast<std::size_t>(ch) * hw + p] =
                style.gain[ch] * base + style.bias[ch] + spec.noise_sigma * noise;
          }
        }
        samples.push_back(std::move(sample));
      }
    }
  }
  return samples;
}

namespace {

DomainSpec spec_for(const FederationConfig& cfg, int num_identities,
                    std::vector<CameraStyle> styles) {
  DomainSpec spec;
  spec.num_identities = num_identities;
  spec.num_cameras = cfg.cameras_per_domain;
  spec.samples_per_identity_per_camera = cfg.samples_per_identity_per_camera;
  spec.identity_dim = cfg.identity_dim;
  spec.channels = cfg.channels;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.camera_styles = std::move(styles);
  spec.noise_sigma = cfg.noise_sigma;
  return spec;
}

// Splits one domain's samples into query (one seeded camera per identity)
// and gallery (all remaining cameras). Mirrors the cross-camera retrieval
// convention: every query identity is present in the gallery under at least
// one other camera.
SplitPair split_query_gallery(std::vector<Sample> samples, int num_cameras,
                              std::uint64_t seed) {
  Rng rng(seed);
  SplitPair out;
  // identity -> chosen query camera, in first-seen order for determinism
  std::vector<std::pair<int, int>> query_cam;
  auto find_cam = [&](int id) -> int {
    for (auto& [k, v] : query_cam)
      if (k == id) return v;
    const int cam = rng.uniform_int(0, num_cameras - 1);
    query_cam.emplace_back(id, cam);
    return cam;
  };
  for (auto& s : samples) {
    if (s.camera == find_cam(s.identity))
      out.query.push_back(std::move(s));
    else
      out.gallery.push_back(std::move(s));
  }
  return out;
}

}  // namespace

FederationDataset generate_federation(const FederationConfig& config,
                                      std::uint64_t seed) {
  if (config.num_sources < 2)
    throw std::invalid_argument("federation needs at least two source domains");
  if (config.cameras_per_domain < 2)
    throw std::invalid_argument("target not evaluable");

  FederationDataset dataset;
  int id_offset = 0;

  const StyleBasis basis =
      StyleBasis::seeded(config.channels, config.style_rank,
                         derive_seed(seed, {stream::kDomainStyle, 0xba5e}));

  for (int k = 0; k < config.num_sources; ++k) {
    auto styles = make_camera_styles(
        basis, config.cameras_per_domain, config.style_gain_spread,
        config.style_bias_spread, config.within_domain_spread,
        /*outside_hull=*/false, config.target_style_margin,
        derive_seed(seed, {stream::kDomainStyle, static_cast<std::uint64_t>(k)}));
    const int domain_ids = config.identities_per_source + config.test_identities_per_source;
    auto samples = generate_domain(
        spec_for(config, domain_ids, std::move(styles)),
        derive_seed(seed, {stream::kDomainData, static_cast<std::uint64_t>(k)}));

    std::vector<Sample> train, test;
    for (auto& s : samples) {
      const bool is_test = s.identity >= config.identities_per_source;
      s.identity += id_offset;
      s.client = k;
      s.domain = k;
      (is_test ? test : train).push_back(std::move(s));
    }
    dataset.clients.push_back(std::move(train));
    if (config.test_identities_per_source > 0) {
      dataset.source_tests.push_back(split_query_gallery(
          std::move(test), config.cameras_per_domain,
          derive_seed(seed, {stream::kTargetSplit, static_cast<std::uint64_t>(k) + 1})));
    }
    id_offset += domain_ids;
  }

  auto target_styles = make_camera_styles(
      basis, config.cameras_per_domain, config.style_gain_spread,
      config.style_bias_spread, config.within_domain_spread,
      config.target_style_outside_bank, config.target_style_margin,
      derive_seed(seed, {stream::kDomainStyle,
                         static_cast<std::uint64_t>(config.num_sources)}));
  auto target_samples = generate_domain(
      spec_for(config, config.target_identities, std::move(target_styles)),
      derive_seed(seed, {stream::kDomainData,
                         static_cast<std::uint64_t>(config.num_sources)}));
  for (auto& s : target_samples) {
    s.identity += id_offset;
    s.client = -1;
    s.domain = config.num_sources;
  }
  dataset.target = split_query_gallery(std::move(target_samples),
                                       config.cameras_per_domain,
                                       derive_seed(seed, {stream::kTargetSplit, 0}));
  return dataset;
}

namespace {

void append_labels(nlohmann::json& labels, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    labels["identity"].push_back(s.identity);
    labels["camera"].push_back(s.camera);
    labels["client"].push_back(s.client);
    labels["domain"].push_back(s.domain);
  }
}

void append_images(std::ofstream& bin, const std::vector<Sample>& samples) {
  for (const auto& s : samples)
    bin.write(reinterpret_cast<const char*>(s.image.values.data()),
              static_cast<std::streamsize>(s.image.values.size() * sizeof(double)));
}

}  // namespace

void export_federation(const FederationDataset& dataset, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["version"] = 1;
  nlohmann::json labels;
  labels["identity"] = nlohmann::json::array();
  labels["camera"] = nlohmann::json::array();
  labels["client"] = nlohmann::json::array();
  labels["domain"] = nlohmann::json::array();

  std::ofstream bin(fs::path(dir) / "images.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open images.bin for writing");

  int cursor = 0;
  auto record_range = [&cursor](const std::vector<Sample>& samples) {
    nlohmann::json r{{"offset", cursor}, {"count", static_cast<int>(samples.size())}};
    cursor += static_cast<int>(samples.size());
    return r;
  };

  if (!dataset.clients.empty() && !dataset.clients[0].empty())
    manifest["image_shape"] = dataset.clients[0][0].image.shape;

  manifest["clients"] = nlohmann::json::array();
  for (const auto& client : dataset.clients) {
    manifest["clients"].push_back(record_range(client));
    append_labels(labels, client);
    append_images(bin, client);
  }
  manifest["target"]["query"] = record_range(dataset.target.query);
  append_labels(labels, dataset.target.query);
  append_images(bin, dataset.target.query);
  manifest["target"]["gallery"] = record_range(dataset.target.gallery);
  append_labels(labels, dataset.target.gallery);
  append_images(bin, dataset.target.gallery);

  manifest["source_tests"] = nlohmann::json::array();
  for (const auto& split : dataset.source_tests) {
    nlohmann::json entry;
    entry["query"] = record_range(split.query);
    append_labels(labels, split.query);
    append_images(bin, split.query);
    entry["gallery"] = record_range(split.gallery);
    append_labels(labels, split.gallery);
    append_images(bin, split.gallery);
    manifest["source_tests"].push_back(entry);
  }
  manifest["labels"] = std::move(labels);
  manifest["encoding"] = "float64-little-endian";

  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

}  // namespace coevo::synthdata
