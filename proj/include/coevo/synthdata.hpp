#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coevo/tensor.hpp"

namespace coevo::synthdata {

using numerics::Tensor;

// One synthetic "image" with its labels. Identity labels are globally
// unique across the federation; client identity sets never overlap.
struct Sample {
  Tensor image;  // C,H,W
  int identity = -1;
  int camera = -1;
  int client = -1;
  int domain = -1;
};

// Per-camera per-channel affine photometric footprint.
struct CameraStyle {
  std::vector<double> gain;  // one per channel, > 0
  std::vector<double> bias;  // one per channel
};

struct DomainSpec {
  int num_identities = 20;
  int num_cameras = 4;
  int samples_per_identity_per_camera = 8;
  int identity_dim = 16;
  int channels = 4;
  int height = 8;
  int width = 8;
  std::vector<CameraStyle> camera_styles;  // size num_cameras
  double noise_sigma = 0.1;

  void validate() const;
};

// Federation-level generation parameters. Source styles are drawn inside
// [1-gain_spread, 1+gain_spread] x [-bias_spread, bias_spread]; with
// target_style_outside_bank the target's per-channel gain/bias magnitudes
// are pushed strictly outside that hull by target_style_margin.
struct FederationConfig {
  int num_sources = 3;
  int identities_per_source = 20;
  int cameras_per_domain = 4;
  int samples_per_identity_per_camera = 8;
  int identity_dim = 16;
  int channels = 4;
  int height = 8;
  int width = 8;
  double noise_sigma = 0.1;
  double style_gain_spread = 0.5;
  double style_bias_spread = 3.0;
  double within_domain_spread = 1.0;  // camera offsets as a fraction of the spreads
  int style_rank = 1;                  // latent factors per style component
  int target_identities = 20;
  bool target_style_outside_bank = true;
  double target_style_margin = 2.0;
  int test_identities_per_source = 0;  // > 0 adds held-out source test splits
};

struct SplitPair {
  std::vector<Sample> query;
  std::vector<Sample> gallery;
};

struct FederationDataset {
  std::vector<std::vector<Sample>> clients;  // training data per client
  SplitPair target;                          // held-out target domain
  std::vector<SplitPair> source_tests;       // per-source test splits (may be empty)
};

// Fixed per-federation channel directions of the photometric family. Real
// camera footprints are low-dimensional: a camera is a (contrast, brightness)
// pair acting along these shared directions, so the joint channel statistics
// of genuine cameras occupy a thin manifold of the full moment space.
struct StyleBasis {
  int rank = 2;
  std::vector<double> gain_dirs;  // rank x channels, row-major
  std::vector<double> bias_dirs;  // rank x channels

  static StyleBasis seeded(int channels, int rank, std::uint64_t seed);
};

// Seeded camera styles for one domain. A domain has a scalar
// contrast/brightness center inside [-spread, spread]; its cameras sit at
// center plus offsets inside +-within_fraction*spread, so within-domain
// camera deltas are small against cross-domain gaps. `outside_hull` pushes
// the target's center beyond the source range by `margin` so the bank cannot
// trivially cover the target's style.
std::vector<CameraStyle> make_camera_styles(const StyleBasis& basis, int num_cameras,
                                            double gain_spread, double bias_spread,
                                            double within_fraction,
                                            bool outside_hull, double margin,
                                            std::uint64_t seed);

// Renders all samples of one domain. Each identity has a fixed latent; the
// rendered base image depends only on the identity, so with noise_sigma = 0
// two samples of the same identity under the same camera are identical.
std::vector<Sample> generate_domain(const DomainSpec& spec, std::uint64_t seed);

// Builds the full federation: disjoint identity ranges per client plus a
// held-out target split into query/gallery by camera. Throws
// "target not evaluable" if the target has fewer than two cameras.
FederationDataset generate_federation(const FederationConfig& config,
                                      std::uint64_t seed);

// Writes images.bin (raw little-endian doubles) plus manifest.json with
// shapes, labels and split ranges, for cross-implementation fixtures.
void export_federation(const FederationDataset& dataset, const std::string& dir);

}  // namespace coevo::synthdata
