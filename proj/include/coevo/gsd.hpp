#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"
#include "coevo/synthdata.hpp"

namespace coevo::gsd {

using numerics::ChannelStats;
using numerics::Tensor;
using synthdata::Sample;

// Channel statistics of one camera (or pseudo-group) of one client.
struct StyleTemplate {
  ChannelStats stats;
  int origin_client = -1;
  int origin_group = -1;
};

// Server-side union of every client's templates, order-stable by
// (client, group). Immutable within a round.
struct StyleBank {
  std::vector<StyleTemplate> templates;

  bool empty() const { return templates.empty(); }
  std::size_t size() const { return templates.size(); }
};

// One template per distinct group label, with stats pooled over all pixels
// of all images in the group. `groups` is parallel to `samples`; pass the
// camera labels for the metadata-clean regime.
std::vector<StyleTemplate> extract_templates(const std::vector<Sample>& samples,
                                             const std::vector<int>& groups,
                                             int client_id);

// Union of all clients' templates. Throws "empty bank" when no templates.
StyleBank build_bank(const std::vector<std::vector<StyleTemplate>>& per_client);

// Template-based re-normalization: x is standardized per channel and
// re-colored with the template's statistics. Channels with zero variance
// and epsilon = 0 map to the template mean.
Tensor stylize(const Tensor& x, const StyleTemplate& tmpl, double epsilon);

enum class SampleScope { kGlobal, kLocal, kRandomStat };

// Uniform ranges for the random-statistics baseline. Defaults describe a
// generic standardized regime; unlike bank templates they carry no
// information about the federation's actual camera statistics.
struct RandomStatRange {
  double mean_lo = -1.0;
  double mean_hi = 1.0;
  double var_lo = 0.0;
  double var_hi = 1.0;
};

// Draws one template: uniformly over the bank (global), uniformly over the
// requesting client's own templates (local), or with per-channel statistics
// drawn from `range` (random_stat, which needs `channels`).
StyleTemplate sample_template(const StyleBank& bank, Rng& rng, SampleScope scope,
                              int client_id = -1, int channels = 0,
                              const RandomStatRange& range = {});

// Re-draws the camera label of exactly round(fraction*n) samples per client,
// each to a uniformly chosen different camera of that client. Throws if an
// affected client has a single camera.
std::vector<Sample> corrupt_camera_ids(const std::vector<Sample>& samples,
                                       double fraction, Rng& rng);

// Lloyd's k-means over per-image channel-stat vectors (mean and variance
// concatenated). Seeded initialization from distinct points, at most 100
// iterations or centroid movement below 1e-6; an empty cluster is re-seeded
// to the point farthest from its centroid. If fewer distinct stat vectors
// than groups exist, the group count degrades with a warning flag.
struct PseudoGroupResult {
  std::vector<int> labels;
  int num_groups = 0;
  bool degraded = false;
};

PseudoGroupResult pseudo_group(const std::vector<Sample>& samples, int num_groups,
                               Rng& rng);

// Binary bank format: version, channel count, template count header plus
// per-template records, little-endian; a JSON twin is written alongside for
// inspection.
void save_bank(const StyleBank& bank, const std::string& bin_path);
void save_bank_json(const StyleBank& bank, const std::string& json_path);
StyleBank load_bank(const std::string& bin_path);

}  // namespace coevo::gsd
