#include "coevo/gsd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace coevo::gsd {

std::vector<StyleTemplate> extract_templates(const std::vector<Sample>& samples,
                                             const std::vector<int>& groups,
                                             int client_id) {
  if (samples.size() != groups.size())
    throw std::invalid_argument("extract_templates: group label size mismatch");
  if (samples.empty()) return {};

  const int channels = samples[0].image.dim(0);
  struct Acc {
    std::vector<double> sum, sumsq;
    long long count = 0;
  };
  std::map<int, Acc> by_group;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& img = samples[i].image;
    if (img.dim(0) != channels)
      throw std::invalid_argument("extract_templates: channel count mismatch");
    auto& acc = by_group[groups[i]];
    if (acc.sum.empty()) {
      acc.sum.assign(channels, 0.0);
      acc.sumsq.assign(channels, 0.0);
    }
    const int hw = img.dim(1) * img.dim(2);
    for (int c = 0; c < channels; ++c) {
      const double* p = img.values.data() + static_cast<std::size_t>(c) * hw;
      for (int k = 0; k < hw; ++k) {
        acc.sum[c] += p[k];
        acc.sumsq[c] += p[k] * p[k];
      }
    }
    acc.count += hw;
  }

  std::vector<StyleTemplate> templates;
  templates.reserve(by_group.size());
  for (const auto& [group, acc] : by_group) {
    StyleTemplate t;
    t.origin_client = client_id;
    t.origin_group = group;
    t.stats.mean.resize(channels);
    t.stats.var.resize(channels);
    for (int c = 0; c < channels; ++c) {
      const double mu = acc.sum[c] / acc.count;
      t.stats.mean[c] = mu;
      t.stats.var[c] = std::max(0.0, acc.sumsq[c] / acc.count - mu * mu);
    }
    templates.push_back(std::move(t));
  }
  return templates;
}

StyleBank build_bank(const std::vector<std::vector<StyleTemplate>>& per_client) {
  StyleBank bank;
  for (const auto& client_templates : per_client)
    bank.templates.insert(bank.templates.end(), client_templates.begin(),
                          client_templates.end());
  if (bank.templates.empty()) throw std::invalid_argument("empty bank");
  std::stable_sort(bank.templates.begin(), bank.templates.end(),
                   [](const StyleTemplate& a, const StyleTemplate& b) {
                     if (a.origin_client != b.origin_client)
                       return a.origin_client < b.origin_client;
                     return a.origin_group < b.origin_group;
                   });
  return bank;
}

Tensor stylize(const Tensor& x, const StyleTemplate& tmpl, double epsilon) {
  if (x.rank() != 3) throw std::invalid_argument("stylize expects a C,H,W tensor");
  const int channels = x.dim(0);
  if (static_cast<int>(tmpl.stats.mean.size()) != channels ||
      static_cast<int>(tmpl.stats.var.size()) != channels)
    throw std::invalid_argument("stylize: template channel count mismatch");

  const numerics::ChannelStats own = numerics::channel_stats(x);
  Tensor out = x;
  const int hw = x.dim(1) * x.dim(2);
  for (int c = 0; c < channels; ++c) {
    const double denom = std::sqrt(own.var[c] + epsilon);
    const double target_sd = std::sqrt(std::max(0.0, tmpl.stats.var[c]));
    double* p = out.values.data() + static_cast<std::size_t>(c) * hw;
    for (int k = 0; k < hw; ++k) {
      const double centered = p[k] - own.mean[c];
      const double standardized = denom == 0.0 ? 0.0 : centered / denom;
      p[k] = standardized * target_sd + tmpl.stats.mean[c];
    }
  }
  return out;
}

StyleTemplate sample_template(const StyleBank& bank, Rng& rng, SampleScope scope,
                              int client_id, int channels,
                              const RandomStatRange& range) {
  switch (scope) {
    case SampleScope::kGlobal: {
      if (bank.empty()) throw std::invalid_argument("sample_template: empty bank");
      const int idx = rng.uniform_int(0, static_cast<int>(bank.size()) - 1);
      return bank.templates[idx];
    }
    case SampleScope::kLocal: {
      std::vector<int> mine;
      for (std::size_t i = 0; i < bank.size(); ++i)
        if (bank.templates[i].origin_client == client_id)
          mine.push_back(static_cast<int>(i));
      if (mine.empty())
        throw std::invalid_argument("sample_template: no templates for client");
      return bank.templates[mine[rng.uniform_int(0, static_cast<int>(mine.size()) - 1)]];
    }
    case SampleScope::kRandomStat: {
      if (channels <= 0)
        throw std::invalid_argument("sample_template: random_stat needs channel count");
      StyleTemplate t;
      t.stats.mean.resize(channels);
      t.stats.var.resize(channels);
      for (int c = 0; c < channels; ++c) {
        t.stats.mean[c] = rng.uniform(range.mean_lo, range.mean_hi);
        t.stats.var[c] = rng.uniform(range.var_lo, range.var_hi);
      }
      return t;
    }
  }
  throw std::logic_error("unreachable");
}

std::vector<Sample> corrupt_camera_ids(const std::vector<Sample>& samples,
                                       double fraction, Rng& rng) {
  if (fraction < 0.0 || fraction > 1.0)
    throw std::invalid_argument("corrupt_camera_ids: fraction outside [0,1]");

  std::vector<Sample> out = samples;

  // client -> indices, preserving input order
  std::map<int, std::vector<int>> by_client;
  for (std::size_t i = 0; i < out.size(); ++i)
    by_client[out[i].client].push_back(static_cast<int>(i));

  for (auto& [client, indices] : by_client) {
    (void)client;
    const long long n = static_cast<long long>(indices.size());
    const long long m = std::llround(fraction * static_cast<double>(n));
    if (m == 0) continue;

    std::vector<int> cameras;
    for (int idx : indices)
      if (std::find(cameras.begin(), cameras.end(), out[idx].camera) == cameras.end())
        cameras.push_back(out[idx].camera);
    std::sort(cameras.begin(), cameras.end());
    if (cameras.size() < 2)
      throw std::invalid_argument("corrupt_camera_ids: client has a single camera");

    std::vector<int> order = indices;
    rng.shuffle(order);
    for (long long k = 0; k < m; ++k) {
      Sample& s = out[order[k]];
      // uniform over the client's other cameras
      int pick = rng.uniform_int(0, static_cast<int>(cameras.size()) - 2);
      for (int cam : cameras) {
        if (cam == s.camera) continue;
        if (pick-- == 0) {
          s.camera = cam;
          break;
        }
      }
    }
  }
  return out;
}

namespace {

std::vector<double> stat_vector(const Sample& s) {
  const numerics::ChannelStats st = numerics::channel_stats(s.image);
  std::vector<double> v;
  v.reserve(st.mean.size() * 2);
  v.insert(v.end(), st.mean.begin(), st.mean.end());
  v.insert(v.end(), st.var.begin(), st.var.end());
  return v;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace

PseudoGroupResult pseudo_group(const std::vector<Sample>& samples, int num_groups,
                               Rng& rng) {
  if (num_groups < 1) throw std::invalid_argument("pseudo_group: num_groups < 1");
  if (static_cast<std::size_t>(num_groups) > samples.size())
    throw std::invalid_argument("pseudo_group: more groups than samples");

  const int n = static_cast<int>(samples.size());
  std::vector<std::vector<double>> points(n);
  for (int i = 0; i < n; ++i) points[i] = stat_vector(samples[i]);

  // Distinct stat vectors bound the usable group count.
  std::vector<int> distinct;
  for (int i = 0; i < n; ++i) {
    bool seen = false;
    for (int j : distinct)
      if (points[j] == points[i]) {
        seen = true;
        break;
      }
    if (!seen) distinct.push_back(i);
  }

  PseudoGroupResult result;
  result.num_groups = num_groups;
  if (static_cast<int>(distinct.size()) < num_groups) {
    result.num_groups = static_cast<int>(distinct.size());
    result.degraded = true;
  }
  const int k = result.num_groups;

  rng.shuffle(distinct);
  std::vector<std::vector<double>> centroids(k);
  for (int c = 0; c < k; ++c) centroids[c] = points[distinct[c]];

  result.labels.assign(n, 0);
  std::vector<double> point_dist(n, 0.0);
  for (int iter = 0; iter < 100; ++iter) {
    // Assignment step; ties go to the lowest cluster index.
    for (int i = 0; i < n; ++i) {
      double best = sq_dist(points[i], centroids[0]);
      int best_c = 0;
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(points[i], centroids[c]);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      result.labels[i] = best_c;
      point_dist[i] = best;
    }

    // Update step with farthest-point reseeding of empty clusters.
    std::vector<std::vector<double>> next(k);
    std::vector<int> counts(k, 0);
    for (int c = 0; c < k; ++c) next[c].assign(points[0].size(), 0.0);
    for (int i = 0; i < n; ++i) {
      counts[result.labels[i]]++;
      for (std::size_t d = 0; d < points[i].size(); ++d)
        next[result.labels[i]][d] += points[i][d];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        int farthest = 0;
        for (int i = 1; i < n; ++i)
          if (point_dist[i] > point_dist[farthest]) farthest = i;
        next[c] = points[farthest];
        point_dist[farthest] = 0.0;
      } else {
        for (auto& v : next[c]) v /= counts[c];
      }
    }

    double movement = 0.0;
    for (int c = 0; c < k; ++c)
      movement = std::max(movement, std::sqrt(sq_dist(next[c], centroids[c])));
    centroids = std::move(next);
    if (movement < 1e-6) break;
  }

  // Final assignment against the converged centroids.
  for (int i = 0; i < n; ++i) {
    double best = sq_dist(points[i], centroids[0]);
    int best_c = 0;
    for (int c = 1; c < k; ++c) {
      const double d = sq_dist(points[i], centroids[c]);
      if (d < best) {
        best = d;
        best_c = c;
      }
    }
    result.labels[i] = best_c;
  }
  return result;
}

namespace {
constexpr char kBankMagic[8] = {'C', 'O', 'E', 'V', 'O', 'B', 'K', '1'};
}

void save_bank(const StyleBank& bank, const std::string& bin_path) {
  if (bank.empty()) throw std::invalid_argument("empty bank");
  const std::uint32_t channels =
      static_cast<std::uint32_t>(bank.templates[0].stats.mean.size());
  for (const auto& t : bank.templates)
    if (t.stats.mean.size() != channels || t.stats.var.size() != channels)
      throw std::invalid_argument("save_bank: inconsistent channel counts");

  std::ofstream f(bin_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open bank for writing: " + bin_path);
  f.write(kBankMagic, sizeof(kBankMagic));
  const std::uint32_t version = 1;
  const std::uint32_t count = static_cast<std::uint32_t>(bank.size());
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&channels), sizeof(channels));
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& t : bank.templates) {
    const std::int32_t client = t.origin_client, group = t.origin_group;
    f.write(reinterpret_cast<const char*>(&client), sizeof(client));
    f.write(reinterpret_cast<const char*>(&group), sizeof(group));
    f.write(reinterpret_cast<const char*>(t.stats.mean.data()),
            static_cast<std::streamsize>(channels * sizeof(double)));
    f.write(reinterpret_cast<const char*>(t.stats.var.data()),
            static_cast<std::streamsize>(channels * sizeof(double)));
  }
  if (!f) throw std::runtime_error("bank write failed: " + bin_path);
}

void save_bank_json(const StyleBank& bank, const std::string& json_path) {
  nlohmann::json j;
  j["version"] = 1;
  j["templates"] = nlohmann::json::array();
  for (const auto& t : bank.templates)
    j["templates"].push_back({{"client", t.origin_client},
                              {"group", t.origin_group},
                              {"mean", t.stats.mean},
                              {"var", t.stats.var}});
  std::ofstream f(json_path);
  if (!f) throw std::runtime_error("cannot open bank json for writing: " + json_path);
  f << j.dump(2) << "\n";
}

StyleBank load_bank(const std::string& bin_path) {
  std::ifstream f(bin_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open bank: " + bin_path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kBankMagic, sizeof(magic)) != 0)
    throw std::runtime_error("bad bank header: " + bin_path);
  std::uint32_t version = 0, channels = 0, count = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&channels), sizeof(channels));
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (version != 1) throw std::runtime_error("unsupported bank version");
  StyleBank bank;
  bank.templates.resize(count);
  for (auto& t : bank.templates) {
    std::int32_t client = 0, group = 0;
    f.read(reinterpret_cast<char*>(&client), sizeof(client));
    f.read(reinterpret_cast<char*>(&group), sizeof(group));
    t.origin_client = client;
    t.origin_group = group;
    t.stats.mean.resize(channels);
    t.stats.var.resize(channels);
    f.read(reinterpret_cast<char*>(t.stats.mean.data()),
           static_cast<std::streamsize>(channels * sizeof(double)));
    f.read(reinterpret_cast<char*>(t.stats.var.data()),
           static_cast<std::streamsize>(channels * sizeof(double)));
  }
  if (!f) throw std::runtime_error("truncated bank: " + bin_path);
  return bank;
}

}  // namespace coevo::gsd
