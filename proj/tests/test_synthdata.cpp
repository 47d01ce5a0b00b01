#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "coevo/numerics.hpp"
#include "coevo/synthdata.hpp"

using namespace coevo;
using namespace coevo::synthdata;

namespace {

DomainSpec small_spec(double noise, std::vector<CameraStyle> styles) {
  DomainSpec spec;
  spec.num_identities = 3;
  spec.num_cameras = static_cast<int>(styles.size());
  spec.samples_per_identity_per_camera = 2;
  spec.identity_dim = 4;
  spec.channels = 2;
  spec.height = 3;
  spec.width = 3;
  spec.camera_styles = std::move(styles);
  spec.noise_sigma = noise;
  return spec;
}

CameraStyle plain_style(int channels, double gain, double bias) {
  CameraStyle s;
  s.gain.assign(channels, gain);
  s.bias.assign(channels, bias);
  return s;
}

}  // namespace

TEST_CASE("zero noise makes same identity+camera samples identical") {
  auto samples = generate_domain(
      small_spec(0.0, {plain_style(2, 1.0, 0.0), plain_style(2, 1.2, 0.5)}), 11);
  for (const auto& a : samples)
    for (const auto& b : samples)
      if (a.identity == b.identity && a.camera == b.camera)
        CHECK(a.image.values == b.image.values);
}

TEST_CASE("identity style means samples equal across cameras") {
  auto samples = generate_domain(
      small_spec(0.0, {plain_style(2, 1.0, 0.0), plain_style(2, 1.0, 0.0)}), 5);
  for (const auto& a : samples)
    for (const auto& b : samples)
      if (a.identity == b.identity) CHECK(a.image.values == b.image.values);
}

TEST_CASE("bias offset shifts channel means by the offset") {
  auto samples = generate_domain(
      small_spec(0.0, {plain_style(2, 1.0, 0.0), plain_style(2, 1.0, 5.0)}), 42);
  for (const auto& a : samples) {
    if (a.camera != 0) continue;
    for (const auto& b : samples) {
      if (b.identity != a.identity || b.camera != 1) continue;
      auto sa = numerics::channel_stats(a.image);
      auto sb = numerics::channel_stats(b.image);
      for (int c = 0; c < 2; ++c)
        CHECK(sb.mean[c] - sa.mean[c] == doctest::Approx(5.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("distinct styles give pairwise distinct per-camera stats") {
  FederationConfig cfg;
  cfg.noise_sigma = 0.0;
  auto dataset = generate_federation(cfg, 9);
  const auto& client = dataset.clients[0];
  std::map<int, numerics::ChannelStats> per_cam;
  for (const auto& s : client)
    if (s.identity == client[0].identity && !per_cam.count(s.camera))
      per_cam[s.camera] = numerics::channel_stats(s.image);
  for (auto it = per_cam.begin(); it != per_cam.end(); ++it)
    for (auto jt = std::next(it); jt != per_cam.end(); ++jt)
      CHECK(it->second.mean != jt->second.mean);
}

TEST_CASE("federation identity sets are disjoint and counted") {
  FederationConfig cfg;
  cfg.num_sources = 3;
  cfg.identities_per_source = 10;
  auto dataset = generate_federation(cfg, 1);
  std::set<int> seen;
  std::size_t total = 0;
  for (const auto& client : dataset.clients) {
    std::set<int> own;
    for (const auto& s : client) own.insert(s.identity);
    for (int id : own) {
      CHECK(seen.count(id) == 0);
      seen.insert(id);
    }
    total += own.size();
  }
  CHECK(total == 30);

  std::set<int> target_ids;
  for (const auto& s : dataset.target.query) target_ids.insert(s.identity);
  for (const auto& s : dataset.target.gallery) target_ids.insert(s.identity);
  for (int id : target_ids) CHECK(seen.count(id) == 0);
}

TEST_CASE("default desk config yields 1920 source samples") {
  FederationConfig cfg;
  auto dataset = generate_federation(cfg, 1);
  std::size_t total = 0;
  for (const auto& client : dataset.clients) total += client.size();
  CHECK(total == 1920u);
}

TEST_CASE("generation is deterministic for a fixed seed") {
  FederationConfig cfg;
  cfg.identities_per_source = 4;
  cfg.samples_per_identity_per_camera = 2;
  auto a = generate_federation(cfg, 77);
  auto b = generate_federation(cfg, 77);
  REQUIRE(a.clients.size() == b.clients.size());
  for (std::size_t k = 0; k < a.clients.size(); ++k) {
    REQUIRE(a.clients[k].size() == b.clients[k].size());
    for (std::size_t i = 0; i < a.clients[k].size(); ++i) {
      CHECK(a.clients[k][i].image.values == b.clients[k][i].image.values);
      CHECK(a.clients[k][i].identity == b.clients[k][i].identity);
      CHECK(a.clients[k][i].camera == b.clients[k][i].camera);
    }
  }
  auto c = generate_federation(cfg, 78);
  CHECK(c.clients[0][0].image.values != a.clients[0][0].image.values);
}

TEST_CASE("every query identity appears in the gallery under another camera") {
  FederationConfig cfg;
  cfg.identities_per_source = 4;
  cfg.target_identities = 6;
  auto dataset = generate_federation(cfg, 5);
  for (const auto& q : dataset.target.query) {
    bool found = false;
    for (const auto& g : dataset.target.gallery)
      if (g.identity == q.identity && g.camera != q.camera) found = true;
    CHECK(found);
  }
}

TEST_CASE("single-camera target is rejected") {
  FederationConfig cfg;
  cfg.cameras_per_domain = 1;
  CHECK_THROWS_WITH_AS(generate_federation(cfg, 1), "target not evaluable",
                       std::invalid_argument);
}

TEST_CASE("protocol III test splits hold out extra identities") {
  FederationConfig cfg;
  cfg.identities_per_source = 4;
  cfg.test_identities_per_source = 3;
  auto dataset = generate_federation(cfg, 2);
  REQUIRE(dataset.source_tests.size() == 3u);
  for (std::size_t k = 0; k < dataset.clients.size(); ++k) {
    std::set<int> train_ids, test_ids;
    for (const auto& s : dataset.clients[k]) train_ids.insert(s.identity);
    for (const auto& s : dataset.source_tests[k].query) test_ids.insert(s.identity);
    for (const auto& s : dataset.source_tests[k].gallery) test_ids.insert(s.identity);
    CHECK(train_ids.size() == 4u);
    for (int id : test_ids) CHECK(train_ids.count(id) == 0);
  }
}

TEST_CASE("export writes manifest and binary of the right size") {
  FederationConfig cfg;
  cfg.identities_per_source = 2;
  cfg.samples_per_identity_per_camera = 1;
  cfg.target_identities = 2;
  auto dataset = generate_federation(cfg, 3);
  const std::string dir = "/tmp/coevo_test_export";
  std::filesystem::remove_all(dir);
  export_federation(dataset, dir);

  std::size_t count = dataset.target.query.size() + dataset.target.gallery.size();
  for (const auto& c : dataset.clients) count += c.size();
  const auto bytes = std::filesystem::file_size(std::filesystem::path(dir) / "images.bin");
  CHECK(bytes == count * 4 * 8 * 8 * sizeof(double));
  std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
  CHECK(mf.good());
}
