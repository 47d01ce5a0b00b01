#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "coevo/encoders.hpp"
#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"

using namespace coevo;
using namespace coevo::encoders;
using numerics::Tensor;

namespace {
Tensor seeded_input(std::uint64_t seed, int c = 2, int h = 2, int w = 3) {
  Rng rng(seed);
  Tensor x({c, h, w});
  for (auto& v : x.values) v = rng.normal();
  return x;
}
}  // namespace

TEST_CASE("zero weights give a zero embedding") {
  EncoderParams p = EncoderParams::seeded(12, 4, 3, 1);
  std::fill(p.w1.begin(), p.w1.end(), 0.0);
  std::fill(p.w2.begin(), p.w2.end(), 0.0);
  auto v = encode_image(p, seeded_input(5));
  for (double x : v) CHECK(x == 0.0);
}

TEST_CASE("encode_image is deterministic and shape checked") {
  EncoderParams p = EncoderParams::seeded(12, 4, 3, 2);
  auto a = encode_image(p, seeded_input(6));
  auto b = encode_image(p, seeded_input(6));
  CHECK(a == b);
  Tensor bad({3, 2, 3});
  CHECK_THROWS_AS(encode_image(p, bad), std::invalid_argument);
}

TEST_CASE("seed-0 encoder on seed-0 input matches the pinned fixture") {
  // Regression fixture recorded from this implementation.
  EncoderParams p = EncoderParams::seeded(12, 4, 3, 0);
  Rng rng(0);
  Tensor x({2, 2, 3});
  for (auto& v : x.values) v = rng.normal();
  auto v = encode_image(p, x);
  const std::vector<double> pinned = {-0.22639072767761112, -0.21482614012382273,
                                      -0.5134161490150283};
  REQUIRE(v.size() == pinned.size());
  for (std::size_t i = 0; i < pinned.size(); ++i)
    CHECK(v[i] == doctest::Approx(pinned[i]).epsilon(1e-15));
}

TEST_CASE("parameter flattening round trips") {
  EncoderParams p = EncoderParams::seeded(10, 5, 4, 9);
  auto flat = p.to_flat();
  EncoderParams q = EncoderParams::seeded(10, 5, 4, 1234);
  q.from_flat(flat);
  CHECK(q.w1 == p.w1);
  CHECK(q.b1 == p.b1);
  CHECK(q.w2 == p.w2);
  CHECK(q.b2 == p.b2);
  flat.pop_back();
  CHECK_THROWS_AS(q.from_flat(flat), std::invalid_argument);
}

TEST_CASE("prompt encoding depends only on the tokens") {
  auto surrogate = TextEncoderSurrogate::seeded(4, 5, 3);
  auto tokens = PromptTokens::seeded({1, 2}, 3, 4, 8);
  tokens.tokens.at(2) = tokens.tokens.at(1);
  CHECK(surrogate.encode_prompt(tokens, 1) == surrogate.encode_prompt(tokens, 2));
}

TEST_CASE("prompt embeddings are unit norm") {
  auto surrogate = TextEncoderSurrogate::seeded(6, 7, 4);
  auto tokens = PromptTokens::seeded({0, 1, 2}, 4, 6, 5);
  for (int id : {0, 1, 2}) {
    auto t = surrogate.encode_prompt(tokens, id);
    CHECK(numerics::l2_norm(t) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(surrogate.encode_prompt(tokens, 99), std::invalid_argument);
}

TEST_CASE("surrogate is frozen across calls") {
  auto surrogate = TextEncoderSurrogate::seeded(4, 5, 11);
  auto tokens = PromptTokens::seeded({7}, 2, 4, 12);
  auto first = surrogate.encode_prompt(tokens, 7);
  for (int i = 0; i < 5; ++i) CHECK(surrogate.encode_prompt(tokens, 7) == first);
}

TEST_CASE("cached prototypes are immutable snapshots") {
  auto surrogate = TextEncoderSurrogate::seeded(4, 5, 21);
  auto tokens = PromptTokens::seeded({0, 1, 2, 3}, 2, 4, 22);
  auto cached = cache_prototypes(surrogate, tokens, {0, 1, 2, 3});
  REQUIRE(cached.size() == 4u);
  for (const auto& proto : cached)
    CHECK(proto.vec == surrogate.encode_prompt(tokens, proto.identity));
  auto snapshot = cached;
  for (auto& [id, t] : tokens.tokens)
    for (auto& v : t) v += 1.0;
  for (std::size_t i = 0; i < cached.size(); ++i)
    CHECK(cached[i].vec == snapshot[i].vec);
  CHECK(cached[0].vec != surrogate.encode_prompt(tokens, cached[0].identity));
}

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint ckpt;
  ckpt.seed = 0xdeadbeef;
  Rng rng(77);
  std::vector<double> a(33), b(7);
  for (auto& v : a) v = rng.normal() * 1e30;
  for (auto& v : b) v = rng.normal() * 1e-30;
  ckpt.arrays.emplace_back("weights", a);
  ckpt.arrays.emplace_back("bias", b);
  const std::string path = "/tmp/coevo_test_ckpt.bin";
  save_checkpoint(path, ckpt);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.seed == ckpt.seed);
  REQUIRE(loaded.arrays.size() == 2u);
  CHECK(loaded.arrays[0].first == "weights");
  CHECK(std::memcmp(loaded.arrays[0].second.data(), a.data(),
                    a.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(loaded.arrays[1].second.data(), b.data(),
                    b.size() * sizeof(double)) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects garbage") {
  const std::string path = "/tmp/coevo_test_bad_ckpt.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}
