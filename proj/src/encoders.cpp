#include "coevo/encoders.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"

namespace coevo::encoders {

EncoderParams EncoderParams::seeded(int in_dim, int hidden_dim, int embed_dim,
                                    std::uint64_t seed) {
  EncoderParams p;
  p.in_dim = in_dim;
  p.hidden_dim = hidden_dim;
  p.embed_dim = embed_dim;
  p.w1.resize(static_cast<std::size_t>(hidden_dim) * in_dim);
  p.b1.assign(hidden_dim, 0.0);
  p.w2.resize(static_cast<std::size_t>(embed_dim) * hidden_dim);
  p.b2.assign(embed_dim, 0.0);
  Rng rng(seed);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (auto& v : p.w1) v = rng.normal() * s1;
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (auto& v : p.w2) v = rng.normal() * s2;
  return p;
}

std::size_t EncoderParams::param_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size();
}

std::vector<double> EncoderParams::to_flat() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  flat.insert(flat.end(), w1.begin(), w1.end());
  flat.insert(flat.end(), b1.begin(), b1.end());
  flat.insert(flat.end(), w2.begin(), w2.end());
  flat.insert(flat.end(), b2.begin(), b2.end());
  return flat;
}

void EncoderParams::from_flat(std::span<const double> flat) {
  if (flat.size() != param_count())
    throw std::invalid_argument("encoder flat parameter size mismatch");
  auto it = flat.begin();
  auto take = [&it](std::vector<double>& dst) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  take(w1);
  take(b1);
  take(w2);
  take(b2);
}

EncodeTrace encode_image_trace(const EncoderParams& params, const Tensor& x) {
  if (static_cast<int>(x.numel()) != params.in_dim)
    throw std::invalid_argument("encode_image input shape mismatch");
  EncodeTrace tr;
  tr.input = x.values;
  tr.hidden_act.resize(params.hidden_dim);
  for (int h = 0; h < params.hidden_dim; ++h) {
    const double* row = params.w1.data() + static_cast<std::size_t>(h) * params.in_dim;
    double acc = params.b1[h];
    for (int i = 0; i < params.in_dim; ++i) acc += row[i] * tr.input[i];
    tr.hidden_act[h] = std::tanh(acc);
  }
  tr.embedding.resize(params.embed_dim);
  for (int d = 0; d < params.embed_dim; ++d) {
    const double* row = params.w2.data() + static_cast<std::size_t>(d) * params.hidden_dim;
    double acc = params.b2[d];
    for (int h = 0; h < params.hidden_dim; ++h) acc += row[h] * tr.hidden_act[h];
    tr.embedding[d] = acc;
  }
  return tr;
}

std::vector<double> encode_image(const EncoderParams& params, const Tensor& x) {
  return encode_image_trace(params, x).embedding;
}

void encode_image_backward(const EncoderParams& params, const EncodeTrace& trace,
                           std::span<const double> d_embedding,
                           EncoderParams& grads) {
  std::vector<double> d_hidden(params.hidden_dim, 0.0);
  for (int d = 0; d < params.embed_dim; ++d) {
    const double g = d_embedding[d];
    double* w2_row = grads.w2.data() + static_cast<std::size_t>(d) * params.hidden_dim;
    const double* w2_src = params.w2.data() + static_cast<std::size_t>(d) * params.hidden_dim;
    grads.b2[d] += g;
    for (int h = 0; h < params.hidden_dim; ++h) {
      w2_row[h] += g * trace.hidden_act[h];
      d_hidden[h] += g * w2_src[h];
    }
  }
  for (int h = 0; h < params.hidden_dim; ++h) {
    const double a = trace.hidden_act[h];
    const double g = d_hidden[h] * (1.0 - a * a);  // tanh'
    grads.b1[h] += g;
    double* w1_row = grads.w1.data() + static_cast<std::size_t>(h) * params.in_dim;
    for (int i = 0; i < params.in_dim; ++i) w1_row[i] += g * trace.input[i];
  }
}

PromptTokens PromptTokens::seeded(const std::vector<int>& identities, int token_len,
                                  int token_dim, std::uint64_t seed) {
  PromptTokens out;
  out.token_len = token_len;
  out.token_dim = token_dim;
  Rng rng(seed);
  for (int id : identities) {
    std::vector<double> t(static_cast<std::size_t>(token_len) * token_dim);
    for (auto& v : t) v = rng.normal() * 0.02;
    out.tokens.emplace(id, std::move(t));
  }
  return out;
}

TextEncoderSurrogate TextEncoderSurrogate::seeded(int token_dim, int embed_dim,
                                                  std::uint64_t seed) {
  TextEncoderSurrogate s;
  s.token_dim_ = token_dim;
  s.embed_dim_ = embed_dim;
  s.proj_.resize(static_cast<std::size_t>(embed_dim) * token_dim);
  s.template_embedding_.resize(token_dim);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
  for (auto& v : s.proj_) v = rng.normal() * scale;
  for (auto& v : s.template_embedding_) v = rng.normal();
  return s;
}

std::vector<double> TextEncoderSurrogate::raw_prompt(const PromptTokens& tokens,
                                                     int identity) const {
  auto it = tokens.tokens.find(identity);
  if (it == tokens.tokens.end())
    throw std::invalid_argument("encode_prompt: unknown identity");
  if (tokens.token_dim != token_dim_)
    throw std::invalid_argument("encode_prompt: token dimension mismatch");

  std::vector<double> pooled(template_embedding_);
  const double inv_len = 1.0 / tokens.token_len;
  const double* tok = it->second.data();
  for (int l = 0; l < tokens.token_len; ++l)
    for (int d = 0; d < token_dim_; ++d)
      pooled[d] += inv_len * tok[static_cast<std::size_t>(l) * token_dim_ + d];

  std::vector<double> raw(embed_dim_, 0.0);
  for (int e = 0; e < embed_dim_; ++e) {
    const double* row = proj_.data() + static_cast<std::size_t>(e) * token_dim_;
    double acc = 0.0;
    for (int d = 0; d < token_dim_; ++d) acc += row[d] * pooled[d];
    raw[e] = acc;
  }
  return raw;
}

std::vector<double> TextEncoderSurrogate::encode_prompt(const PromptTokens& tokens,
                                                        int identity) const {
  std::vector<double> raw = raw_prompt(tokens, identity);
  const double norm = numerics::l2_norm(raw);
  if (norm == 0.0) throw std::runtime_error("encode_prompt: zero-norm prototype");
  for (auto& v : raw) v /= norm;
  return raw;
}

std::vector<double> TextEncoderSurrogate::prompt_backward(
    const PromptTokens& tokens, std::span<const double> d_raw) const {
  std::vector<double> d_pooled(token_dim_, 0.0);
  for (int e = 0; e < embed_dim_; ++e) {
    const double* row = proj_.data() + static_cast<std::size_t>(e) * token_dim_;
    for (int d = 0; d < token_dim_; ++d) d_pooled[d] += row[d] * d_raw[e];
  }
  std::vector<double> d_tokens(static_cast<std::size_t>(tokens.token_len) * token_dim_);
  const double inv_len = 1.0 / tokens.token_len;
  for (int l = 0; l < tokens.token_len; ++l)
    for (int d = 0; d < token_dim_; ++d)
      d_tokens[static_cast<std::size_t>(l) * token_dim_ + d] = inv_len * d_pooled[d];
  return d_tokens;
}

std::vector<TextPrototype> cache_prototypes(const TextEncoderSurrogate& surrogate,
                                            const PromptTokens& tokens,
                                            const std::vector<int>& identities) {
  std::vector<TextPrototype> out;
  out.reserve(identities.size());
  for (int id : identities)
    out.push_back({id, surrogate.encode_prompt(tokens, id)});
  return out;
}

namespace {
constexpr char kCheckpointMagic[8] = {'C', 'O', 'E', 'V', 'O', 'C', 'K', '1'};

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  f.write(reinterpret_cast<const char*>(&ckpt.seed), sizeof(ckpt.seed));
  write_u32(f, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, data] : ckpt.arrays) {
    write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<std::uint32_t>(data.size()));
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("bad checkpoint header: " + path);
  Checkpoint ckpt;
  f.read(reinterpret_cast<char*>(&ckpt.seed), sizeof(ckpt.seed));
  const std::uint32_t n = read_u32(f);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = read_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const std::uint32_t count = read_u32(f);
    std::vector<double> data(count);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    ckpt.arrays.emplace_back(std::move(name), std::move(data));
  }
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  return ckpt;
}

}  // namespace coevo::encoders
