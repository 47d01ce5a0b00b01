#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coevo/tensor.hpp"

namespace coevo::encoders {

using numerics::Tensor;

// Trainable image encoder: flatten(C*H*W) -> hidden (tanh) -> embed.
// All clients share this architecture so parameters stay elementwise
// combinable under weighted aggregation.
struct EncoderParams {
  int in_dim = 0;
  int hidden_dim = 0;
  int embed_dim = 0;
  std::vector<double> w1;  // hidden x in, row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // embed x hidden, row-major
  std::vector<double> b2;  // embed

  static EncoderParams seeded(int in_dim, int hidden_dim, int embed_dim,
                              std::uint64_t seed);

  std::size_t param_count() const;
  std::vector<double> to_flat() const;
  void from_flat(std::span<const double> flat);

  bool same_shape(const EncoderParams& other) const {
    return in_dim == other.in_dim && hidden_dim == other.hidden_dim &&
           embed_dim == other.embed_dim;
  }
};

// Intermediate activations kept for the backward pass.
struct EncodeTrace {
  std::vector<double> input;       // in_dim
  std::vector<double> hidden_act;  // hidden_dim, tanh applied
  std::vector<double> embedding;   // embed_dim
};

// Deterministic forward pass. Throws on shape mismatch.
std::vector<double> encode_image(const EncoderParams& params, const Tensor& x);
EncodeTrace encode_image_trace(const EncoderParams& params, const Tensor& x);

// Accumulates parameter gradients for one sample given dL/d embedding.
// Gradient buffers must be pre-sized like the corresponding parameter arrays.
void encode_image_backward(const EncoderParams& params, const EncodeTrace& trace,
                           std::span<const double> d_embedding,
                           EncoderParams& grads);

// L learnable token vectors per identity.
struct PromptTokens {
  int token_len = 4;
  int token_dim = 16;
  std::map<int, std::vector<double>> tokens;  // identity -> L*token_dim

  static PromptTokens seeded(const std::vector<int>& identities, int token_len,
                             int token_dim, std::uint64_t seed);
};

// Frozen stand-in for a text tower: a seeded linear map applied to
// (template embedding + mean of the identity's tokens), then L2-normalized.
// Parameters never change after construction.
class TextEncoderSurrogate {
 public:
  static TextEncoderSurrogate seeded(int token_dim, int embed_dim,
                                     std::uint64_t seed);

  int token_dim() const { return token_dim_; }
  int embed_dim() const { return embed_dim_; }

  // Unit-norm prototype embedding for one identity. Throws on unknown
  // identity.
  std::vector<double> encode_prompt(const PromptTokens& tokens, int identity) const;

  // Pre-normalization vector w = proj * (template + mean tokens); the
  // losses differentiate through cos(v, w) directly.
  std::vector<double> raw_prompt(const PromptTokens& tokens, int identity) const;

  // Maps dL/dw back to dL/dtokens for one identity (each of the L tokens
  // receives proj^T dw / L). Output has size L*token_dim.
  std::vector<double> prompt_backward(const PromptTokens& tokens,
                                      std::span<const double> d_raw) const;

 private:
  int token_dim_ = 0;
  int embed_dim_ = 0;
  std::vector<double> proj_;                // embed x token_dim
  std::vector<double> template_embedding_;  // token_dim
};

// Frozen snapshot of one identity's prompt embedding.
struct TextPrototype {
  int identity = -1;
  std::vector<double> vec;  // unit norm
};

// Snapshots encode_prompt for every listed identity; later token mutation
// does not affect the returned prototypes.
std::vector<TextPrototype> cache_prototypes(const TextEncoderSurrogate& surrogate,
                                            const PromptTokens& tokens,
                                            const std::vector<int>& identities);

// Checkpoint format: versioned binary blob of named parameter arrays with
// shapes plus the experiment seed; round-trips bit-exactly.
struct Checkpoint {
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace coevo::encoders
