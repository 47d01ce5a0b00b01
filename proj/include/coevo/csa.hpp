#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "coevo/encoders.hpp"
#include "coevo/synthdata.hpp"
#include "coevo/tensor.hpp"

namespace coevo::csa {

using encoders::PromptTokens;
using encoders::TextEncoderSurrogate;
using encoders::TextPrototype;
using numerics::Tensor;

struct CsaConfig {
  int token_len = 4;       // L
  double lambda_c3 = 0.1;  // cross-camera consistency weight
  double tau = 0.07;       // contrastive temperature
  int epochs = 200;
  double lr = 0.01;
  int batch_size = 16;
  // Deduplicate repeated identities in the image-to-text partition function
  // so one class is not counted multiple times.
  bool dedup_identities = true;
};

// Maps the identities of one mini-batch to their sample indices, plus the
// per-sample camera labels used by the consistency term.
struct BatchIndex {
  std::map<int, std::vector<int>> samples_by_identity;  // P(y)
  std::vector<int> cameras;

  static BatchIndex build(const std::vector<int>& identities,
                          const std::vector<int>& cameras);
};

// Image-to-text contrastive loss: mean over rows of the cross entropy of
// sim[i]/tau against the row's own prototype column.
double loss_i2t(const Tensor& sim, const std::vector<int>& target_col, double tau);

// Text-to-image contrastive loss, summed over prototype columns. For each
// column a (identity col_ids[a]) the partition function runs over all batch
// samples; the positive set is P(col_ids[a]).
double loss_t2i(const Tensor& sim, const std::vector<int>& col_ids,
                const BatchIndex& index, double tau);

// Cross-camera consistency: sum over identities of squared differences of
// own-prototype similarities across unordered cross-camera pairs.
double loss_c3(const std::vector<double>& own_similarity, const BatchIndex& index);

// Loss components and token gradients for one batch against frozen visual
// embeddings. total = mean i2t + (sum t2i)/num_identities + lambda_c3 * c3.
struct CsaBatchGrad {
  double total = 0.0;
  double i2t = 0.0;
  double t2i = 0.0;
  double c3 = 0.0;
  std::map<int, std::vector<double>> d_tokens;  // identity -> L*token_dim
};

CsaBatchGrad csa_loss_and_grad(const std::vector<std::vector<double>>& embeddings,
                               const std::vector<int>& identities,
                               const std::vector<int>& cameras,
                               const PromptTokens& tokens,
                               const TextEncoderSurrogate& surrogate,
                               const CsaConfig& config);

// Same computation with explicit component weights; total =
// w_i2t * mean i2t + w_t2i * (sum t2i)/num_identities + w_c3 * c3. The
// default path uses (1, 1, lambda_c3); unit weights on a single component
// isolate it for gradient validation.
CsaBatchGrad csa_loss_and_grad_weighted(
    const std::vector<std::vector<double>>& embeddings,
    const std::vector<int>& identities, const std::vector<int>& cameras,
    const PromptTokens& tokens, const TextEncoderSurrogate& surrogate,
    const CsaConfig& config, double w_i2t, double w_t2i, double w_c3);

struct CsaResult {
  PromptTokens tokens;
  std::vector<TextPrototype> prototypes;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  bool c3_inert = false;           // client had < 2 cameras
};

// Phase I: plain gradient descent on the tokens only, against the frozen
// image encoder and surrogate, followed by prototype caching.
CsaResult run_csa_phase(const std::vector<synthdata::Sample>& data,
                        const encoders::EncoderParams& frozen_encoder,
                        const TextEncoderSurrogate& surrogate,
                        const CsaConfig& config, std::uint64_t seed);

// Diagnostic behind the consistency ablation: per identity, the population
// variance of per-camera mean own-prototype similarity, averaged over
// identities.
double cross_camera_similarity_variance(
    const std::vector<std::vector<double>>& embeddings,
    const std::vector<int>& identities, const std::vector<int>& cameras,
    const std::vector<TextPrototype>& prototypes);

}  // namespace coevo::csa
