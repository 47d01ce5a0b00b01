#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coevo/csa.hpp"
#include "coevo/encoders.hpp"
#include "coevo/gsd.hpp"
#include "coevo/synthdata.hpp"

namespace coevo::fedloop {

using encoders::EncoderParams;
using encoders::TextPrototype;
using numerics::Tensor;

struct LocalObjectiveConfig {
  double lambda_align = 1.0;    // weight of the semantic alignment term
  double triplet_margin = 0.3;  // alpha
  double tau = 0.07;
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_p = 4;     // identities per batch
  int batch_k = 4;     // instances per identity
  int local_epochs = 1;
  bool batch_hard = true;  // false selects batch-all mining
  // L2 norm cap applied jointly to the encoder+head gradient of one step;
  // 0 disables. Tiny encoders see large-magnitude stylized inputs, so
  // unclipped steps can overshoot.
  double clip_norm = 5.0;
};

enum class Anchoring { kStatic, kDynamic };

struct FedConfig {
  LocalObjectiveConfig local;
  int rounds = 40;
  int hidden_dim = 64;
  int embed_dim = 32;
  bool csa_enabled = true;
  bool gsd_enabled = true;
  gsd::SampleScope scope = gsd::SampleScope::kGlobal;
  gsd::RandomStatRange random_stat;
  double gsd_epsilon = 1e-5;
  Anchoring anchoring = Anchoring::kStatic;
  int dynamic_steps = 100;
  double dynamic_lr = 0.1;
  bool refresh_bank = false;
  bool shared_head = false;     // heads stay client-local by default
  double lr_decay_factor = 0.1; // applied from round floor(2R/3)
  int eval_every = 1;
};

// Linear identity head over a fixed label set. Clients have disjoint label
// sets, so by default heads are never aggregated across clients.
struct ClassifierHead {
  std::vector<int> identity_order;  // sorted identity labels
  int embed_dim = 0;
  std::vector<double> w;  // num_ids x embed_dim
  std::vector<double> b;  // num_ids

  static ClassifierHead seeded(const std::vector<int>& identities, int embed_dim,
                               std::uint64_t seed);
  int row_of(int identity) const;  // throws for labels outside the head
  std::size_t param_count() const { return w.size() + b.size(); }
};

// Cached prototypes arranged for fast row lookup during alignment.
struct PrototypeTable {
  std::vector<int> identity_order;
  std::vector<std::vector<double>> vecs;  // unit norm

  static PrototypeTable from(const std::vector<TextPrototype>& prototypes);
  int row_of(int identity) const;  // throws "missing prototype"
  bool empty() const { return vecs.empty(); }
};

// Mean cross entropy of head logits; targets are row indices into the head.
double loss_id(const Tensor& logits, const std::vector<int>& target_rows);

// Batch-hard triplet loss on Euclidean distances. Anchors lacking a positive
// or a negative are excluded (counted in *excluded); all excluded is an error.
double loss_tri(const std::vector<std::vector<double>>& embeddings,
                const std::vector<int>& identities, double margin,
                bool batch_hard = true, int* excluded = nullptr);

// Same loss, also accumulating dL/d embedding (buffers must be pre-sized and
// zeroed). The loss is invariant to a common shift of all embeddings, so its
// gradient lives naturally on this surface.
double loss_tri_with_grad(const std::vector<std::vector<double>>& embeddings,
                          const std::vector<int>& identities, double margin,
                          bool batch_hard,
                          std::vector<std::vector<double>>& d_embeddings);

// Semantic alignment of one embedding against all of the client's cached
// prototypes at temperature tau.
double loss_align(const std::vector<double>& embedding,
                  const PrototypeTable& prototypes, int identity, double tau);

struct LossBreakdown {
  double id = 0.0;
  double tri = 0.0;
  double align = 0.0;
};

struct LocalObjectiveResult {
  LossBreakdown orig;
  LossBreakdown styl;
  double objective = 0.0;  // sum over views of id + tri + lambda * align
};

// Losses of one view with component-weighted gradients accumulated into
// d_encoder/d_head (pass nullptr to skip gradients). Returned values are the
// raw per-component losses; the weights scale only the gradient. Prototype
// gradients are never produced; anchors stay frozen.
LossBreakdown view_losses_and_grads(const std::vector<Tensor>& images,
                                    const std::vector<int>& identities,
                                    const EncoderParams& encoder,
                                    const ClassifierHead& head,
                                    const PrototypeTable& prototypes,
                                    const LocalObjectiveConfig& config,
                                    bool use_align, double w_id, double w_tri,
                                    double w_align, EncoderParams* d_encoder,
                                    ClassifierHead* d_head);

// Objective and analytic gradients over both views. `stylized` may be empty
// (GSD disabled: single-view objective). Gradient buffers must match shapes.
LocalObjectiveResult local_objective_and_grads(
    const std::vector<Tensor>& batch, const std::vector<Tensor>& stylized,
    const std::vector<int>& identities, const EncoderParams& encoder,
    const ClassifierHead& head, const PrototypeTable& prototypes,
    const LocalObjectiveConfig& config, bool use_align,
    EncoderParams* d_encoder, ClassifierHead* d_head);

struct ClientUpdate {
  int client_id = -1;
  EncoderParams encoder;
  ClassifierHead head;
  long long sample_count = 0;
  std::vector<double> epoch_objective;
};

// Sample-weighted parameter average, encoder only. Throws on an empty list
// or mismatched shapes.
EncoderParams aggregate(const std::vector<ClientUpdate>& updates);
ClassifierHead aggregate_heads(const std::vector<ClientUpdate>& updates);

// Deterministic PK batch: up to P distinct identities with K instances each
// (instances repeat only when an identity has fewer than K samples).
std::vector<int> pk_sample_batch(Rng& rng,
                                 const std::vector<std::vector<int>>& by_identity,
                                 int num_identities, int num_instances);

struct ClientLossReport {
  int client_id = -1;
  LossBreakdown orig;
  LossBreakdown styl;
};

struct EvalOutcome {
  std::string split;
  double map = 0.0;
  double rank1 = 0.0;
  double same_id_cross_cam_dist = 0.0;
  double diff_id_dist = 0.0;
};

struct RoundReport {
  int round = 0;
  std::vector<ClientLossReport> clients;
  std::vector<EvalOutcome> evals;  // empty on non-evaluation rounds
};

struct NamedSplit {
  std::string name;
  const std::vector<synthdata::Sample>* query = nullptr;
  const std::vector<synthdata::Sample>* gallery = nullptr;
};

struct FederationInputs {
  const std::vector<std::vector<synthdata::Sample>>* clients = nullptr;
  std::vector<NamedSplit> eval_splits;
  EncoderParams initial_encoder;
  // Phase I outputs, one entry per client when CSA is enabled.
  std::vector<PrototypeTable> prototypes;
  std::vector<encoders::PromptTokens> tokens;  // consumed by dynamic anchoring
  const encoders::TextEncoderSurrogate* surrogate = nullptr;
  csa::CsaConfig csa_config;  // loss weights reused by dynamic anchoring
  // Grouping labels per client used to extract style templates (camera ids,
  // possibly corrupted, or pseudo-group labels).
  std::vector<std::vector<int>> style_groups;
};

struct FederationResult {
  EncoderParams global_encoder;
  std::vector<ClassifierHead> client_heads;
  std::vector<RoundReport> rounds;
  gsd::StyleBank bank;
  int bank_builds = 0;
  // Prototypes as of the final round (differs from the cached inputs only
  // under dynamic anchoring).
  std::vector<PrototypeTable> final_prototypes;
};

// Full round-by-round orchestration: broadcast, local SGD on the coupled
// objective, sample-weighted aggregation, periodic target evaluation.
// Deterministic for fixed (inputs, config, seed).
FederationResult run_federation(const FederationInputs& inputs,
                                const FedConfig& config, std::uint64_t seed);

}  // namespace coevo::fedloop
