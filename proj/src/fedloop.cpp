#include "coevo/fedloop.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "coevo/evalkit.hpp"
#include "coevo/numerics.hpp"

namespace coevo::fedloop {

using numerics::l2_norm;

ClassifierHead ClassifierHead::seeded(const std::vector<int>& identities,
                                      int embed_dim, std::uint64_t seed) {
  ClassifierHead head;
  head.identity_order = identities;
  std::sort(head.identity_order.begin(), head.identity_order.end());
  head.identity_order.erase(
      std::unique(head.identity_order.begin(), head.identity_order.end()),
      head.identity_order.end());
  head.embed_dim = embed_dim;
  head.w.resize(head.identity_order.size() * static_cast<std::size_t>(embed_dim));
  head.b.assign(head.identity_order.size(), 0.0);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  for (auto& v : head.w) v = rng.normal() * scale;
  return head;
}

int ClassifierHead::row_of(int identity) const {
  auto it = std::lower_bound(identity_order.begin(), identity_order.end(), identity);
  if (it == identity_order.end() || *it != identity)
    throw std::invalid_argument("classifier head: identity outside label set");
  return static_cast<int>(it - identity_order.begin());
}

PrototypeTable PrototypeTable::from(const std::vector<TextPrototype>& prototypes) {
  PrototypeTable table;
  std::vector<const TextPrototype*> sorted;
  sorted.reserve(prototypes.size());
  for (const auto& p : prototypes) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(),
            [](const TextPrototype* a, const TextPrototype* b) {
              return a->identity < b->identity;
            });
  for (const auto* p : sorted) {
    table.identity_order.push_back(p->identity);
    table.vecs.push_back(p->vec);
  }
  return table;
}

int PrototypeTable::row_of(int identity) const {
  auto it = std::lower_bound(identity_order.begin(), identity_order.end(), identity);
  if (it == identity_order.end() || *it != identity)
    throw std::invalid_argument("missing prototype for identity");
  return static_cast<int>(it - identity_order.begin());
}

double loss_id(const Tensor& logits, const std::vector<int>& target_rows) {
  if (logits.rank() != 2) throw std::invalid_argument("loss_id: logits must be 2-D");
  const int batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(target_rows.size()) != batch)
    throw std::invalid_argument("loss_id: target size mismatch");
  double total = 0.0;
  for (int i = 0; i < batch; ++i) {
    std::span<const double> row(logits.values.data() +
                                    static_cast<std::size_t>(i) * classes,
                                static_cast<std::size_t>(classes));
    total += numerics::softmax_cross_entropy(row, target_rows[i]);
  }
  return total / batch;
}

namespace {

struct PairwiseDistances {
  int n = 0;
  std::vector<double> d;  // n x n Euclidean distances

  double at(int i, int j) const { return d[static_cast<std::size_t>(i) * n + j]; }
};

PairwiseDistances pairwise(const std::vector<std::vector<double>>& emb) {
  PairwiseDistances out;
  out.n = static_cast<int>(emb.size());
  out.d.assign(static_cast<std::size_t>(out.n) * out.n, 0.0);
  for (int i = 0; i < out.n; ++i) {
    for (int j = i + 1; j < out.n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < emb[i].size(); ++k) {
        const double diff = emb[i][k] - emb[j][k];
        acc += diff * diff;
      }
      const double dist = std::sqrt(acc);
      out.d[static_cast<std::size_t>(i) * out.n + j] = dist;
      out.d[static_cast<std::size_t>(j) * out.n + i] = dist;
    }
  }
  return out;
}

struct TripletGradContext {
  const std::vector<std::vector<double>>* embeddings = nullptr;
  std::vector<std::vector<double>>* d_embeddings = nullptr;  // optional
};

// Shared forward/backward for both mining modes. Gradients, when requested,
// use the subgradient 0 at zero distances and inactive hinges.
double triplet_loss_impl(const std::vector<std::vector<double>>& emb,
                         const std::vector<int>& ids, double margin,
                         bool batch_hard, int* excluded_out,
                         std::vector<std::vector<double>>* d_emb) {
  const int n = static_cast<int>(emb.size());
  if (n != static_cast<int>(ids.size()))
    throw std::invalid_argument("loss_tri: label size mismatch");
  const PairwiseDistances dist = pairwise(emb);

  auto add_pair_grad = [&](int i, int j, double weight) {
    // d||v_i - v_j|| contributions scaled by weight
    const double d = dist.at(i, j);
    if (d < 1e-12 || d_emb == nullptr) return;
    for (std::size_t k = 0; k < emb[i].size(); ++k) {
      const double u = (emb[i][k] - emb[j][k]) / d;
      (*d_emb)[i][k] += weight * u;
      (*d_emb)[j][k] -= weight * u;
    }
  };

  int excluded = 0;
  if (batch_hard) {
    struct Anchor {
      int pos = -1, neg = -1;
      double dp = 0.0, dn = 0.0;
      bool valid = false;
    };
    std::vector<Anchor> anchors(n);
    int valid_count = 0;
    for (int i = 0; i < n; ++i) {
      Anchor& a = anchors[i];
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        if (ids[j] == ids[i]) {
          if (a.pos < 0 || dist.at(i, j) > a.dp) {
            a.pos = j;
            a.dp = dist.at(i, j);
          }
        } else if (a.neg < 0 || dist.at(i, j) < a.dn) {
          a.neg = j;
          a.dn = dist.at(i, j);
        }
      }
      a.valid = a.pos >= 0 && a.neg >= 0;
      if (a.valid)
        ++valid_count;
      else
        ++excluded;
    }
    if (excluded_out) *excluded_out = excluded;
    if (valid_count == 0)
      throw std::runtime_error("loss_tri: no anchor has both a positive and a negative");

    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const Anchor& a = anchors[i];
      if (!a.valid) continue;
      const double hinge = a.dp - a.dn + margin;
      if (hinge > 0.0) {
        total += hinge;
        const double g = 1.0 / valid_count;
        add_pair_grad(i, a.pos, g);
        add_pair_grad(i, a.neg, -g);
      }
    }
    return total / valid_count;
  }

  // batch-all: average the hinge over every valid (anchor, positive,
  // negative) triplet.
  long long triplets = 0;
  for (int i = 0; i < n; ++i) {
    long long pos = 0, neg = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      (ids[j] == ids[i] ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) {
      ++excluded;
      continue;
    }
    triplets += pos * neg;
  }
  if (excluded_out) *excluded_out = excluded;
  if (triplets == 0)
    throw std::runtime_error("loss_tri: no anchor has both a positive and a negative");

  double total = 0.0;
  const double g = 1.0 / static_cast<double>(triplets);
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < n; ++p) {
      if (p == i || ids[p] != ids[i]) continue;
      for (int q = 0; q < n; ++q) {
        if (ids[q] == ids[i]) continue;
        const double hinge = dist.at(i, p) - dist.at(i, q) + margin;
        if (hinge > 0.0) {
          total += hinge;
          add_pair_grad(i, p, g);
          add_pair_grad(i, q, -g);
        }
      }
    }
  }
  return total * g;
}

}  // namespace

double loss_tri(const std::vector<std::vector<double>>& embeddings,
                const std::vector<int>& identities, double margin,
                bool batch_hard, int* excluded) {
  return triplet_loss_impl(embeddings, identities, margin, batch_hard, excluded,
                           nullptr);
}

double loss_tri_with_grad(const std::vector<std::vector<double>>& embeddings,
                          const std::vector<int>& identities, double margin,
                          bool batch_hard,
                          std::vector<std::vector<double>>& d_embeddings) {
  return triplet_loss_impl(embeddings, identities, margin, batch_hard, nullptr,
                           &d_embeddings);
}

double loss_align(const std::vector<double>& embedding,
                  const PrototypeTable& prototypes, int identity, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("loss_align: tau must be > 0");
  const int target = prototypes.row_of(identity);
  const double vn = l2_norm(embedding);
  if (vn == 0.0) throw std::invalid_argument("zero-norm vector");
  std::vector<double> logits(prototypes.vecs.size());
  for (std::size_t r = 0; r < prototypes.vecs.size(); ++r) {
    double dot = 0.0;
    for (std::size_t k = 0; k < embedding.size(); ++k)
      dot += embedding[k] * prototypes.vecs[r][k];
    logits[r] = dot / (vn * tau);
  }
  return numerics::softmax_cross_entropy(logits, target);
}

namespace {

// Accumulates dL/dv for the batch-mean alignment loss and returns the mean
// loss value. Prototypes are unit norm; gradients flow only to v.
double align_batch(const std::vector<std::vector<double>>& emb,
                   const std::vector<int>& identities,
                   const PrototypeTable& prototypes, double tau, double weight,
                   std::vector<std::vector<double>>* d_emb) {
  const int batch = static_cast<int>(emb.size());
  const int rows = static_cast<int>(prototypes.vecs.size());
  double total = 0.0;
  std::vector<double> sims(rows), probs(rows);
  for (int i = 0; i < batch; ++i) {
    const int target = prototypes.row_of(identities[i]);
    const double vn = l2_norm(emb[i]);
    if (vn == 0.0) throw std::invalid_argument("zero-norm vector");
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < emb[i].size(); ++k)
        dot += emb[i][k] * prototypes.vecs[r][k];
      sims[r] = dot / vn;
    }
    std::vector<double> logits(rows);
    for (int r = 0; r < rows; ++r) logits[r] = sims[r] / tau;
    total += numerics::softmax_cross_entropy(logits, target);
    if (d_emb == nullptr) continue;
    numerics::softmax(logits, probs);
    for (int r = 0; r < rows; ++r) {
      const double g =
          weight * (probs[r] - (r == target ? 1.0 : 0.0)) / (batch * tau);
      if (g == 0.0) continue;
      // d cos(v, t_r) / dv = (t_r - s_r * v_hat) / |v|
      for (std::size_t k = 0; k < emb[i].size(); ++k)
        (*d_emb)[i][k] +=
            g * (prototypes.vecs[r][k] - sims[r] * emb[i][k] / vn) / vn;
    }
  }
  return total / batch;
}

}  // namespace

LossBreakdown view_losses_and_grads(const std::vector<Tensor>& images,
                                    const std::vector<int>& identities,
                                    const EncoderParams& encoder,
                                    const ClassifierHead& head,
                                    const PrototypeTable& prototypes,
                                    const LocalObjectiveConfig& config,
                                    bool use_align, double w_id, double w_tri,
                                    double w_align, EncoderParams* d_encoder,
                                    ClassifierHead* d_head) {
  const int batch = static_cast<int>(images.size());
  const int classes = static_cast<int>(head.identity_order.size());

  std::vector<encoders::EncodeTrace> traces(batch);
  std::vector<std::vector<double>> emb(batch);
  std::vector<int> target_rows(batch);
  for (int i = 0; i < batch; ++i) {
    traces[i] = encoders::encode_image_trace(encoder, images[i]);
    emb[i] = traces[i].embedding;
    target_rows[i] = head.row_of(identities[i]);
  }

  std::vector<std::vector<double>> d_emb(batch,
                                         std::vector<double>(encoder.embed_dim, 0.0));
  const bool want_grads = d_encoder != nullptr;

  LossBreakdown losses;

  {  // identity loss through the linear head
    Tensor logits({batch, classes});
    for (int i = 0; i < batch; ++i)
      for (int r = 0; r < classes; ++r) {
        const double* w_row = head.w.data() + static_cast<std::size_t>(r) * head.embed_dim;
        double acc = head.b[r];
        for (int k = 0; k < head.embed_dim; ++k) acc += w_row[k] * emb[i][k];
        logits.values[static_cast<std::size_t>(i) * classes + r] = acc;
      }
    losses.id = loss_id(logits, target_rows);
    if (want_grads) {
      std::vector<double> probs(classes);
      for (int i = 0; i < batch; ++i) {
        std::span<const double> row(logits.values.data() +
                                        static_cast<std::size_t>(i) * classes,
                                    static_cast<std::size_t>(classes));
        numerics::softmax(row, probs);
        for (int r = 0; r < classes; ++r) {
          const double g = w_id * (probs[r] - (r == target_rows[i] ? 1.0 : 0.0)) / batch;
          d_head->b[r] += g;
          double* dw_row = d_head->w.data() + static_cast<std::size_t>(r) * head.embed_dim;
          const double* w_row = head.w.data() + static_cast<std::size_t>(r) * head.embed_dim;
          for (int k = 0; k < head.embed_dim; ++k) {
            dw_row[k] += g * emb[i][k];
            d_emb[i][k] += g * w_row[k];
          }
        }
      }
    }
  }

  {
    std::vector<std::vector<double>> d_tri;
    if (want_grads && w_tri != 0.0)
      d_tri.assign(batch, std::vector<double>(encoder.embed_dim, 0.0));
    losses.tri = triplet_loss_impl(emb, identities, config.triplet_margin,
                                   config.batch_hard, nullptr,
                                   d_tri.empty() ? nullptr : &d_tri);
    if (!d_tri.empty())
      for (int i = 0; i < batch; ++i)
        for (int k = 0; k < encoder.embed_dim; ++k)
          d_emb[i][k] += w_tri * d_tri[i][k];
  }

  if (use_align)
    losses.align = align_batch(emb, identities, prototypes, config.tau, w_align,
                               want_grads ? &d_emb : nullptr);

  if (want_grads)
    for (int i = 0; i < batch; ++i)
      encoders::encode_image_backward(encoder, traces[i], d_emb[i], *d_encoder);

  return losses;
}

LocalObjectiveResult local_objective_and_grads(
    const std::vector<Tensor>& batch, const std::vector<Tensor>& stylized,
    const std::vector<int>& identities, const EncoderParams& encoder,
    const ClassifierHead& head, const PrototypeTable& prototypes,
    const LocalObjectiveConfig& config, bool use_align,
    EncoderParams* d_encoder, ClassifierHead* d_head) {
  if (batch.empty()) throw std::invalid_argument("local objective: empty batch");
  if (batch.size() != identities.size())
    throw std::invalid_argument("local objective: label size mismatch");
  if (!stylized.empty() && stylized.size() != batch.size())
    throw std::invalid_argument("local objective: stylized view size mismatch");
  if ((d_encoder == nullptr) != (d_head == nullptr))
    throw std::invalid_argument("local objective: gradient buffers must pair");

  LocalObjectiveResult result;
  result.orig = view_losses_and_grads(batch, identities, encoder, head,
                                      prototypes, config, use_align, 1.0, 1.0,
                                      config.lambda_align, d_encoder, d_head);
  result.objective =
      result.orig.id + result.orig.tri + config.lambda_align * result.orig.align;
  if (!stylized.empty()) {
    result.styl = view_losses_and_grads(stylized, identities, encoder, head,
                                        prototypes, config, use_align, 1.0, 1.0,
                                        config.lambda_align, d_encoder, d_head);
    result.objective +=
        result.styl.id + result.styl.tri + config.lambda_align * result.styl.align;
  }
  return result;
}

EncoderParams aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: empty update list");
  double total = 0.0;
  for (const auto& u : updates) {
    if (!u.encoder.same_shape(updates[0].encoder))
      throw std::invalid_argument("aggregate: encoder shape mismatch");
    if (u.sample_count <= 0)
      throw std::invalid_argument("aggregate: non-positive sample count");
    total += static_cast<double>(u.sample_count);
  }
  EncoderParams out = updates[0].encoder;
  std::vector<double> flat(out.param_count(), 0.0);
  for (const auto& u : updates) {
    const double weight = static_cast<double>(u.sample_count) / total;
    const std::vector<double> src = u.encoder.to_flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += weight * src[i];
  }
  out.from_flat(flat);
  return out;
}

ClassifierHead aggregate_heads(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: empty update list");
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.head.identity_order != updates[0].head.identity_order)
      throw std::invalid_argument("aggregate: head label sets differ");
    total += static_cast<double>(u.sample_count);
  }
  ClassifierHead out = updates[0].head;
  std::fill(out.w.begin(), out.w.end(), 0.0);
  std::fill(out.b.begin(), out.b.end(), 0.0);
  for (const auto& u : updates) {
    const double weight = static_cast<double>(u.sample_count) / total;
    for (std::size_t i = 0; i < out.w.size(); ++i) out.w[i] += weight * u.head.w[i];
    for (std::size_t i = 0; i < out.b.size(); ++i) out.b[i] += weight * u.head.b[i];
  }
  return out;
}

std::vector<int> pk_sample_batch(Rng& rng,
                                 const std::vector<std::vector<int>>& by_identity,
                                 int num_identities, int num_instances) {
  if (by_identity.empty())
    throw std::invalid_argument("pk_sample_batch: no identities");
  std::vector<int> identity_order(by_identity.size());
  std::iota(identity_order.begin(), identity_order.end(), 0);
  rng.shuffle(identity_order);
  const int chosen =
      std::min<int>(num_identities, static_cast<int>(identity_order.size()));

  std::vector<int> batch;
  batch.reserve(static_cast<std::size_t>(chosen) * num_instances);
  for (int p = 0; p < chosen; ++p) {
    const auto& pool = by_identity[identity_order[p]];
    std::vector<int> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int k = 0; k < num_instances; ++k) {
      if (k < static_cast<int>(pool.size()))
        batch.push_back(pool[order[k]]);
      else
        batch.push_back(pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)]);
    }
  }
  return batch;
}

namespace {

struct SgdState {
  std::vector<double> velocity;
};

void sgd_step(std::vector<double>& params, const std::vector<double>& grads,
              SgdState& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.size() != params.size())
    state.velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] + weight_decay * params[i];
    state.velocity[i] = momentum * state.velocity[i] - lr * g;
    params[i] += state.velocity[i];
  }
}

EvalOutcome evaluate_split(const NamedSplit& split, const EncoderParams& encoder) {
  std::vector<evalkit::RetrievalItem> queries, gallery;
  std::vector<std::vector<double>> all_emb;
  std::vector<int> all_ids, all_cams;
  auto embed = [&](const synthdata::Sample& s) {
    return encoders::encode_image(encoder, s.image);
  };
  for (const auto& s : *split.query) {
    auto e = embed(s);
    queries.push_back({e, s.identity, s.camera});
    all_emb.push_back(std::move(e));
    all_ids.push_back(s.identity);
    all_cams.push_back(s.camera);
  }
  for (const auto& s : *split.gallery) {
    auto e = embed(s);
    gallery.push_back({e, s.identity, s.camera});
    all_emb.push_back(std::move(e));
    all_ids.push_back(s.identity);
    all_cams.push_back(s.camera);
  }
  const evalkit::RetrievalResult retrieval = evalkit::evaluate_retrieval(queries, gallery);
  const evalkit::MarginReport margins = evalkit::margin_report(all_emb, all_ids, all_cams);

  EvalOutcome outcome;
  outcome.split = split.name;
  outcome.map = retrieval.map;
  outcome.rank1 = retrieval.rank1;
  outcome.same_id_cross_cam_dist = margins.same_id_cross_cam_mean;
  outcome.diff_id_dist = margins.diff_id_mean;
  return outcome;
}

}  // namespace

FederationResult run_federation(const FederationInputs& inputs,
                                const FedConfig& config, std::uint64_t seed) {
  if (inputs.clients == nullptr || inputs.clients->empty())
    throw std::invalid_argument("run_federation: no clients");
  const auto& clients = *inputs.clients;
  const int num_clients = static_cast<int>(clients.size());
  for (const auto& c : clients)
    if (c.empty()) throw std::invalid_argument("run_federation: empty client");

  if (config.csa_enabled &&
      static_cast<int>(inputs.prototypes.size()) != num_clients)
    throw std::invalid_argument("run_federation: prototypes missing for clients");
  if (config.anchoring == Anchoring::kDynamic && config.csa_enabled &&
      (inputs.surrogate == nullptr ||
       static_cast<int>(inputs.tokens.size()) != num_clients))
    throw std::invalid_argument("run_federation: dynamic anchoring needs tokens");

  FederationResult result;
  result.global_encoder = inputs.initial_encoder;

  const int channels = clients[0][0].image.dim(0);

  // Per-client label sets and PK pools.
  std::vector<std::vector<int>> client_identities(num_clients);
  std::vector<std::vector<std::vector<int>>> pools(num_clients);
  for (int k = 0; k < num_clients; ++k) {
    std::map<int, std::vector<int>> by_id;
    for (std::size_t i = 0; i < clients[k].size(); ++i)
      by_id[clients[k][i].identity].push_back(static_cast<int>(i));
    for (auto& [id, indices] : by_id) {
      client_identities[k].push_back(id);
      pools[k].push_back(std::move(indices));
    }
  }

  // Heads: client-local over Y_k, or one shared label space when requested.
  std::vector<int> shared_labels;
  if (config.shared_head) {
    std::set<int> all;
    for (const auto& ids : client_identities) all.insert(ids.begin(), ids.end());
    shared_labels.assign(all.begin(), all.end());
  }
  result.client_heads.resize(num_clients);
  for (int k = 0; k < num_clients; ++k) {
    const auto& labels = config.shared_head ? shared_labels : client_identities[k];
    result.client_heads[k] = ClassifierHead::seeded(
        labels, config.embed_dim,
        derive_seed(seed, {stream::kHeadInit,
                           static_cast<std::uint64_t>(config.shared_head ? 0 : k)}));
  }

  std::vector<PrototypeTable> prototypes = inputs.prototypes;
  std::vector<encoders::PromptTokens> tokens = inputs.tokens;

  auto build_bank_now = [&]() {
    std::vector<std::vector<gsd::StyleTemplate>> per_client(num_clients);
    for (int k = 0; k < num_clients; ++k) {
      const auto& groups = inputs.style_groups.at(k);
      per_client[k] = gsd::extract_templates(clients[k], groups, k);
    }
    result.bank = gsd::build_bank(per_client);
    ++result.bank_builds;
  };
  if (config.gsd_enabled) {
    if (static_cast<int>(inputs.style_groups.size()) != num_clients)
      throw std::invalid_argument("run_federation: style groups missing");
    build_bank_now();
  }

  const int decay_round = (2 * config.rounds) / 3;

  for (int round = 1; round <= config.rounds; ++round) {
    double lr = config.local.lr;
    if (decay_round > 1 && round >= decay_round) lr *= config.lr_decay_factor;

    RoundReport report;
    report.round = round;

    std::vector<ClientUpdate> updates;
    updates.reserve(num_clients);

    for (int k = 0; k < num_clients; ++k) {
      EncoderParams local = result.global_encoder;  // broadcast
      ClassifierHead& head = result.client_heads[k];

      // Dynamic anchoring re-optimizes the tokens against the current
      // encoder each round, then re-derives the prototypes; static caching
      // leaves the Phase I snapshot untouched.
      if (config.csa_enabled && config.anchoring == Anchoring::kDynamic) {
        std::vector<std::vector<double>> emb(clients[k].size());
        std::vector<int> ids(clients[k].size()), cams(clients[k].size());
        for (std::size_t i = 0; i < clients[k].size(); ++i) {
          emb[i] = encoders::encode_image(local, clients[k][i].image);
          ids[i] = clients[k][i].identity;
          cams[i] = clients[k][i].camera;
        }
        for (int step = 0; step < config.dynamic_steps; ++step) {
          csa::CsaBatchGrad grad = csa::csa_loss_and_grad(
              emb, ids, cams, tokens[k], *inputs.surrogate, inputs.csa_config);
          for (const auto& [id, g] : grad.d_tokens) {
            auto& t = tokens[k].tokens.at(id);
            for (std::size_t i = 0; i < t.size(); ++i)
              t[i] -= config.dynamic_lr * g[i];
          }
        }
        prototypes[k] = PrototypeTable::from(encoders::cache_prototypes(
            *inputs.surrogate, tokens[k], client_identities[k]));
      }

      SgdState enc_state, head_state;
      std::vector<double> enc_flat = local.to_flat();
      EncoderParams d_encoder = local;
      ClassifierHead d_head = head;

      const int batch_size = config.local.batch_p * config.local.batch_k;
      const int steps =
          std::max<int>(1, static_cast<int>(clients[k].size()) / batch_size);

      LossBreakdown orig_acc, styl_acc;
      int acc_count = 0;
      std::vector<double> epoch_objective;

      for (int epoch = 0; epoch < config.local.local_epochs; ++epoch) {
        Rng batch_rng(derive_seed(
            seed, {stream::kFedBatch, static_cast<std::uint64_t>(round),
                   static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(epoch)}));
        Rng style_rng(derive_seed(
            seed, {stream::kStyleSample, static_cast<std::uint64_t>(round),
                   static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(epoch)}));

        double epoch_total = 0.0;
        for (int step = 0; step < steps; ++step) {
          const std::vector<int> chosen = pk_sample_batch(
              batch_rng, pools[k], config.local.batch_p, config.local.batch_k);
          std::vector<Tensor> images;
          std::vector<int> ids;
          images.reserve(chosen.size());
          for (int idx : chosen) {
            images.push_back(clients[k][idx].image);
            ids.push_back(clients[k][idx].identity);
          }
          std::vector<Tensor> stylized;
          if (config.gsd_enabled) {
            stylized.reserve(images.size());
            for (const auto& img : images) {
              const gsd::StyleTemplate tmpl = gsd::sample_template(
                  result.bank, style_rng, config.scope, k, channels,
                  config.random_stat);
              stylized.push_back(gsd::stylize(img, tmpl, config.gsd_epsilon));
            }
          }

          std::fill(d_encoder.w1.begin(), d_encoder.w1.end(), 0.0);
          std::fill(d_encoder.b1.begin(), d_encoder.b1.end(), 0.0);
          std::fill(d_encoder.w2.begin(), d_encoder.w2.end(), 0.0);
          std::fill(d_encoder.b2.begin(), d_encoder.b2.end(), 0.0);
          std::fill(d_head.w.begin(), d_head.w.end(), 0.0);
          std::fill(d_head.b.begin(), d_head.b.end(), 0.0);

          const LocalObjectiveResult step_result = local_objective_and_grads(
              images, stylized, ids, local, head,
              config.csa_enabled ? prototypes[k] : PrototypeTable{},
              config.local, /*use_align=*/config.csa_enabled, &d_encoder, &d_head);

          if (config.local.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto* buf : {&d_encoder.w1, &d_encoder.b1, &d_encoder.w2,
                                    &d_encoder.b2, &d_head.w, &d_head.b})
              for (double g : *buf) sq += g * g;
            const double norm = std::sqrt(sq);
            if (norm > config.local.clip_norm) {
              const double scale = config.local.clip_norm / norm;
              for (auto* buf : {&d_encoder.w1, &d_encoder.b1, &d_encoder.w2,
                                &d_encoder.b2, &d_head.w, &d_head.b})
                for (double& g : *buf) g *= scale;
            }
          }

          enc_flat = local.to_flat();
          sgd_step(enc_flat, d_encoder.to_flat(), enc_state, lr,
                   config.local.momentum, config.local.weight_decay);
          local.from_flat(enc_flat);

          std::vector<double> head_params = head.w;
          head_params.insert(head_params.end(), head.b.begin(), head.b.end());
          std::vector<double> head_grads = d_head.w;
          head_grads.insert(head_grads.end(), d_head.b.begin(), d_head.b.end());
          sgd_step(head_params, head_grads, head_state, lr,
                   config.local.momentum, config.local.weight_decay);
          std::copy(head_params.begin(), head_params.begin() + head.w.size(),
                    head.w.begin());
          std::copy(head_params.begin() + head.w.size(), head_params.end(),
                    head.b.begin());

          orig_acc.id += step_result.orig.id;
          orig_acc.tri += step_result.orig.tri;
          orig_acc.align += step_result.orig.align;
          styl_acc.id += step_result.styl.id;
          styl_acc.tri += step_result.styl.tri;
          styl_acc.align += step_result.styl.align;
          ++acc_count;
          epoch_total += step_result.objective;
        }
        epoch_objective.push_back(epoch_total / steps);
      }

      ClientLossReport client_report;
      client_report.client_id = k;
      if (acc_count > 0) {
        client_report.orig = {orig_acc.id / acc_count, orig_acc.tri / acc_count,
                              orig_acc.align / acc_count};
        client_report.styl = {styl_acc.id / acc_count, styl_acc.tri / acc_count,
                              styl_acc.align / acc_count};
      }
      report.clients.push_back(client_report);

      ClientUpdate update;
      update.client_id = k;
      update.encoder = std::move(local);
      update.head = head;
      update.sample_count = static_cast<long long>(clients[k].size());
      update.epoch_objective = std::move(epoch_objective);
      updates.push_back(std::move(update));
    }

    result.global_encoder = aggregate(updates);
    if (config.shared_head) {
      const ClassifierHead merged = aggregate_heads(updates);
      for (auto& head : result.client_heads) head = merged;
    }

    if (config.gsd_enabled && config.refresh_bank) build_bank_now();

    const bool evaluate =
        config.eval_every > 0 &&
        (round % config.eval_every == 0 || round == config.rounds);
    if (evaluate)
      for (const auto& split : inputs.eval_splits)
        report.evals.push_back(evaluate_split(split, result.global_encoder));

    result.rounds.push_back(std::move(report));
  }

  result.final_prototypes = std::move(prototypes);
  return result;
}

}  // namespace coevo::fedloop
