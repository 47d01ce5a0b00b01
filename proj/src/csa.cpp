#include "coevo/csa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"

namespace coevo::csa {

using numerics::cosine_similarity;
using numerics::l2_norm;
using numerics::softmax_cross_entropy;

BatchIndex BatchIndex::build(const std::vector<int>& identities,
                             const std::vector<int>& cameras) {
  if (identities.size() != cameras.size())
    throw std::invalid_argument("batch index label size mismatch");
  BatchIndex idx;
  idx.cameras = cameras;
  for (std::size_t i = 0; i < identities.size(); ++i)
    idx.samples_by_identity[identities[i]].push_back(static_cast<int>(i));
  return idx;
}

double loss_i2t(const Tensor& sim, const std::vector<int>& target_col, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("loss_i2t: tau must be > 0");
  if (sim.rank() != 2) throw std::invalid_argument("loss_i2t: similarity matrix must be 2-D");
  const int rows = sim.dim(0), cols = sim.dim(1);
  if (static_cast<int>(target_col.size()) != rows)
    throw std::invalid_argument("loss_i2t: target size mismatch");
  double total = 0.0;
  std::vector<double> logits(cols);
  for (int i = 0; i < rows; ++i) {
    for (int a = 0; a < cols; ++a)
      logits[a] = sim.values[static_cast<std::size_t>(i) * cols + a] / tau;
    total += softmax_cross_entropy(logits, target_col[i]);
  }
  return total / rows;
}

double loss_t2i(const Tensor& sim, const std::vector<int>& col_ids,
                const BatchIndex& index, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("loss_t2i: tau must be > 0");
  const int rows = sim.dim(0), cols = sim.dim(1);
  if (static_cast<int>(col_ids.size()) != cols)
    throw std::invalid_argument("loss_t2i: column identity size mismatch");
  double total = 0.0;
  std::vector<double> logits(rows);
  for (int a = 0; a < cols; ++a) {
    auto it = index.samples_by_identity.find(col_ids[a]);
    if (it == index.samples_by_identity.end() || it->second.empty())
      throw std::invalid_argument("loss_t2i: empty positive set for identity");
    for (int i = 0; i < rows; ++i)
      logits[i] = sim.values[static_cast<std::size_t>(i) * cols + a] / tau;
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - m);
    const double lse = std::log(z) + m;
    double acc = 0.0;
    for (int p : it->second) acc += lse - logits[p];
    total += acc / static_cast<double>(it->second.size());
  }
  return total;
}

double loss_c3(const std::vector<double>& own_similarity, const BatchIndex& index) {
  if (own_similarity.size() != index.cameras.size())
    throw std::invalid_argument("loss_c3: similarity size mismatch");
  double total = 0.0;
  for (const auto& [identity, members] : index.samples_by_identity) {
    (void)identity;
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const int i = members[a], j = members[b];
        if (index.cameras[i] == index.cameras[j]) continue;
        const double d = own_similarity[i] - own_similarity[j];
        total += d * d;
      }
    }
  }
  return total;
}

CsaBatchGrad csa_loss_and_grad(const std::vector<std::vector<double>>& embeddings,
                               const std::vector<int>& identities,
                               const std::vector<int>& cameras,
                               const PromptTokens& tokens,
                               const TextEncoderSurrogate& surrogate,
                               const CsaConfig& config) {
  return csa_loss_and_grad_weighted(embeddings, identities, cameras, tokens,
                                    surrogate, config, 1.0, 1.0,
                                    config.lambda_c3);
}

CsaBatchGrad csa_loss_and_grad_weighted(
    const std::vector<std::vector<double>>& embeddings,
    const std::vector<int>& identities, const std::vector<int>& cameras,
    const PromptTokens& tokens, const TextEncoderSurrogate& surrogate,
    const CsaConfig& config, double w_i2t, double w_t2i, double w_c3) {
  const int batch = static_cast<int>(embeddings.size());
  if (batch == 0) throw std::invalid_argument("csa batch is empty");
  if (config.tau <= 0.0) throw std::invalid_argument("csa: tau must be > 0");

  BatchIndex index = BatchIndex::build(identities, cameras);

  std::vector<int> batch_ids;
  batch_ids.reserve(index.samples_by_identity.size());
  for (const auto& [id, members] : index.samples_by_identity) {
    (void)members;
    batch_ids.push_back(id);
  }
  const int num_ids = static_cast<int>(batch_ids.size());
  std::map<int, int> col_of;
  for (int a = 0; a < num_ids; ++a) col_of[batch_ids[a]] = a;

  // Normalized visual embeddings (frozen during Phase I).
  std::vector<std::vector<double>> v_hat(batch);
  for (int i = 0; i < batch; ++i) {
    const double n = l2_norm(embeddings[i]);
    if (n == 0.0) throw std::invalid_argument("zero-norm vector");
    v_hat[i] = embeddings[i];
    for (auto& x : v_hat[i]) x /= n;
  }

  // Raw prototype vectors; similarities normalize them on the fly, so
  // gradients can flow through the pre-normalization vector directly.
  std::vector<std::vector<double>> w(num_ids), w_hat(num_ids);
  std::vector<double> w_norm(num_ids);
  for (int a = 0; a < num_ids; ++a) {
    w[a] = surrogate.raw_prompt(tokens, batch_ids[a]);
    w_norm[a] = l2_norm(w[a]);
    if (w_norm[a] == 0.0) throw std::runtime_error("zero-norm prototype");
    w_hat[a] = w[a];
    for (auto& x : w_hat[a]) x /= w_norm[a];
  }

  const int embed_dim = surrogate.embed_dim();
  Tensor sim({batch, num_ids});
  for (int i = 0; i < batch; ++i)
    for (int a = 0; a < num_ids; ++a) {
      double dot = 0.0;
      for (int d = 0; d < embed_dim; ++d) dot += v_hat[i][d] * w_hat[a][d];
      sim.values[static_cast<std::size_t>(i) * num_ids + a] = dot;
    }

  const double tau = config.tau;
  CsaBatchGrad out;
  // dL/dsim accumulated across the three loss terms, with the same scaling
  // used for the total.
  std::vector<double> d_sim(static_cast<std::size_t>(batch) * num_ids, 0.0);
  auto sim_at = [&](int i, int a) -> double {
    return sim.values[static_cast<std::size_t>(i) * num_ids + a];
  };
  auto d_sim_at = [&](int i, int a) -> double& {
    return d_sim[static_cast<std::size_t>(i) * num_ids + a];
  };

  std::vector<int> own_col(batch);
  for (int i = 0; i < batch; ++i) own_col[i] = col_of.at(identities[i]);

  // Image-to-text term. With dedup_identities the partition function runs
  // over distinct batch identities; without it, over one prototype per
  // batch sample (duplicates weighted by multiplicity).
  std::vector<double> col_weight(num_ids, 1.0);
  if (!config.dedup_identities) {
    std::fill(col_weight.begin(), col_weight.end(), 0.0);
    for (int i = 0; i < batch; ++i) col_weight[own_col[i]] += 1.0;
  }
  {
    double total = 0.0;
    std::vector<double> z(num_ids), p(num_ids);
    for (int i = 0; i < batch; ++i) {
      double m = -1e300;
      for (int a = 0; a < num_ids; ++a) {
        z[a] = sim_at(i, a) / tau;
        if (col_weight[a] > 0.0) m = std::max(m, z[a]);
      }
      double acc = 0.0;
      for (int a = 0; a < num_ids; ++a)
        acc += col_weight[a] * std::exp(z[a] - m);
      const double lse = std::log(acc) + m;
      total += lse - z[own_col[i]];
      for (int a = 0; a < num_ids; ++a) {
        p[a] = col_weight[a] * std::exp(z[a] - lse);
        d_sim_at(i, a) += w_i2t * (p[a] - (a == own_col[i] ? 1.0 : 0.0)) / (batch * tau);
      }
    }
    out.i2t = total / batch;
  }

  // Text-to-image term: per prototype column, softmax over batch samples.
  {
    double total = 0.0;
    std::vector<double> z(batch);
    for (int a = 0; a < num_ids; ++a) {
      const auto& positives = index.samples_by_identity.at(batch_ids[a]);
      for (int i = 0; i < batch; ++i) z[i] = sim_at(i, a) / tau;
      const double m = *std::max_element(z.begin(), z.end());
      double acc = 0.0;
      for (double v : z) acc += std::exp(v - m);
      const double lse = std::log(acc) + m;
      double term = 0.0;
      for (int p : positives) term += lse - z[p];
      const double inv_p = 1.0 / static_cast<double>(positives.size());
      total += term * inv_p;
      for (int i = 0; i < batch; ++i) {
        const double soft = std::exp(z[i] - lse);
        double g = soft;
        if (std::find(positives.begin(), positives.end(), i) != positives.end())
          g -= inv_p;
        d_sim_at(i, a) += w_t2i * g / (tau * num_ids);
      }
    }
    out.t2i = total;
  }

  // Cross-camera consistency on own-prototype similarities.
  {
    std::vector<double> own(batch);
    for (int i = 0; i < batch; ++i) own[i] = sim_at(i, own_col[i]);
    out.c3 = loss_c3(own, index);
    for (const auto& [identity, members] : index.samples_by_identity) {
      (void)identity;
      for (std::size_t a = 0; a < members.size(); ++a) {
        for (std::size_t b = a + 1; b < members.size(); ++b) {
          const int i = members[a], j = members[b];
          if (index.cameras[i] == index.cameras[j]) continue;
          const double d = own[i] - own[j];
          d_sim_at(i, own_col[i]) += w_c3 * 2.0 * d;
          d_sim_at(j, own_col[j]) -= w_c3 * 2.0 * d;
        }
      }
    }
  }

  out.total = w_i2t * out.i2t + w_t2i * out.t2i / num_ids + w_c3 * out.c3;

  // Back through sim = v_hat . w / |w| into the tokens.
  for (int a = 0; a < num_ids; ++a) {
    std::vector<double> d_w(embed_dim, 0.0);
    for (int i = 0; i < batch; ++i) {
      const double g = d_sim_at(i, a);
      if (g == 0.0) continue;
      const double s = sim_at(i, a);
      for (int d = 0; d < embed_dim; ++d)
        d_w[d] += g * (v_hat[i][d] - s * w_hat[a][d]) / w_norm[a];
    }
    out.d_tokens[batch_ids[a]] = surrogate.prompt_backward(tokens, d_w);
  }
  return out;
}

CsaResult run_csa_phase(const std::vector<synthdata::Sample>& data,
                        const encoders::EncoderParams& frozen_encoder,
                        const TextEncoderSurrogate& surrogate,
                        const CsaConfig& config, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("run_csa_phase: empty client data");

  std::set<int> identity_set, camera_set;
  for (const auto& s : data) {
    identity_set.insert(s.identity);
    camera_set.insert(s.camera);
  }
  std::vector<int> identities(identity_set.begin(), identity_set.end());

  CsaResult result;
  result.c3_inert = camera_set.size() < 2;
  result.tokens = PromptTokens::seeded(identities, config.token_len,
                                       surrogate.token_dim(),
                                       derive_seed(seed, {stream::kTokenInit}));

  // The image encoder is frozen throughout Phase I, so every sample's
  // embedding is computed exactly once.
  std::vector<std::vector<double>> embeddings(data.size());
  std::vector<int> sample_ids(data.size()), sample_cams(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    embeddings[i] = encoders::encode_image(frozen_encoder, data[i].image);
    sample_ids[i] = data[i].identity;
    sample_cams[i] = data[i].camera;
  }

  CsaConfig effective = config;
  if (result.c3_inert) effective.lambda_c3 = 0.0;

  Rng batch_rng(derive_seed(seed, {stream::kCsaBatch}));
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    batch_rng.shuffle(order);
    double epoch_total = 0.0;
    int num_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<std::vector<double>> batch_emb;
      std::vector<int> batch_ids, batch_cams;
      for (std::size_t k = start; k < end; ++k) {
        batch_emb.push_back(embeddings[order[k]]);
        batch_ids.push_back(sample_ids[order[k]]);
        batch_cams.push_back(sample_cams[order[k]]);
      }
      CsaBatchGrad grad = csa_loss_and_grad(batch_emb, batch_ids, batch_cams,
                                            result.tokens, surrogate, effective);
      for (const auto& [id, g] : grad.d_tokens) {
        auto& t = result.tokens.tokens.at(id);
        for (std::size_t k = 0; k < t.size(); ++k) t[k] -= config.lr * g[k];
      }
      epoch_total += grad.total;
      ++num_batches;
    }
    result.epoch_loss.push_back(epoch_total / std::max(1, num_batches));
  }

  result.prototypes = encoders::cache_prototypes(surrogate, result.tokens, identities);
  return result;
}

double cross_camera_similarity_variance(
    const std::vector<std::vector<double>>& embeddings,
    const std::vector<int>& identities, const std::vector<int>& cameras,
    const std::vector<TextPrototype>& prototypes) {
  std::map<int, const std::vector<double>*> proto_of;
  for (const auto& p : prototypes) proto_of[p.identity] = &p.vec;

  // identity -> camera -> (sum, count) of own-prototype similarity
  std::map<int, std::map<int, std::pair<double, int>>> acc;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    auto it = proto_of.find(identities[i]);
    if (it == proto_of.end()) continue;
    const double s = cosine_similarity(embeddings[i], *it->second);
    auto& cell = acc[identities[i]][cameras[i]];
    cell.first += s;
    cell.second += 1;
  }

  double total = 0.0;
  int counted = 0;
  for (const auto& [id, cams] : acc) {
    (void)id;
    if (cams.size() < 2) continue;
    std::vector<double> means;
    means.reserve(cams.size());
    for (const auto& [cam, cell] : cams) {
      (void)cam;
      means.push_back(cell.first / cell.second);
    }
    const double mu = std::accumulate(means.begin(), means.end(), 0.0) / means.size();
    double var = 0.0;
    for (double m : means) var += (m - mu) * (m - mu);
    total += var / means.size();
    ++counted;
  }
  if (counted == 0)
    throw std::invalid_argument("no identity observed under multiple cameras");
  return total / counted;
}

}  // namespace coevo::csa
