#include "coevo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <vector>

#include "coevo/csa.hpp"
#include "coevo/encoders.hpp"
#include "coevo/fedloop.hpp"
#include "coevo/gsd.hpp"
#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"

namespace coevo::gradcheck {

namespace {

using numerics::GradCheckReport;
using numerics::Tensor;

constexpr std::uint64_t kBatteryTag = 0xba77e7;

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

// ----- CSA losses: gradients with respect to the prompt tokens -----

struct CsaSetup {
  std::vector<std::vector<double>> embeddings;
  std::vector<int> ids, cams;
  encoders::PromptTokens tokens;
  encoders::TextEncoderSurrogate surrogate;
  csa::CsaConfig config;
  std::vector<int> token_ids;  // map order of tokens
};

CsaSetup make_csa_setup(std::uint64_t seed, int variant) {
  Rng rng(seed);
  CsaSetup s;
  const int embed = 5, token_dim = 4;
  const int num_ids = 3;
  const int per_id = 2 + variant % 2;
  s.config.token_len = 1 + variant % 4;
  s.config.tau = (variant % 3 == 0) ? 0.07 : (variant % 3 == 1 ? 0.5 : 1.0);
  s.config.lambda_c3 = (variant % 3) * 0.1;
  s.config.dedup_identities = variant % 2 == 0;
  for (int y = 0; y < num_ids; ++y) {
    s.token_ids.push_back(y);
    for (int k = 0; k < per_id; ++k) {
      s.ids.push_back(y);
      s.cams.push_back(rng.uniform_int(0, 2));
      s.embeddings.push_back(random_vector(rng, embed));
    }
  }
  s.surrogate = encoders::TextEncoderSurrogate::seeded(token_dim, embed,
                                                       mix_u64(seed ^ 0x5u));
  s.tokens = encoders::PromptTokens::seeded(s.token_ids, s.config.token_len,
                                            token_dim, mix_u64(seed ^ 0x6u));
  return s;
}

std::vector<double> flatten_tokens(const encoders::PromptTokens& tokens) {
  std::vector<double> flat;
  for (const auto& [id, t] : tokens.tokens) {
    (void)id;
    flat.insert(flat.end(), t.begin(), t.end());
  }
  return flat;
}

void unflatten_tokens(std::span<const double> flat, encoders::PromptTokens& tokens) {
  std::size_t cursor = 0;
  for (auto& [id, t] : tokens.tokens) {
    (void)id;
    std::copy(flat.begin() + cursor, flat.begin() + cursor + t.size(), t.begin());
    cursor += t.size();
  }
}

GradCheckReport check_csa(std::uint64_t seed, int variant, double w_i2t,
                          double w_t2i, double w_c3, double epsilon) {
  const CsaSetup setup = make_csa_setup(seed, variant);
  auto value = [&](std::span<const double> flat) {
    encoders::PromptTokens t = setup.tokens;
    unflatten_tokens(flat, t);
    return csa::csa_loss_and_grad_weighted(setup.embeddings, setup.ids, setup.cams,
                                           t, setup.surrogate, setup.config, w_i2t,
                                           w_t2i, w_c3)
        .total;
  };
  auto grad = [&](std::span<const double> flat) {
    encoders::PromptTokens t = setup.tokens;
    unflatten_tokens(flat, t);
    const csa::CsaBatchGrad g = csa::csa_loss_and_grad_weighted(
        setup.embeddings, setup.ids, setup.cams, t, setup.surrogate, setup.config,
        w_i2t, w_t2i, w_c3);
    std::vector<double> out;
    for (const auto& [id, tok] : t.tokens) {
      auto it = g.d_tokens.find(id);
      if (it != g.d_tokens.end())
        out.insert(out.end(), it->second.begin(), it->second.end());
      else
        out.insert(out.end(), tok.size(), 0.0);
    }
    return out;
  };
  const std::vector<double> point = flatten_tokens(setup.tokens);
  return numerics::grad_check(value, grad, point, epsilon);
}

GradCheckReport check_prompt_encoder(std::uint64_t seed, double epsilon) {
  Rng rng(seed);
  const int embed = 5, token_dim = 4, token_len = 3;
  auto surrogate =
      encoders::TextEncoderSurrogate::seeded(token_dim, embed, mix_u64(seed ^ 0x7u));
  auto tokens = encoders::PromptTokens::seeded({42}, token_len, token_dim,
                                               mix_u64(seed ^ 0x8u));
  const std::vector<double> probe = random_vector(rng, embed);

  auto value = [&](std::span<const double> flat) {
    encoders::PromptTokens t = tokens;
    unflatten_tokens(flat, t);
    const std::vector<double> enc = surrogate.encode_prompt(t, 42);
    double acc = 0.0;
    for (int i = 0; i < embed; ++i) acc += probe[i] * enc[i];
    return acc;
  };
  auto grad = [&](std::span<const double> flat) {
    encoders::PromptTokens t = tokens;
    unflatten_tokens(flat, t);
    const std::vector<double> raw = surrogate.raw_prompt(t, 42);
    const double norm = numerics::l2_norm(raw);
    std::vector<double> unit = raw;
    for (auto& v : unit) v /= norm;
    double along = 0.0;
    for (int i = 0; i < embed; ++i) along += probe[i] * unit[i];
    std::vector<double> d_raw(embed);
    for (int i = 0; i < embed; ++i) d_raw[i] = (probe[i] - along * unit[i]) / norm;
    return surrogate.prompt_backward(t, d_raw);
  };
  return numerics::grad_check(value, grad, flatten_tokens(tokens), epsilon);
}

// ----- Federated losses: gradients with respect to encoder and head -----

struct FedSetup {
  std::vector<Tensor> images;
  std::vector<Tensor> stylized;
  std::vector<int> ids;
  encoders::EncoderParams encoder;
  fedloop::ClassifierHead head;
  fedloop::PrototypeTable prototypes;
  fedloop::LocalObjectiveConfig config;
};

// The mined triplet loss is only piecewise smooth: finite differences are
// meaningless within epsilon of an argmax tie or a hinge corner. A setup is
// "generic" when every triplet hinge and every mining decision sits at least
// `gap` away from a switch.
bool triplet_generic(const std::vector<std::vector<double>>& emb,
                     const std::vector<int>& ids, double margin, double gap) {
  const int n = static_cast<int>(emb.size());
  std::vector<double> dist(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < emb[i].size(); ++k) {
        const double d = emb[i][k] - emb[j][k];
        acc += d * d;
      }
      dist[static_cast<std::size_t>(i) * n + j] = std::sqrt(acc);
    }
  auto d = [&](int i, int j) { return dist[static_cast<std::size_t>(i) * n + j]; };
  for (int i = 0; i < n; ++i) {
    std::vector<double> pos, neg;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      (ids[j] == ids[i] ? pos : neg).push_back(d(i, j));
    }
    for (double dp : pos)
      for (double dn : neg)
        if (std::abs(dp - dn + margin) < gap) return false;
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    if (pos.size() >= 2 && pos[pos.size() - 1] - pos[pos.size() - 2] < gap)
      return false;
    if (neg.size() >= 2 && neg[1] - neg[0] < gap) return false;
  }
  return true;
}

FedSetup make_fed_setup(std::uint64_t seed, int variant) {
  const int channels = 2, height = 2, width = 3;
  const int in_dim = channels * height * width;
  const int hidden = 5, embed = 4;
  const int num_ids = 3, per_id = 2;
  constexpr double kGenericGap = 1e-3;  // 100x the probe epsilon

  for (int attempt = 0;; ++attempt) {
    Rng rng(mix_u64(seed + static_cast<std::uint64_t>(attempt) * 0x9e37ULL));
    FedSetup s;
    s.encoder = encoders::EncoderParams::seeded(in_dim, hidden, embed,
                                                mix_u64(seed ^ 0x9u));
    std::vector<int> labels;
    for (int y = 0; y < num_ids; ++y) labels.push_back(100 + y);
    s.head = fedloop::ClassifierHead::seeded(labels, embed, mix_u64(seed ^ 0xau));

    std::vector<encoders::TextPrototype> protos;
    for (int label : labels) {
      std::vector<double> v = random_vector(rng, embed);
      const double n = numerics::l2_norm(v);
      for (auto& x : v) x /= n;
      protos.push_back({label, v});
    }
    s.prototypes = fedloop::PrototypeTable::from(protos);

    for (int y = 0; y < num_ids; ++y)
      for (int k = 0; k < per_id; ++k) {
        s.ids.push_back(100 + y);
        Tensor img({channels, height, width});
        for (auto& v : img.values) v = rng.normal();
        s.images.push_back(std::move(img));
      }

    // Fixed style target so the stylized view is a constant map of the
    // parameters under test.
    gsd::StyleTemplate tmpl;
    tmpl.stats.mean = random_vector(rng, channels, 0.5);
    tmpl.stats.var = {0.5 + rng.uniform(), 0.5 + rng.uniform()};
    for (const auto& img : s.images)
      s.stylized.push_back(gsd::stylize(img, tmpl, 1e-5));

    s.config.triplet_margin = 0.2 + 0.1 * (variant % 3);
    s.config.tau = (variant % 2 == 0) ? 0.07 : 0.3;
    s.config.lambda_align = 0.5 + 0.5 * (variant % 2);
    s.config.batch_hard = variant % 2 == 0;

    bool generic = true;
    for (const auto& view : {&s.images, &s.stylized}) {
      std::vector<std::vector<double>> emb;
      for (const auto& img : *view)
        emb.push_back(encoders::encode_image(s.encoder, img));
      if (!triplet_generic(emb, s.ids, s.config.triplet_margin, kGenericGap)) {
        generic = false;
        break;
      }
    }
    if (generic || attempt >= 200) return s;
  }
}

std::vector<double> fed_params(const FedSetup& s) {
  std::vector<double> flat = s.encoder.to_flat();
  flat.insert(flat.end(), s.head.w.begin(), s.head.w.end());
  flat.insert(flat.end(), s.head.b.begin(), s.head.b.end());
  return flat;
}

void fed_unflatten(std::span<const double> flat, encoders::EncoderParams& enc,
                   fedloop::ClassifierHead& head) {
  const std::size_t n = enc.param_count();
  enc.from_flat(flat.subspan(0, n));
  std::copy(flat.begin() + n, flat.begin() + n + head.w.size(), head.w.begin());
  std::copy(flat.begin() + n + head.w.size(), flat.end(), head.b.begin());
}

// Eq-8-style check on the loss's own surface: the embeddings. The loss is
// invariant to a common shift of all embeddings, so encoder-bias directions
// have exactly zero gradient and finite differences there measure only ulp
// noise; on the embedding surface every direction is informative. The
// composition through the encoder is covered by the other losses and the
// full objective.
GradCheckReport check_triplet(std::uint64_t seed, int variant, double epsilon) {
  const int embed = 4, num_ids = 3, per_id = 2;
  const double margin = 0.2 + 0.1 * (variant % 3);
  const bool batch_hard = variant % 2 == 0;

  std::vector<int> ids;
  std::vector<std::vector<double>> emb;
  for (int attempt = 0;; ++attempt) {
    Rng rng(mix_u64(seed + static_cast<std::uint64_t>(attempt) * 0x51edULL));
    ids.clear();
    emb.clear();
    for (int y = 0; y < num_ids; ++y)
      for (int k = 0; k < per_id; ++k) {
        ids.push_back(y);
        emb.push_back(random_vector(rng, embed));
      }
    if (triplet_generic(emb, ids, margin, 1e-3) || attempt >= 200) break;
  }

  const int batch = static_cast<int>(emb.size());
  std::vector<double> point;
  for (const auto& v : emb) point.insert(point.end(), v.begin(), v.end());

  auto rebuild = [&](std::span<const double> flat) {
    std::vector<std::vector<double>> e(batch, std::vector<double>(embed));
    for (int i = 0; i < batch; ++i)
      for (int d = 0; d < embed; ++d)
        e[i][d] = flat[static_cast<std::size_t>(i) * embed + d];
    return e;
  };
  auto value = [&](std::span<const double> flat) {
    return fedloop::loss_tri(rebuild(flat), ids, margin, batch_hard);
  };
  auto grad = [&](std::span<const double> flat) {
    const auto e = rebuild(flat);
    std::vector<std::vector<double>> d_emb(batch, std::vector<double>(embed, 0.0));
    fedloop::loss_tri_with_grad(e, ids, margin, batch_hard, d_emb);
    std::vector<double> out;
    for (const auto& v : d_emb) out.insert(out.end(), v.begin(), v.end());
    return out;
  };
  return numerics::grad_check(value, grad, point, epsilon);
}

GradCheckReport check_fed_view(std::uint64_t seed, int variant, double w_id,
                               double w_tri, double w_align, double epsilon) {
  const FedSetup setup = make_fed_setup(seed, variant);
  auto value = [&](std::span<const double> flat) {
    encoders::EncoderParams enc = setup.encoder;
    fedloop::ClassifierHead head = setup.head;
    fed_unflatten(flat, enc, head);
    const fedloop::LossBreakdown losses = fedloop::view_losses_and_grads(
        setup.images, setup.ids, enc, head, setup.prototypes, setup.config,
        /*use_align=*/w_align != 0.0, w_id, w_tri, w_align, nullptr, nullptr);
    return w_id * losses.id + w_tri * losses.tri + w_align * losses.align;
  };
  auto grad = [&](std::span<const double> flat) {
    encoders::EncoderParams enc = setup.encoder;
    fedloop::ClassifierHead head = setup.head;
    fed_unflatten(flat, enc, head);
    encoders::EncoderParams d_enc = enc;
    std::fill(d_enc.w1.begin(), d_enc.w1.end(), 0.0);
    std::fill(d_enc.b1.begin(), d_enc.b1.end(), 0.0);
    std::fill(d_enc.w2.begin(), d_enc.w2.end(), 0.0);
    std::fill(d_enc.b2.begin(), d_enc.b2.end(), 0.0);
    fedloop::ClassifierHead d_head = head;
    std::fill(d_head.w.begin(), d_head.w.end(), 0.0);
    std::fill(d_head.b.begin(), d_head.b.end(), 0.0);
    fedloop::view_losses_and_grads(setup.images, setup.ids, enc, head,
                                   setup.prototypes, setup.config,
                                   /*use_align=*/w_align != 0.0, w_id, w_tri,
                                   w_align, &d_enc, &d_head);
    std::vector<double> flat_grad = d_enc.to_flat();
    flat_grad.insert(flat_grad.end(), d_head.w.begin(), d_head.w.end());
    flat_grad.insert(flat_grad.end(), d_head.b.begin(), d_head.b.end());
    return flat_grad;
  };
  return numerics::grad_check(value, grad, fed_params(setup), epsilon);
}

GradCheckReport check_local_objective(std::uint64_t seed, int variant,
                                      double epsilon) {
  const FedSetup setup = make_fed_setup(seed, variant);
  auto value = [&](std::span<const double> flat) {
    encoders::EncoderParams enc = setup.encoder;
    fedloop::ClassifierHead head = setup.head;
    fed_unflatten(flat, enc, head);
    return fedloop::local_objective_and_grads(setup.images, setup.stylized,
                                              setup.ids, enc, head,
                                              setup.prototypes, setup.config,
                                              /*use_align=*/true, nullptr, nullptr)
        .objective;
  };
  auto grad = [&](std::span<const double> flat) {
    encoders::EncoderParams enc = setup.encoder;
    fedloop::ClassifierHead head = setup.head;
    fed_unflatten(flat, enc, head);
    encoders::EncoderParams d_enc = enc;
    std::fill(d_enc.w1.begin(), d_enc.w1.end(), 0.0);
    std::fill(d_enc.b1.begin(), d_enc.b1.end(), 0.0);
    std::fill(d_enc.w2.begin(), d_enc.w2.end(), 0.0);
    std::fill(d_enc.b2.begin(), d_enc.b2.end(), 0.0);
    fedloop::ClassifierHead d_head = head;
    std::fill(d_head.w.begin(), d_head.w.end(), 0.0);
    std::fill(d_head.b.begin(), d_head.b.end(), 0.0);
    fedloop::local_objective_and_grads(setup.images, setup.stylized, setup.ids,
                                       enc, head, setup.prototypes, setup.config,
                                       /*use_align=*/true, &d_enc, &d_head);
    std::vector<double> flat_grad = d_enc.to_flat();
    flat_grad.insert(flat_grad.end(), d_head.w.begin(), d_head.w.end());
    flat_grad.insert(flat_grad.end(), d_head.b.begin(), d_head.b.end());
    return flat_grad;
  };
  return numerics::grad_check(value, grad, fed_params(setup), epsilon);
}

GradCheckReport check_quadratic(std::uint64_t seed, double epsilon) {
  Rng rng(seed);
  const std::vector<double> point = random_vector(rng, 8);
  auto value = [](std::span<const double> w) {
    double acc = 0.0;
    for (double x : w) acc += x * x;
    return acc;
  };
  auto grad = [](std::span<const double> w) {
    std::vector<double> g(w.begin(), w.end());
    for (auto& x : g) x *= 2.0;
    return g;
  };
  return numerics::grad_check(value, grad, point, epsilon);
}

GradCheckReport check_softmax_xent(std::uint64_t seed, double epsilon) {
  Rng rng(seed);
  const std::vector<double> point = random_vector(rng, 5);
  const int target = rng.uniform_int(0, 4);
  auto value = [target](std::span<const double> logits) {
    return numerics::softmax_cross_entropy(logits, target);
  };
  auto grad = [target](std::span<const double> logits) {
    std::vector<double> p(logits.size());
    numerics::softmax(logits, p);
    p[target] -= 1.0;
    return p;
  };
  return numerics::grad_check(value, grad, point, epsilon);
}

}  // namespace

std::vector<BatteryEntry> run_battery(int configs_per_loss, std::uint64_t seed,
                                      double epsilon, double tolerance) {
  struct Case {
    std::string name;
    std::function<GradCheckReport(std::uint64_t, int)> run;
  };
  const std::vector<Case> cases = {
      {"quadratic",
       [&](std::uint64_t s, int) { return check_quadratic(s, epsilon); }},
      {"softmax_cross_entropy",
       [&](std::uint64_t s, int) { return check_softmax_xent(s, epsilon); }},
      {"csa_i2t", [&](std::uint64_t s, int v) { return check_csa(s, v, 1, 0, 0, epsilon); }},
      {"csa_t2i", [&](std::uint64_t s, int v) { return check_csa(s, v, 0, 1, 0, epsilon); }},
      {"csa_c3", [&](std::uint64_t s, int v) { return check_csa(s, v, 0, 0, 1, epsilon); }},
      {"csa_total",
       [&](std::uint64_t s, int v) { return check_csa(s, v, 1, 1, 0.1 + 0.1 * (v % 3), epsilon); }},
      {"prompt_encoder",
       [&](std::uint64_t s, int) { return check_prompt_encoder(s, epsilon); }},
      {"loss_id", [&](std::uint64_t s, int v) { return check_fed_view(s, v, 1, 0, 0, epsilon); }},
      {"loss_tri", [&](std::uint64_t s, int v) { return check_triplet(s, v, epsilon); }},
      {"loss_align",
       [&](std::uint64_t s, int v) { return check_fed_view(s, v, 0, 0, 1, epsilon); }},
      {"local_objective",
       [&](std::uint64_t s, int v) { return check_local_objective(s, v, epsilon); }},
  };

  std::vector<BatteryEntry> entries;
  for (const auto& c : cases) {
    BatteryEntry entry;
    entry.name = c.name;
    entry.configs = configs_per_loss;
    for (int v = 0; v < configs_per_loss; ++v) {
      const std::uint64_t s =
          derive_seed(seed, {kBatteryTag, static_cast<std::uint64_t>(v)});
      const GradCheckReport report = c.run(s, v);
      if (std::getenv("COEVO_GRADCHECK_VERBOSE") && report.max_rel_error > tolerance)
        std::fprintf(stderr, "  %s config %d: %.3e\n", c.name.c_str(), v,
                     report.max_rel_error);
      entry.worst_rel_error = std::max(entry.worst_rel_error, report.max_rel_error);
    }
    entry.pass = entry.worst_rel_error < tolerance;
    entries.push_back(std::move(entry));
  }
  return entries;
}

std::string format_battery(const std::vector<BatteryEntry>& entries) {
  std::ostringstream out;
  char line[128];
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line), "%-24s configs=%-3d worst=%.3e  %s\n",
                  e.name.c_str(), e.configs, e.worst_rel_error,
                  e.pass ? "PASS" : "FAIL");
    out << line;
  }
  return out.str();
}

}  // namespace coevo::gradcheck
