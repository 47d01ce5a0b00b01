#include "coevo/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "coevo/numerics.hpp"

namespace coevo::evalkit {

namespace {

std::vector<double> normalized(const std::vector<double>& v) {
  const double n = numerics::l2_norm(v);
  if (n == 0.0) throw std::invalid_argument("zero-norm vector");
  std::vector<double> out = v;
  for (auto& x : out) x /= n;
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

RetrievalResult evaluate_retrieval(const std::vector<RetrievalItem>& queries,
                                   const std::vector<RetrievalItem>& gallery) {
  if (queries.empty() || gallery.empty())
    throw std::invalid_argument("evaluate_retrieval: empty query or gallery");

  std::vector<std::vector<double>> g_hat(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i)
    g_hat[i] = normalized(gallery[i].embedding);

  RetrievalResult result;
  result.cmc.assign(gallery.size(), 0.0);
  std::vector<int> first_hit_ranks;

  for (const auto& q : queries) {
    const std::vector<double> q_hat = normalized(q.embedding);

    // Valid entries: drop same-identity same-camera junk matches.
    std::vector<int> valid;
    int relevant = 0;
    for (std::size_t i = 0; i < gallery.size(); ++i) {
      if (gallery[i].identity == q.identity && gallery[i].camera == q.camera)
        continue;
      valid.push_back(static_cast<int>(i));
      if (gallery[i].identity == q.identity) ++relevant;
    }
    if (relevant == 0) {
      ++result.excluded_queries;
      continue;
    }

    std::vector<double> sims(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i)
      sims[i] = dot(q_hat, g_hat[valid[i]]);

    std::vector<int> order(valid.size());
    std::iota(order.begin(), order.end(), 0);
    // Stable: equal similarities keep gallery order, so ranking is
    // deterministic.
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return sims[a] > sims[b]; });

    double ap = 0.0;
    int hits = 0;
    int first_hit = -1;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (gallery[valid[order[rank]]].identity != q.identity) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
      if (first_hit < 0) first_hit = static_cast<int>(rank) + 1;
    }
    ap /= relevant;
    result.average_precision.push_back(ap);
    first_hit_ranks.push_back(first_hit);
    ++result.evaluated_queries;
  }

  if (result.evaluated_queries == 0)
    throw std::runtime_error("evaluate_retrieval: every query lacks a valid match");

  result.map = std::accumulate(result.average_precision.begin(),
                               result.average_precision.end(), 0.0) /
               result.evaluated_queries;
  for (int rank : first_hit_ranks)
    for (std::size_t k = static_cast<std::size_t>(rank) - 1; k < result.cmc.size(); ++k)
      result.cmc[k] += 1.0;
  for (auto& v : result.cmc) v /= result.evaluated_queries;
  result.rank1 = result.cmc.empty() ? 0.0 : result.cmc[0];
  return result;
}

MarginReport margin_report(const std::vector<std::vector<double>>& embeddings,
                           const std::vector<int>& identities,
                           const std::vector<int>& cameras, int histogram_bins) {
  const std::size_t n = embeddings.size();
  if (identities.size() != n || cameras.size() != n)
    throw std::invalid_argument("margin_report: label size mismatch");
  if (histogram_bins < 1) throw std::invalid_argument("margin_report: bins < 1");

  std::vector<std::vector<double>> normed(n);
  for (std::size_t i = 0; i < n; ++i) normed[i] = normalized(embeddings[i]);

  MarginReport report;
  auto init_hist = [&](Histogram& h) {
    h.edges.resize(histogram_bins + 1);
    for (int b = 0; b <= histogram_bins; ++b)
      h.edges[b] = 2.0 * b / histogram_bins;
    h.counts.assign(histogram_bins, 0);
  };
  init_hist(report.same_hist);
  init_hist(report.diff_hist);

  auto bin_of = [&](double d) {
    int b = static_cast<int>(d / 2.0 * histogram_bins);
    return std::clamp(b, 0, histogram_bins - 1);
  };

  double same_sum = 0.0, diff_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dist = 1.0 - dot(normed[i], normed[j]);
      if (identities[i] == identities[j]) {
        if (cameras[i] == cameras[j]) continue;
        same_sum += dist;
        ++report.same_id_pairs;
        report.same_hist.counts[bin_of(dist)]++;
      } else {
        diff_sum += dist;
        ++report.diff_id_pairs;
        report.diff_hist.counts[bin_of(dist)]++;
      }
    }
  }
  if (report.same_id_pairs == 0 || report.diff_id_pairs == 0)
    throw std::invalid_argument("margin_report: no qualifying pairs");
  report.same_id_cross_cam_mean = same_sum / report.same_id_pairs;
  report.diff_id_mean = diff_sum / report.diff_id_pairs;
  return report;
}

}  // namespace coevo::evalkit
