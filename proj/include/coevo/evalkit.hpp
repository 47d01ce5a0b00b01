#pragma once

#include <vector>

namespace coevo::evalkit {

struct RetrievalItem {
  std::vector<double> embedding;
  int identity = -1;
  int camera = -1;
};

struct RetrievalResult {
  std::vector<double> average_precision;  // one entry per evaluated query
  std::vector<double> cmc;                // cmc[k-1] = CMC at rank k
  double map = 0.0;
  double rank1 = 0.0;
  int evaluated_queries = 0;
  int excluded_queries = 0;
};

// Open-set retrieval evaluation. Per query, gallery entries sharing both the
// identity and the camera of the query are excluded from the ranking (the
// standard cross-camera convention); remaining entries are ranked by
// descending cosine similarity with ties broken by gallery index. Queries
// with no valid relevant entry are excluded with a counter; all queries
// excluded is an error.
RetrievalResult evaluate_retrieval(const std::vector<RetrievalItem>& queries,
                                   const std::vector<RetrievalItem>& gallery);

struct Histogram {
  std::vector<double> edges;      // size bins + 1, spanning [0, 2]
  std::vector<long long> counts;  // size bins
};

struct MarginReport {
  double same_id_cross_cam_mean = 0.0;
  double diff_id_mean = 0.0;
  long long same_id_pairs = 0;
  long long diff_id_pairs = 0;
  Histogram same_hist;
  Histogram diff_hist;
};

// Cosine-distance statistics: same-identity cross-camera pairs versus
// different-identity pairs (all camera combinations). Requires at least one
// pair of each kind.
MarginReport margin_report(const std::vector<std::vector<double>>& embeddings,
                           const std::vector<int>& identities,
                           const std::vector<int>& cameras, int histogram_bins = 40);

}  // namespace coevo::evalkit
