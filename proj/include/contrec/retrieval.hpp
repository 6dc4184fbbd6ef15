#pragma once

#include <vector>

#include "contrec/common.hpp"

namespace contrec {

// s = cosine(y_hat, q_j) * (1 + pi), pi applied when the item's semantic
// labels match the backbone prediction.
double hybrid_score(const Vec& y_hat, const Vec& q_j, bool pi_flag,
                    double pi_val = 0.05);

// K highest-scoring item ids, ties broken by smaller id. Excluded ids (the
// user's history) are never returned.
std::vector<int> rank_topk(const Vec& scores, int K,
                           const std::vector<int>& excluded = {});

struct MetricReport {
  double hr10 = 0, hr20 = 0, ndcg10 = 0, ndcg20 = 0;
  std::vector<double> per_user_hr10, per_user_hr20, per_user_ndcg10,
      per_user_ndcg20;
};

// rankings[u] is the ordered candidate list for test user u; targets[u] its
// single relevant item.
MetricReport compute_metrics(const std::vector<std::vector<int>>& rankings,
                             const std::vector<int>& targets);

}  // namespace contrec
