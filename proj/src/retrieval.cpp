#include "contrec/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace contrec {

double hybrid_score(const Vec& y_hat, const Vec& q_j, bool pi_flag, double pi_val) {
  double ny = y_hat.norm(), nq = q_j.norm();
  if (ny <= 0.0 || nq <= 0.0) throw NumericError("hybrid_score requires nonzero vectors");
  double cosine = y_hat.dot(q_j) / (ny * nq);
  return cosine * (1.0 + (pi_flag ? pi_val : 0.0));
}

std::vector<int> rank_topk(const Vec& scores, int K, const std::vector<int>& excluded) {
  std::vector<char> skip(scores.size(), 0);
  for (int e : excluded)
    if (e >= 0 && e < scores.size()) skip[e] = 1;
  std::vector<int> ids;
  for (int i = 0; i < scores.size(); ++i)
    if (!skip[i]) ids.push_back(i);
  if (K > static_cast<int>(ids.size()))
    std::cerr << "warning: rank_topk K=" << K << " exceeds " << ids.size()
              << " candidates\n";
  const int keep = std::min<int>(K, static_cast<int>(ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + keep, ids.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;  // deterministic tie-break by item id
  });
  ids.resize(keep);
  return ids;
}

namespace {

// compensated (Kahan) mean so reduction order cannot perturb results
double kahan_mean(const std::vector<double>& xs) {
  double sum = 0.0, comp = 0.0;
  for (double x : xs) {
    double y = x - comp;
    double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

}  // namespace

MetricReport compute_metrics(const std::vector<std::vector<int>>& rankings,
                             const std::vector<int>& targets) {
  if (rankings.size() != targets.size())
    throw ShapeError("rankings/targets size mismatch");
  MetricReport r;
  for (std::size_t u = 0; u < rankings.size(); ++u) {
    if (rankings[u].empty()) throw ShapeError("user without ranking");
    int rank = 0;  // 1-based; 0 = not found
    for (std::size_t i = 0; i < rankings[u].size(); ++i) {
      if (rankings[u][i] == targets[u]) {
        rank = static_cast<int>(i) + 1;
        break;
      }
    }
    auto hr = [&](int K) { return rank > 0 && rank <= K ? 1.0 : 0.0; };
    auto ndcg = [&](int K) {
      return rank > 0 && rank <= K ? 1.0 / std::log2(rank + 1.0) : 0.0;
    };
    r.per_user_hr10.push_back(hr(10));
    r.per_user_hr20.push_back(hr(20));
    r.per_user_ndcg10.push_back(ndcg(10));
    r.per_user_ndcg20.push_back(ndcg(20));
  }
  r.hr10 = kahan_mean(r.per_user_hr10);
  r.hr20 = kahan_mean(r.per_user_hr20);
  r.ndcg10 = kahan_mean(r.per_user_ndcg10);
  r.ndcg20 = kahan_mean(r.per_user_ndcg20);
  return r;
}

}  // namespace contrec
