#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "contrec/nn.hpp"

namespace testutil {

using contrec::Mat;
using contrec::ParamRefs;
using contrec::Vec;

// Central-difference check of the analytic gradients stored in ps against the
// scalar loss closure. The closure must recompute the full forward pass from
// the current parameter values. Large tensors are subsampled with a stride.
inline double max_grad_rel_err(const ParamRefs& ps, const std::function<double()>& loss,
                               double h = 1e-5, int max_entries_per_param = 48) {
  double worst = 0.0;
  for (auto* p : ps) {
    const long n = p->v.size();
    const long stride = std::max(1L, n / max_entries_per_param);
    for (long i = 0; i < n; i += stride) {
      double orig = p->v.data()[i];
      p->v.data()[i] = orig + h;
      double lp = loss();
      p->v.data()[i] = orig - h;
      double lm = loss();
      p->v.data()[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double an = p->g.data()[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

// Same check for the gradient w.r.t. a non-parameter matrix input.
inline double max_input_grad_rel_err(Mat& x, const Mat& dx,
                                     const std::function<double()>& loss,
                                     double h = 1e-5) {
  double worst = 0.0;
  for (long i = 0; i < x.size(); ++i) {
    double orig = x.data()[i];
    x.data()[i] = orig + h;
    double lp = loss();
    x.data()[i] = orig - h;
    double lm = loss();
    x.data()[i] = orig;
    double fd = (lp - lm) / (2.0 * h);
    double an = dx.data()[i];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

}  // namespace testutil
