#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "contrec/common.hpp"
#include "contrec/rng.hpp"
#include "contrec/serialize.hpp"

namespace contrec {

// A trainable tensor and its gradient accumulator.
struct Param {
  Mat v;
  Mat g;

  Param() = default;
  Param(int rows, int cols) : v(Mat::Zero(rows, cols)), g(Mat::Zero(rows, cols)) {}

  void init_gaussian(Rng& rng, double scale) {
    v = rng.gaussian_mat(static_cast<int>(v.rows()), static_cast<int>(v.cols())) * scale;
  }
};

using ParamRefs = std::vector<Param*>;

inline void zero_grads(const ParamRefs& ps) {
  for (Param* p : ps) p->g.setZero();
}

inline void append(ParamRefs& dst, const ParamRefs& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

inline void save_params(BinaryWriter& w, const ParamRefs& ps) {
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const Param* p : ps) w.mat(p->v);
}

inline void load_params(BinaryReader& r, const ParamRefs& ps) {
  std::uint32_t n = r.u32();
  if (n != ps.size()) throw ShapeError("checkpoint parameter count mismatch");
  for (Param* p : ps) {
    Mat m = r.mat();
    if (m.rows() != p->v.rows() || m.cols() != p->v.cols())
      throw ShapeError("checkpoint tensor shape mismatch");
    p->v = m;
  }
}

// y = x W + 1 b, rows of x are samples.
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng) : W(in, out), b(1, out) {
    W.init_gaussian(rng, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  Mat forward(const Mat& x) {
    x_ = x;
    return (x * W.v).rowwise() + b.v.row(0);
  }

  Mat backward(const Mat& dy) {
    W.g.noalias() += x_.transpose() * dy;
    b.g.row(0) += dy.colwise().sum();
    return dy * W.v.transpose();
  }

  ParamRefs params() { return {&W, &b}; }

  Param W, b;

 private:
  Mat x_;
};

// Stack of Linear layers with tanh between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<int>& widths, Rng& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers_.emplace_back(widths[i], widths[i + 1], rng);
  }

  Mat forward(const Mat& x) {
    acts_.clear();
    Mat h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) {
        h = h.array().tanh();
        acts_.push_back(h);
      }
    }
    return h;
  }

  Mat backward(const Mat& dy) {
    Mat d = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      d = layers_[i].backward(d);
      if (i > 0) d.array() *= 1.0 - acts_[i - 1].array().square();
    }
    return d;
  }

  ParamRefs params() {
    ParamRefs ps;
    for (auto& l : layers_) append(ps, l.params());
    return ps;
  }

  int out_width() const { return static_cast<int>(layers_.back().W.v.cols()); }

 private:
  std::vector<Linear> layers_;
  std::vector<Mat> acts_;  // post-tanh activations
};

// Row-wise layer normalization with affine parameters.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim) : gamma(1, dim), beta(1, dim) {
    gamma.v.setOnes();
  }

  Mat forward(const Mat& x) {
    const int d = static_cast<int>(x.cols());
    inv_std_.resize(x.rows());
    xhat_.resize(x.rows(), d);
    for (int i = 0; i < x.rows(); ++i) {
      double mean = x.row(i).mean();
      double var = (x.row(i).array() - mean).square().mean();
      inv_std_[i] = 1.0 / std::sqrt(var + 1e-8);
      xhat_.row(i) = (x.row(i).array() - mean) * inv_std_[i];
    }
    return ((xhat_.array().rowwise() * gamma.v.row(0).array()).rowwise() +
            beta.v.row(0).array())
        .matrix();
  }

  Mat backward(const Mat& dy) {
    const double d = static_cast<double>(dy.cols());
    gamma.g.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
    beta.g.row(0) += dy.colwise().sum();
    Mat dxhat = dy.array().rowwise() * gamma.v.row(0).array();
    Mat dx(dy.rows(), dy.cols());
    for (int i = 0; i < dy.rows(); ++i) {
      double s1 = dxhat.row(i).sum();
      double s2 = dxhat.row(i).dot(xhat_.row(i));
      dx.row(i) =
          inv_std_[i] * (dxhat.row(i).array() - s1 / d - xhat_.row(i).array() * s2 / d);
    }
    return dx;
  }

  ParamRefs params() { return {&gamma, &beta}; }

  Param gamma, beta;

 private:
  Vec inv_std_;
  Mat xhat_;
};

// Single-head self-attention over one sequence (rows = positions).
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(int dim, bool causal, Rng& rng)
      : wq_(dim, dim, rng), wk_(dim, dim, rng), wv_(dim, dim, rng), wo_(dim, dim, rng),
        causal_(causal) {}

  Mat forward(const Mat& x) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
    q_ = wq_.forward(x);
    k_ = wk_.forward(x);
    v_ = wv_.forward(x);
    Mat scores = q_ * k_.transpose() * scale;
    if (causal_) {
      for (int i = 0; i < scores.rows(); ++i)
        for (int j = i + 1; j < scores.cols(); ++j) scores(i, j) = -1e30;
    }
    attn_.resize(scores.rows(), scores.cols());
    for (int i = 0; i < scores.rows(); ++i) {
      Eigen::RowVectorXd row = scores.row(i);
      double m = row.maxCoeff();
      row = (row.array() - m).exp();
      attn_.row(i) = row / row.sum();
    }
    o_ = attn_ * v_;
    return wo_.forward(o_);
  }

  Mat backward(const Mat& dy) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dy.cols()));
    Mat dO = wo_.backward(dy);
    Mat dA = dO * v_.transpose();
    Mat dV = attn_.transpose() * dO;
    Mat dS(dA.rows(), dA.cols());
    for (int i = 0; i < dA.rows(); ++i) {
      double dot = dA.row(i).dot(attn_.row(i));
      dS.row(i) = attn_.row(i).array() * (dA.row(i).array() - dot);
    }
    if (causal_) {
      for (int i = 0; i < dS.rows(); ++i)
        for (int j = i + 1; j < dS.cols(); ++j) dS(i, j) = 0.0;
    }
    Mat dQ = dS * k_ * scale;
    Mat dK = dS.transpose() * q_ * scale;
    Mat dx = wq_.backward(dQ);
    dx += wk_.backward(dK);
    dx += wv_.backward(dV);
    return dx;
  }

  ParamRefs params() {
    ParamRefs ps;
    append(ps, wq_.params());
    append(ps, wk_.params());
    append(ps, wv_.params());
    append(ps, wo_.params());
    return ps;
  }

 private:
  Linear wq_, wk_, wv_, wo_;
  bool causal_ = false;
  Mat q_, k_, v_, attn_, o_;
};

// Pre-norm transformer block: x + attn(ln1(x)), then y + ffn(ln2(y)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(int dim, bool causal, Rng& rng)
      : ln1_(dim), ln2_(dim), attn_(dim, causal, rng), ffn_({dim, 4 * dim, dim}, rng) {}

  Mat forward(const Mat& x) {
    Mat y = x + attn_.forward(ln1_.forward(x));
    return y + ffn_.forward(ln2_.forward(y));
  }

  Mat backward(const Mat& dz) {
    Mat dy = dz + ln2_.backward(ffn_.backward(dz));
    return dy + ln1_.backward(attn_.backward(dy));
  }

  ParamRefs params() {
    ParamRefs ps;
    append(ps, ln1_.params());
    append(ps, attn_.params());
    append(ps, ln2_.params());
    append(ps, ffn_.params());
    return ps;
  }

 private:
  LayerNorm ln1_, ln2_;
  SelfAttention attn_;
  Mlp ffn_;
};

inline Vec softmax(const Vec& logits) {
  Vec e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

// Decoupled weight decay Adam. Owns per-parameter moment state; the parameter
// list must stay stable across steps.
class AdamW {
 public:
  AdamW(ParamRefs params, double lr, double weight_decay)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay) {
    for (Param* p : params_) {
      m_.push_back(Mat::Zero(p->v.rows(), p->v.cols()));
      v_.push_back(Mat::Zero(p->v.rows(), p->v.cols()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param* p = params_[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->g.array().square().matrix();
      Mat mhat = m_[i] / bc1;
      Mat vhat = v_[i] / bc2;
      p->v -= lr_ * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix();
      p->v -= lr_ * wd_ * p->v;
    }
  }

  void zero_grad() { zero_grads(params_); }

  double lr() const { return lr_; }

 private:
  ParamRefs params_;
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace contrec
