#include "contrec/diffusion.hpp"

#include <cmath>
#include <iostream>

#include "contrec/serialize.hpp"

namespace contrec {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end,
                             int inference_steps) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) && T > 1)
    throw ConfigError("schedule needs 0 < beta_start < beta_end < 1");
  if (inference_steps > T) throw ConfigError("inference_steps must be <= T");

  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = T == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * t / (T - 1.0);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  for (int t = 1; t < T; ++t) {
    if (!(s.beta[t] > s.beta[t - 1]) || !(s.alpha_bar[t] < s.alpha_bar[t - 1]))
      throw ConfigError("noise schedule monotonicity violated");
  }

  // evenly spaced rounding of 1..T down to inference_steps indices
  int last = -1;
  for (int i = 0; i < inference_steps; ++i) {
    int idx = inference_steps == 1
                  ? T
                  : static_cast<int>(std::lround(1.0 + (T - 1.0) * i / (inference_steps - 1.0)));
    if (idx <= last) idx = last + 1;
    s.inference_steps.push_back(idx);
    last = idx;
  }
  return s;
}

Vec forward_noise(const Vec& y0, int t, const Vec& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T)
    throw ConfigError("diffusion step out of range: " + std::to_string(t));
  double ab = sched.alpha_bar[t - 1];
  return std::sqrt(ab) * y0 + std::sqrt(1.0 - ab) * eps;
}

double dispersive_loss(const Mat& h, double iota) {
  const int B = static_cast<int>(h.rows());
  if (B < 2) {
    std::cerr << "warning: dispersive loss needs B >= 2, returning 0\n";
    return 0.0;
  }
  double sum = 0.0;
  for (int i = 0; i < B; ++i)
    for (int b = 0; b < B; ++b)
      sum += std::exp(-(h.row(i) - h.row(b)).squaredNorm() / iota);
  return std::log(sum / (static_cast<double>(B) * B));
}

Mat dispersive_loss_grad(const Mat& h, double iota) {
  const int B = static_cast<int>(h.rows());
  Mat g = Mat::Zero(h.rows(), h.cols());
  if (B < 2) return g;
  double sum = 0.0;
  Mat w(B, B);
  for (int i = 0; i < B; ++i)
    for (int b = 0; b < B; ++b) {
      w(i, b) = std::exp(-(h.row(i) - h.row(b)).squaredNorm() / iota);
      sum += w(i, b);
    }
  for (int i = 0; i < B; ++i)
    for (int b = 0; b < B; ++b)
      g.row(i) += (-4.0 / (iota * sum)) * w(i, b) * (h.row(i) - h.row(b));
  return g;
}

// ---------------------------------------------------------------------------

Mat PairedAttention::forward(const Mat& x) {
  if (x.rows() % 2 != 0) throw ShapeError("paired attention needs an even row count");
  const int B = static_cast<int>(x.rows()) / 2;
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  q_ = wq_.forward(x);
  k_ = wk_.forward(x);
  v_ = wv_.forward(x);
  attn_.resize(B, 4);
  o_.resize(x.rows(), x.cols());
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < 2; ++i) {
      double s0 = q_.row(2 * b + i).dot(k_.row(2 * b)) * scale;
      double s1 = q_.row(2 * b + i).dot(k_.row(2 * b + 1)) * scale;
      double m = std::max(s0, s1);
      double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
      double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      attn_(b, 2 * i) = a0;
      attn_(b, 2 * i + 1) = a1;
      o_.row(2 * b + i) = a0 * v_.row(2 * b) + a1 * v_.row(2 * b + 1);
    }
  }
  return wo_.forward(o_);
}

Mat PairedAttention::backward(const Mat& dy) {
  const int B = static_cast<int>(dy.rows()) / 2;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dy.cols()));
  Mat dO = wo_.backward(dy);
  Mat dQ = Mat::Zero(q_.rows(), q_.cols());
  Mat dK = Mat::Zero(k_.rows(), k_.cols());
  Mat dV = Mat::Zero(v_.rows(), v_.cols());
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < 2; ++i) {
      double a0 = attn_(b, 2 * i), a1 = attn_(b, 2 * i + 1);
      double da0 = dO.row(2 * b + i).dot(v_.row(2 * b));
      double da1 = dO.row(2 * b + i).dot(v_.row(2 * b + 1));
      dV.row(2 * b) += a0 * dO.row(2 * b + i);
      dV.row(2 * b + 1) += a1 * dO.row(2 * b + i);
      double dot = da0 * a0 + da1 * a1;
      double ds0 = a0 * (da0 - dot), ds1 = a1 * (da1 - dot);
      dQ.row(2 * b + i) += (ds0 * k_.row(2 * b) + ds1 * k_.row(2 * b + 1)) * scale;
      dK.row(2 * b) += ds0 * q_.row(2 * b + i) * scale;
      dK.row(2 * b + 1) += ds1 * q_.row(2 * b + i) * scale;
    }
  }
  Mat dx = wq_.backward(dQ);
  dx += wk_.backward(dK);
  dx += wv_.backward(dV);
  return dx;
}

ParamRefs PairedAttention::params() {
  ParamRefs ps;
  append(ps, wq_.params());
  append(ps, wk_.params());
  append(ps, wv_.params());
  append(ps, wo_.params());
  return ps;
}

Mat TwoTokenBlock::forward(const Mat& x) {
  Mat y = x + attn_.forward(ln1_.forward(x));
  return y + ffn_.forward(ln2_.forward(y));
}

Mat TwoTokenBlock::backward(const Mat& dz) {
  Mat dy = dz + ln2_.backward(ffn_.backward(dz));
  return dy + ln1_.backward(attn_.backward(dy));
}

ParamRefs TwoTokenBlock::params() {
  ParamRefs ps;
  append(ps, ln1_.params());
  append(ps, attn_.params());
  append(ps, ln2_.params());
  append(ps, ffn_.params());
  return ps;
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng)
    : cfg_(cfg),
      cond_proj_(cfg.D_c, cfg.E, rng),
      time_emb_(cfg.T, cfg.E),
      encoder_(cfg.E, rng),
      in_proj_(cfg.d, cfg.E, rng),
      fusion_(2 * cfg.E, cfg.H, rng),
      out_proj_(cfg.H, cfg.d, rng) {
  time_emb_.init_gaussian(rng, 0.02);
  phi_ = rng.gaussian_vec(cfg.D_c);
}

DenoiserOut Denoiser::forward(const Mat& y_t, const Mat& c, const std::vector<int>& t) {
  const int B = static_cast<int>(y_t.rows());
  if (c.rows() != B || static_cast<int>(t.size()) != B)
    throw ShapeError("denoiser batch size mismatch");
  t_ = t;

  Mat cond_tok = cond_proj_.forward(c);
  Mat x(2 * B, cfg_.E);
  for (int b = 0; b < B; ++b) {
    if (t[b] < 1 || t[b] > cfg_.T)
      throw ConfigError("denoiser time step out of range");
    x.row(2 * b) = cond_tok.row(b);
    x.row(2 * b + 1) = time_emb_.v.row(t[b] - 1);
  }
  Mat enc = encoder_.forward(x);
  context_.resize(B, cfg_.E);
  for (int b = 0; b < B; ++b)
    context_.row(b) = 0.5 * (enc.row(2 * b) + enc.row(2 * b + 1));

  y_proj_ = in_proj_.forward(y_t);
  Mat fused_in(B, 2 * cfg_.E);
  fused_in << y_proj_, context_;
  fused_act_ = fusion_.forward(fused_in).array().tanh();

  DenoiserOut out;
  out.h = fused_act_;
  out.eps_hat = out_proj_.forward(fused_act_);
  if (!out.eps_hat.allFinite())
    throw NumericError("non-finite activations in denoiser output projection");
  return out;
}

Mat Denoiser::backward(const Mat& deps, const Mat& dh) {
  const int B = static_cast<int>(deps.rows());
  Mat dact = out_proj_.backward(deps) + dh;
  Mat dfused = (dact.array() * (1.0 - fused_act_.array().square())).matrix();
  Mat dfused_in = fusion_.backward(dfused);
  Mat dy_proj = dfused_in.leftCols(cfg_.E);
  Mat dcontext = dfused_in.rightCols(cfg_.E);
  in_proj_.backward(dy_proj);  // gradient to y_t is not propagated further

  Mat denc(2 * B, cfg_.E);
  for (int b = 0; b < B; ++b) {
    denc.row(2 * b) = 0.5 * dcontext.row(b);
    denc.row(2 * b + 1) = 0.5 * dcontext.row(b);
  }
  Mat dx = encoder_.backward(denc);
  Mat dcond_tok(B, cfg_.E);
  for (int b = 0; b < B; ++b) {
    dcond_tok.row(b) = dx.row(2 * b);
    time_emb_.g.row(t_[b] - 1) += dx.row(2 * b + 1);
  }
  return cond_proj_.backward(dcond_tok);
}

ParamRefs Denoiser::params() {
  ParamRefs ps;
  append(ps, cond_proj_.params());
  ps.push_back(&time_emb_);
  append(ps, encoder_.params());
  append(ps, in_proj_.params());
  append(ps, fusion_.params());
  append(ps, out_proj_.params());
  return ps;
}

DiffusionLosses diffusion_losses(Denoiser& model, const NoiseSchedule& sched,
                                 const DiffusionBatch& batch, double iota,
                                 double gamma2, bool with_grad, Mat* dc,
                                 double grad_scale) {
  const int B = static_cast<int>(batch.y0.rows());
  const int d = static_cast<int>(batch.y0.cols());
  Mat y_t(B, d);
  for (int b = 0; b < B; ++b)
    y_t.row(b) = forward_noise(batch.y0.row(b).transpose(), batch.t[b],
                               batch.eps.row(b).transpose(), sched)
                     .transpose();
  Mat c = batch.c;
  for (int b = 0; b < B; ++b)
    if (!batch.use_dummy.empty() && batch.use_dummy[b])
      c.row(b) = model.dummy_condition().transpose();

  DenoiserOut out = model.forward(y_t, c, batch.t);
  Mat err = out.eps_hat - batch.eps;
  DiffusionLosses losses;
  losses.diff = err.array().square().rowwise().sum().mean();
  losses.disp = dispersive_loss(out.h, iota);
  losses.h = out.h;

  if (with_grad) {
    Mat deps = grad_scale * 2.0 / B * err;
    Mat dh = grad_scale * gamma2 * dispersive_loss_grad(out.h, iota);
    Mat dcond = model.backward(deps, dh);
    if (dc) {
      *dc = dcond;
      for (int b = 0; b < B; ++b)
        if (!batch.use_dummy.empty() && batch.use_dummy[b]) dc->row(b).setZero();
    }
  }
  return losses;
}

Vec cfg_sample(const Vec& c, double omega, const NoiseSchedule& sched, Denoiser& model,
               Rng& rng) {
  const int d = model.config().d;
  Vec y = rng.gaussian_vec(d);
  const auto& steps = sched.inference_steps;
  const int n = static_cast<int>(steps.size());
  Mat c_row = c.transpose();
  Mat phi_row = model.dummy_condition().transpose();

  for (int i = n - 1; i >= 0; --i) {
    const int t = steps[i];
    const double ab = sched.alpha_bar[t - 1];
    const double ab_prev = i > 0 ? sched.alpha_bar[steps[i - 1] - 1] : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const double alpha = 1.0 - beta;

    Mat y_row = y.transpose();
    std::vector<int> ts{t};
    Vec eps_cond = model.forward(y_row, c_row, ts).eps_hat.row(0).transpose();
    Vec eps_tilde = eps_cond;
    if (omega != 0.0) {
      Vec eps_uncond = model.forward(y_row, phi_row, ts).eps_hat.row(0).transpose();
      // (1+w)e_c - w e_u, written so identical networks cancel bitwise
      eps_tilde = eps_cond + omega * (eps_cond - eps_uncond);
    }
    Vec mean = (y - beta / std::sqrt(1.0 - ab) * eps_tilde) / std::sqrt(alpha);
    if (i > 0) {
      double var = beta * (1.0 - ab_prev) / (1.0 - ab);  // fixed posterior variance
      y = mean + std::sqrt(var) * rng.gaussian_vec(d);
    } else {
      y = mean;
    }
  }
  return y;
}

void save_denoiser(const Denoiser& model, BinaryWriter& w) {
  const auto& cfg = model.config();
  w.str("denoiser");
  w.u32(static_cast<std::uint32_t>(cfg.d));
  w.u32(static_cast<std::uint32_t>(cfg.D_c));
  w.u32(static_cast<std::uint32_t>(cfg.E));
  w.u32(static_cast<std::uint32_t>(cfg.H));
  w.u32(static_cast<std::uint32_t>(cfg.T));
  w.vec(model.dummy_condition());
  save_params(w, const_cast<Denoiser&>(model).params());
}

Denoiser load_denoiser(BinaryReader& r) {
  if (r.str() != "denoiser") throw IoError("expected denoiser section");
  DenoiserConfig cfg;
  cfg.d = static_cast<int>(r.u32());
  cfg.D_c = static_cast<int>(r.u32());
  cfg.E = static_cast<int>(r.u32());
  cfg.H = static_cast<int>(r.u32());
  cfg.T = static_cast<int>(r.u32());
  Rng scratch(0);
  Denoiser model(cfg, scratch);
  model.set_dummy_condition(r.vec());
  load_params(r, model.params());
  return model;
}

}  // namespace contrec
