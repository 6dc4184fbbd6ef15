#include "contrec/quantized.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "contrec/serialize.hpp"

namespace contrec {

std::pair<int, Vec> vq_quantize(const Vec& mu, const Codebook& cb) {
  if (cb.size() == 0) throw ConfigError("empty codebook");
  if (cb.entries.v.cols() != mu.size()) throw ShapeError("codebook width mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int s = 0; s < cb.size(); ++s) {
    double d = (mu.transpose() - cb.entries.v.row(s)).squaredNorm();
    if (d < best_d) {  // strict: ties keep the smallest index
      best_d = d;
      best = s;
    }
  }
  return {best, cb.entries.v.row(best).transpose()};
}

std::pair<std::vector<int>, Vec> rq_quantize(const Vec& mu, const ResidualStack& stack) {
  if (stack.depth() < 1) throw ConfigError("residual stack must have depth >= 1");
  std::vector<int> indices;
  Vec residual = mu;
  Vec total = Vec::Zero(mu.size());
  for (const auto& cb : stack.levels) {
    auto [idx, cw] = vq_quantize(residual, cb);
    indices.push_back(idx);
    total += cw;
    residual -= cw;  // residual_r = residual_{r-1} - c_{s_r}, exactly
  }
  return {indices, total};
}

Mat kmeans_pp_init(const Mat& points, int k, Rng& rng) {
  const int n = static_cast<int>(points.rows());
  Mat centers(k, points.cols());
  centers.row(0) = points.row(static_cast<int>(rng.below(n)));
  Vec d2 = Vec::Constant(n, std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    for (int i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - centers.row(c - 1)).squaredNorm());
    double total = d2.sum();
    int pick;
    if (total <= 0) {
      pick = static_cast<int>(rng.below(n));
    } else {
      double r = rng.uniform() * total;
      pick = n - 1;
      double acc = 0;
      for (int i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    }
    centers.row(c) = points.row(pick);
  }
  return centers;
}

// ---------------------------------------------------------------------------

VqVae::VqVae(const QuantizedConfig& cfg, Rng& rng)
    : cfg_(cfg),
      encoder_({cfg.D, cfg.hidden, cfg.hidden, cfg.code_dim}, rng),
      decoder_({cfg.code_dim, cfg.hidden, cfg.hidden, cfg.D}, rng),
      cb_(cfg.codebook_size, cfg.code_dim) {}

void VqVae::maybe_init_codebook(const Mat& encodings, Rng& rng) {
  if (cb_initialized_) return;
  if (encodings.rows() >= cb_.size()) {
    cb_.entries.v = kmeans_pp_init(encodings, cb_.size(), rng);
  } else {
    // fewer samples than codewords: seed from samples plus jitter
    for (int s = 0; s < cb_.size(); ++s)
      cb_.entries.v.row(s) =
          encodings.row(s % encodings.rows()) +
          0.01 * rng.gaussian_vec(cfg_.code_dim).transpose();
  }
  cb_initialized_ = true;
}

double VqVae::train_step(const Mat& X, AdamW& opt, Rng& rng, bool identity_quantize) {
  const int B = static_cast<int>(X.rows());
  Mat mu = encoder_.forward(X);
  maybe_init_codebook(mu, rng);

  Mat q(B, cfg_.code_dim);
  std::vector<int> idx(B);
  if (identity_quantize) {
    q = mu;
  } else {
    for (int b = 0; b < B; ++b) {
      auto [s, cw] = vq_quantize(mu.row(b).transpose(), cb_);
      idx[b] = s;
      cb_.usage[s]++;
      q.row(b) = cw.transpose();
    }
  }

  Mat xhat = decoder_.forward(q);
  Mat diff = xhat - X;
  double recon = diff.array().square().rowwise().sum().mean();
  double codebook_loss = 0.0, commit = 0.0;
  if (!identity_quantize) {
    codebook_loss = (q - mu).array().square().rowwise().sum().mean();
    commit = cfg_.commit_weight * codebook_loss;
  }
  double loss = recon + codebook_loss + commit;

  opt.zero_grad();
  Mat dxhat = 2.0 / B * diff;
  Mat dq = decoder_.backward(dxhat);
  // straight-through: copy the decoder-input gradient to the encoder output
  Mat dmu = dq;
  if (!identity_quantize) {
    dmu += (2.0 * cfg_.commit_weight / B) * (mu - q);
    for (int b = 0; b < B; ++b)
      cb_.entries.g.row(idx[b]) += (2.0 / B) * (q.row(b) - mu.row(b));
  }
  encoder_.backward(dmu);
  opt.step();
  return loss;
}

Vec VqVae::reconstruct(const Vec& x) {
  Mat mu = encoder_.forward(x.transpose());
  auto [s, cw] = vq_quantize(mu.row(0).transpose(), cb_);
  (void)s;
  return decoder_.forward(cw.transpose()).row(0).transpose();
}

double VqVae::reconstruction_mse(const Mat& X) {
  double acc = 0.0;
  for (int b = 0; b < X.rows(); ++b)
    acc += (reconstruct(X.row(b).transpose()) - X.row(b).transpose()).squaredNorm();
  return acc / X.rows();
}

int VqVae::reseed_dead_codes(const Mat& X, Rng& rng) {
  Mat mu = encoder_.forward(X);
  int reseeded = 0;
  for (int s = 0; s < cb_.size(); ++s) {
    if (cb_.usage[s] == 0) {
      cb_.entries.v.row(s) = mu.row(static_cast<int>(rng.below(mu.rows())));
      ++reseeded;
    }
  }
  if (reseeded > 0)
    std::cerr << "vq: reseeded " << reseeded << " dead codewords\n";
  return reseeded;
}

void VqVae::reset_usage() {
  std::fill(cb_.usage.begin(), cb_.usage.end(), 0L);
}

ParamRefs VqVae::params() {
  ParamRefs ps;
  append(ps, encoder_.params());
  append(ps, decoder_.params());
  ps.push_back(&cb_.entries);
  return ps;
}

void VqVae::save(const std::string& path) const {
  BinaryWriter w(path);
  w.str("CTRC");
  w.u32(1);
  w.str("vq_vae");
  w.u32(static_cast<std::uint32_t>(cfg_.D));
  w.u32(static_cast<std::uint32_t>(cfg_.code_dim));
  w.u32(static_cast<std::uint32_t>(cfg_.codebook_size));
  w.u32(static_cast<std::uint32_t>(cfg_.hidden));
  w.f64(cfg_.commit_weight);
  save_params(w, const_cast<VqVae*>(this)->params());
}

// ---------------------------------------------------------------------------

RqVae::RqVae(const QuantizedConfig& cfg, Rng& rng)
    : cfg_(cfg),
      encoder_({cfg.D, cfg.hidden, cfg.hidden, cfg.code_dim}, rng),
      decoder_({cfg.code_dim, cfg.hidden, cfg.hidden, cfg.D}, rng) {
  for (int r = 0; r < cfg.depth; ++r)
    stack_.levels.emplace_back(cfg.codebook_size, cfg.code_dim);
}

void RqVae::maybe_init_codebooks(const Mat& encodings, Rng& rng) {
  if (cb_initialized_) return;
  Mat residuals = encodings;
  for (auto& cb : stack_.levels) {
    if (residuals.rows() >= cb.size()) {
      cb.entries.v = kmeans_pp_init(residuals, cb.size(), rng);
    } else {
      for (int s = 0; s < cb.size(); ++s)
        cb.entries.v.row(s) = residuals.row(s % residuals.rows()) +
                              0.01 * rng.gaussian_vec(cfg_.code_dim).transpose();
    }
    for (int b = 0; b < residuals.rows(); ++b) {
      auto [idx, cw] = vq_quantize(residuals.row(b).transpose(), cb);
      (void)idx;
      residuals.row(b) -= cw.transpose();
    }
  }
  cb_initialized_ = true;
}

double RqVae::train_step(const Mat& X, AdamW& opt, Rng& rng) {
  const int B = static_cast<int>(X.rows());
  Mat mu = encoder_.forward(X);
  maybe_init_codebooks(mu, rng);

  Mat q = Mat::Zero(B, cfg_.code_dim);
  double codebook_loss = 0.0;
  std::vector<std::vector<int>> idx(B);
  std::vector<Mat> level_residuals;  // residual entering each level, B x code_dim
  Mat residual = mu;
  for (int r = 0; r < stack_.depth(); ++r) {
    level_residuals.push_back(residual);
    for (int b = 0; b < B; ++b) {
      auto [s, cw] = vq_quantize(residual.row(b).transpose(), stack_.levels[r]);
      idx[b].push_back(s);
      stack_.levels[r].usage[s]++;
      q.row(b) += cw.transpose();
      residual.row(b) -= cw.transpose();
    }
  }
  // per-level codeword fit on the (stop-gradient) residual targets
  for (int r = 0; r < stack_.depth(); ++r)
    for (int b = 0; b < B; ++b)
      codebook_loss += (stack_.levels[r].entries.v.row(idx[b][r]) -
                        level_residuals[r].row(b))
                           .squaredNorm() /
                       B;

  Mat xhat = decoder_.forward(q);
  Mat diff = xhat - X;
  double recon = diff.array().square().rowwise().sum().mean();
  double commit = cfg_.commit_weight * (q - mu).array().square().rowwise().sum().mean();
  double loss = recon + codebook_loss + commit;

  opt.zero_grad();
  Mat dxhat = 2.0 / B * diff;
  Mat dq = decoder_.backward(dxhat);
  Mat dmu = dq + (2.0 * cfg_.commit_weight / B) * (mu - q);
  for (int r = 0; r < stack_.depth(); ++r)
    for (int b = 0; b < B; ++b)
      stack_.levels[r].entries.g.row(idx[b][r]) +=
          (2.0 / B) * (stack_.levels[r].entries.v.row(idx[b][r]) -
                       level_residuals[r].row(b));
  encoder_.backward(dmu);
  opt.step();
  return loss;
}

Vec RqVae::reconstruct(const Vec& x) {
  Mat mu = encoder_.forward(x.transpose());
  auto [idx, total] = rq_quantize(mu.row(0).transpose(), stack_);
  (void)idx;
  return decoder_.forward(total.transpose()).row(0).transpose();
}

double RqVae::reconstruction_mse(const Mat& X) {
  double acc = 0.0;
  for (int b = 0; b < X.rows(); ++b)
    acc += (reconstruct(X.row(b).transpose()) - X.row(b).transpose()).squaredNorm();
  return acc / X.rows();
}

ParamRefs RqVae::params() {
  ParamRefs ps;
  append(ps, encoder_.params());
  append(ps, decoder_.params());
  for (auto& cb : stack_.levels) ps.push_back(&cb.entries);
  return ps;
}

void RqVae::save(const std::string& path) const {
  BinaryWriter w(path);
  w.str("CTRC");
  w.u32(1);
  w.str("rq_vae");
  w.u32(static_cast<std::uint32_t>(cfg_.D));
  w.u32(static_cast<std::uint32_t>(cfg_.code_dim));
  w.u32(static_cast<std::uint32_t>(cfg_.codebook_size));
  w.u32(static_cast<std::uint32_t>(cfg_.depth));
  w.u32(static_cast<std::uint32_t>(cfg_.hidden));
  w.f64(cfg_.commit_weight);
  save_params(w, const_cast<RqVae*>(this)->params());
}

// ---------------------------------------------------------------------------

GaussianVae::GaussianVae(int D, int latent, int hidden, double kl_weight, Rng& rng)
    : D_(D), latent_(latent), kl_weight_(kl_weight),
      encoder_({D, hidden, hidden, 2 * latent}, rng),
      decoder_({latent, hidden, hidden, D}, rng) {}

double GaussianVae::train_step(const Mat& X, AdamW& opt, Rng& rng) {
  const int B = static_cast<int>(X.rows());
  Mat enc = encoder_.forward(X);
  Mat mu = enc.leftCols(latent_);
  Mat logvar = enc.rightCols(latent_);
  Mat eps = rng.gaussian_mat(B, latent_);
  Mat std = (0.5 * logvar.array()).exp();
  Mat z = mu + std.cwiseProduct(eps);
  Mat xhat = decoder_.forward(z);
  Mat diff = xhat - X;
  double recon = diff.array().square().rowwise().sum().mean();
  double kl = 0.5 *
              (logvar.array().exp() + mu.array().square() - 1.0 - logvar.array())
                  .rowwise()
                  .sum()
                  .mean();
  double loss = recon + kl_weight_ * kl;

  opt.zero_grad();
  Mat dxhat = 2.0 / B * diff;
  Mat dz = decoder_.backward(dxhat);
  Mat denc(B, 2 * latent_);
  denc.leftCols(latent_) = dz + (kl_weight_ / B) * mu;
  denc.rightCols(latent_) =
      dz.cwiseProduct(0.5 * std.cwiseProduct(eps)) +
      (kl_weight_ * 0.5 / B) * (logvar.array().exp() - 1.0).matrix();
  encoder_.backward(denc);
  opt.step();
  return loss;
}

Vec GaussianVae::reconstruct(const Vec& x) {
  Mat enc = encoder_.forward(x.transpose());
  Mat mu = enc.leftCols(latent_);
  return decoder_.forward(mu).row(0).transpose();
}

double GaussianVae::reconstruction_mse(const Mat& X) {
  double acc = 0.0;
  for (int b = 0; b < X.rows(); ++b)
    acc += (reconstruct(X.row(b).transpose()) - X.row(b).transpose()).squaredNorm();
  return acc / X.rows();
}

ParamRefs GaussianVae::params() {
  ParamRefs ps;
  append(ps, encoder_.params());
  append(ps, decoder_.params());
  return ps;
}

}  // namespace contrec
