#include "contrec/tokenizer.hpp"

#include <cmath>

#include "contrec/serialize.hpp"

namespace contrec {

SigmaVae::SigmaVae(const TokenizerConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.K < 1) throw ConfigError("tokenizer K must be >= 1");
  if (cfg_.rho < 0.0 || cfg_.rho > 1.0) throw ConfigError("mask ratio out of [0,1]");
  for (int k = 0; k < cfg_.K; ++k)
    encoders_.emplace_back(std::vector<int>{cfg_.D, cfg_.hidden, cfg_.hidden, cfg_.D_z},
                           rng);
  decoder_ = Mlp({cfg_.K * cfg_.D_z, cfg_.hidden, cfg_.hidden, cfg_.D}, rng);
}

Vec SigmaVae::bernoulli_mask(const Vec& x, double rho, Rng& rng) {
  if (rho < 0.0 || rho > 1.0) throw ConfigError("mask ratio out of [0,1]");
  Vec out = x;
  for (int i = 0; i < out.size(); ++i)
    if (rng.bernoulli(rho)) out[i] = 0.0;
  return out;
}

void SigmaVae::calibrate_gamma(const Mat& first_batch) {
  require_finite(first_batch, "calibration batch");
  double mean = first_batch.mean();
  double var = (first_batch.array() - mean).square().mean();
  gamma_ = std::max(std::sqrt(var), cfg_.gamma_floor);
}

ContinuousTokenSet SigmaVae::tokenize(const Vec& x, Rng& rng, bool training) {
  if (!calibrated()) throw ConfigError("tokenizer gamma not calibrated");
  Vec masked = training ? bernoulli_mask(x, cfg_.rho, rng) : x;
  ContinuousTokenSet ts;
  ts.means.resize(cfg_.K, cfg_.D_z);
  ts.tokens.resize(cfg_.K, cfg_.D_z);
  ts.sigmas = Vec::Zero(cfg_.K);
  for (int k = 0; k < cfg_.K; ++k) {
    Mat mu = encoders_[k].forward(masked.transpose());
    if (!mu.allFinite())
      throw NumericError("non-finite tokenizer mean in channel " + std::to_string(k));
    ts.means.row(k) = mu.row(0);
    if (training) {
      double sigma = rng.gaussian() * gamma_;
      ts.sigmas[k] = sigma;
      ts.tokens.row(k) = ts.means.row(k) + sigma * rng.gaussian_vec(cfg_.D_z).transpose();
    } else {
      ts.tokens.row(k) = ts.means.row(k);
    }
  }
  return ts;
}

Vec SigmaVae::decode(const ContinuousTokenSet& ts) {
  if (ts.tokens.rows() != cfg_.K || ts.tokens.cols() != cfg_.D_z)
    throw ShapeError("token set shape does not match decoder input width");
  Mat flat(1, cfg_.K * cfg_.D_z);
  for (int k = 0; k < cfg_.K; ++k)
    flat.block(0, k * cfg_.D_z, 1, cfg_.D_z) = ts.tokens.row(k);
  return decoder_.forward(flat).row(0).transpose();
}

double SigmaVae::vae_loss(const Vec& x, const Vec& xhat, const Mat& means, double beta,
                          int K) {
  if (x.size() != xhat.size()) throw ShapeError("vae_loss shape mismatch");
  double prior = 0.0;
  for (int k = 0; k < means.rows(); ++k) prior += means.row(k).squaredNorm();
  return (xhat - x).squaredNorm() + beta / static_cast<double>(K) * prior;
}

double SigmaVae::batch_pass(const Mat& X, const Mat& mask,
                            const std::vector<Mat>& z_noise, bool with_grad) {
  const int B = static_cast<int>(X.rows());
  Mat masked = X.cwiseProduct(mask);
  std::vector<Mat> mus(cfg_.K);
  Mat z(B, cfg_.K * cfg_.D_z);
  for (int k = 0; k < cfg_.K; ++k) {
    mus[k] = encoders_[k].forward(masked);
    z.block(0, k * cfg_.D_z, B, cfg_.D_z) = mus[k] + z_noise[k];
  }
  Mat xhat = decoder_.forward(z);
  Mat diff = xhat - X;
  double loss = diff.array().square().rowwise().sum().mean();
  for (int k = 0; k < cfg_.K; ++k)
    loss += cfg_.beta / cfg_.K * mus[k].array().square().rowwise().sum().mean();

  if (with_grad) {
    Mat dxhat = 2.0 / B * diff;
    Mat dz = decoder_.backward(dxhat);
    for (int k = 0; k < cfg_.K; ++k) {
      Mat dmu = dz.block(0, k * cfg_.D_z, B, cfg_.D_z) +
                (2.0 * cfg_.beta / (cfg_.K * B)) * mus[k];
      encoders_[k].backward(dmu);
    }
  }
  return loss;
}

double SigmaVae::train_step(const Mat& X, AdamW& opt, Rng& rng) {
  if (!calibrated()) calibrate_gamma(X);
  const int B = static_cast<int>(X.rows());
  Mat mask(B, X.cols());
  for (int i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.bernoulli(cfg_.rho) ? 0.0 : 1.0;
  std::vector<Mat> z_noise(cfg_.K);
  for (int k = 0; k < cfg_.K; ++k) {
    z_noise[k].resize(B, cfg_.D_z);
    for (int b = 0; b < B; ++b) {
      double sigma = rng.gaussian() * gamma_;
      z_noise[k].row(b) = sigma * rng.gaussian_vec(cfg_.D_z).transpose();
    }
  }
  opt.zero_grad();
  double loss = batch_pass(X, mask, z_noise, true);
  if (!std::isfinite(loss)) throw NumericError("tokenizer loss diverged");
  opt.step();
  return loss;
}

ParamRefs SigmaVae::params() {
  ParamRefs ps;
  for (auto& e : encoders_) append(ps, e.params());
  append(ps, decoder_.params());
  return ps;
}

void SigmaVae::save(const std::string& path) const {
  BinaryWriter w(path);
  w.str("CTRC");
  w.u32(1);
  w.str("sigma_vae");
  w.u32(static_cast<std::uint32_t>(cfg_.K));
  w.f64(cfg_.rho);
  w.f64(cfg_.beta);
  w.u32(static_cast<std::uint32_t>(cfg_.D));
  w.u32(static_cast<std::uint32_t>(cfg_.D_z));
  w.u32(static_cast<std::uint32_t>(cfg_.hidden));
  w.f64(cfg_.gamma_floor);
  w.f64(gamma_);
  auto ps = const_cast<SigmaVae*>(this)->params();
  save_params(w, ps);
}

SigmaVae SigmaVae::load(const std::string& path) {
  BinaryReader r(path);
  if (r.str() != "CTRC") throw IoError("bad checkpoint magic: " + path);
  if (r.u32() != 1) throw IoError("unsupported checkpoint version: " + path);
  std::string kind = r.str();
  if (kind != "sigma_vae") throw IoError("checkpoint kind mismatch: " + kind);
  TokenizerConfig cfg;
  cfg.K = static_cast<int>(r.u32());
  cfg.rho = r.f64();
  cfg.beta = r.f64();
  cfg.D = static_cast<int>(r.u32());
  cfg.D_z = static_cast<int>(r.u32());
  cfg.hidden = static_cast<int>(r.u32());
  cfg.gamma_floor = r.f64();
  Rng scratch(0);
  SigmaVae vae(cfg, scratch);
  vae.gamma_ = r.f64();
  load_params(r, vae.params());
  return vae;
}

}  // namespace contrec
