#pragma once

#include <string>
#include <vector>

#include "contrec/common.hpp"
#include "contrec/nn.hpp"
#include "contrec/rng.hpp"

namespace contrec {

struct TokenizerConfig {
  int K = 3;          // sub-encoder count, searched in {1..5}
  double rho = 0.2;   // Bernoulli mask ratio
  double beta = 0.25; // prior-term weight
  int D = 0;          // input width
  int D_z = 8;        // per-token width
  int hidden = 64;    // perceptron hidden width
  double gamma_floor = 1e-3;
};

struct ContinuousTokenSet {
  Mat tokens;  // K x D_z
  Mat means;   // K x D_z
  Vec sigmas;  // K
};

// Masked K-way continuous tokenizer. Each sub-encoder and the decoder are
// three-layer perceptrons; the latent noise scale is fixed by a calibration
// constant taken from the first training batch.
class SigmaVae {
 public:
  SigmaVae(const TokenizerConfig& cfg, Rng& rng);

  static Vec bernoulli_mask(const Vec& x, double rho, Rng& rng);

  void calibrate_gamma(const Mat& first_batch);
  double gamma() const { return gamma_; }
  bool calibrated() const { return gamma_ >= 0.0; }

  ContinuousTokenSet tokenize(const Vec& x, Rng& rng, bool training);
  Vec decode(const ContinuousTokenSet& ts);

  static double vae_loss(const Vec& x, const Vec& xhat, const Mat& means, double beta,
                         int K);

  // Deterministic batch pass: mask is a 0/1 matrix applied to X, z_noise[k] is
  // added to the k-th channel means. Accumulates parameter gradients when
  // with_grad is set. Returns the mean per-sample loss.
  double batch_pass(const Mat& X, const Mat& mask, const std::vector<Mat>& z_noise,
                    bool with_grad);

  // One optimizer step over a batch (samples mask, sigma and epsilon).
  double train_step(const Mat& X, AdamW& opt, Rng& rng);

  ParamRefs params();

  const TokenizerConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static SigmaVae load(const std::string& path);

 private:
  TokenizerConfig cfg_;
  double gamma_ = -1.0;
  std::vector<Mlp> encoders_;
  Mlp decoder_;
};

}  // namespace contrec
