#pragma once

#include <string>
#include <utility>
#include <vector>

#include "contrec/common.hpp"
#include "contrec/nn.hpp"
#include "contrec/rng.hpp"

namespace contrec {

struct Codebook {
  Param entries;            // S x D_c codeword vectors
  std::vector<long> usage;  // per-codeword hit counts

  Codebook() = default;
  Codebook(int size, int dim) : entries(size, dim), usage(size, 0) {}
  int size() const { return static_cast<int>(entries.v.rows()); }
};

// Nearest codeword under squared Euclidean distance; ties break to the
// smallest index.
std::pair<int, Vec> vq_quantize(const Vec& mu, const Codebook& cb);

struct ResidualStack {
  std::vector<Codebook> levels;
  int depth() const { return static_cast<int>(levels.size()); }
};

// Level r quantizes the residual left by levels < r; the approximation is the
// sum of selected codewords.
std::pair<std::vector<int>, Vec> rq_quantize(const Vec& mu, const ResidualStack& stack);

struct QuantizedConfig {
  int D = 0;
  int code_dim = 16;
  int codebook_size = 256;
  int depth = 3;  // RQ levels
  int hidden = 64;
  double commit_weight = 0.25;
};

// Vanilla VQ-VAE with straight-through gradients and k-means++ codebook init
// from the first batch.
class VqVae {
 public:
  VqVae(const QuantizedConfig& cfg, Rng& rng);

  double train_step(const Mat& X, AdamW& opt, Rng& rng, bool identity_quantize = false);
  Vec reconstruct(const Vec& x);
  double reconstruction_mse(const Mat& X);
  int reseed_dead_codes(const Mat& X, Rng& rng);  // returns number reseeded
  void reset_usage();

  ParamRefs params();
  Codebook& codebook() { return cb_; }
  const QuantizedConfig& config() const { return cfg_; }

  void save(const std::string& path) const;

 private:
  void maybe_init_codebook(const Mat& encodings, Rng& rng);
  QuantizedConfig cfg_;
  Mlp encoder_, decoder_;
  Codebook cb_;
  bool cb_initialized_ = false;
};

// Residual-quantized variant; decoder consumes the sum of per-level codewords.
class RqVae {
 public:
  RqVae(const QuantizedConfig& cfg, Rng& rng);

  double train_step(const Mat& X, AdamW& opt, Rng& rng);
  Vec reconstruct(const Vec& x);
  double reconstruction_mse(const Mat& X);

  ParamRefs params();
  ResidualStack& stack() { return stack_; }

  void save(const std::string& path) const;

 private:
  void maybe_init_codebooks(const Mat& encodings, Rng& rng);
  QuantizedConfig cfg_;
  Mlp encoder_, decoder_;
  ResidualStack stack_;
  bool cb_initialized_ = false;
};

// Plain Gaussian VAE used by the reconstruction benchmark.
class GaussianVae {
 public:
  GaussianVae(int D, int latent, int hidden, double kl_weight, Rng& rng);

  double train_step(const Mat& X, AdamW& opt, Rng& rng);
  Vec reconstruct(const Vec& x);
  double reconstruction_mse(const Mat& X);

  ParamRefs params();

 private:
  int D_, latent_;
  double kl_weight_;
  Mlp encoder_, decoder_;
};

// Shared k-means++ seeding over a batch of encodings.
Mat kmeans_pp_init(const Mat& points, int k, Rng& rng);

}  // namespace contrec
