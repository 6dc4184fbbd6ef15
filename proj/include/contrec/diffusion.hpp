#pragma once

#include <string>
#include <vector>

#include "contrec/common.hpp"
#include "contrec/nn.hpp"
#include "contrec/rng.hpp"

namespace contrec {

struct NoiseSchedule {
  int T = 1000;
  Vec beta;       // length T, strictly increasing in (0,1)
  Vec alpha;      // 1 - beta
  Vec alpha_bar;  // running product, strictly decreasing
  std::vector<int> inference_steps;  // 1-based, strictly increasing
};

NoiseSchedule build_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02,
                             int inference_steps = 100);

// y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, t in [1, T].
Vec forward_noise(const Vec& y0, int t, const Vec& eps, const NoiseSchedule& sched);

// L = log((1/B^2) sum_{i,b} exp(-|h_i - h_b|^2 / iota)), self-pairs included.
// Batches with fewer than two rows score 0.
double dispersive_loss(const Mat& h, double iota = 0.5);
Mat dispersive_loss_grad(const Mat& h, double iota = 0.5);

// Self-attention restricted to two-token sequences: rows 2b and 2b+1 of the
// input form one sequence, so a whole batch runs in one call.
class PairedAttention {
 public:
  PairedAttention() = default;
  PairedAttention(int dim, Rng& rng)
      : wq_(dim, dim, rng), wk_(dim, dim, rng), wv_(dim, dim, rng), wo_(dim, dim, rng) {}

  Mat forward(const Mat& x);    // (2B x E) -> (2B x E)
  Mat backward(const Mat& dy);  // returns dx

  ParamRefs params();

 private:
  Linear wq_, wk_, wv_, wo_;
  Mat q_, k_, v_, o_;
  Mat attn_;  // B x 4 row-major [a11 a12 a21 a22]
};

// Pre-norm transformer encoder block over paired two-token sequences.
class TwoTokenBlock {
 public:
  TwoTokenBlock() = default;
  TwoTokenBlock(int dim, Rng& rng)
      : ln1_(dim), ln2_(dim), attn_(dim, rng), ffn_({dim, 4 * dim, dim}, rng) {}

  Mat forward(const Mat& x);
  Mat backward(const Mat& dz);
  ParamRefs params();

 private:
  LayerNorm ln1_, ln2_;
  PairedAttention attn_;
  Mlp ffn_;
};

struct DenoiserConfig {
  int d = 0;    // target embedding width
  int D_c = 0;  // conditioning width
  int E = 32;   // encoder width
  int H = 64;   // fusion width (dispersive representations live here)
  int T = 1000;
};

struct DenoiserOut {
  Mat eps_hat;  // B x d
  Mat h;        // B x H, fusion output before the final projection
};

// Conditional epsilon-prediction network: an attention-based encoder over the
// (condition, time-embedding) pair, a fusion feed-forward layer and two
// projection layers.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, Rng& rng);

  DenoiserOut forward(const Mat& y_t, const Mat& c, const std::vector<int>& t);
  // deps and dh are gradients w.r.t. the two outputs; returns dL/dc.
  Mat backward(const Mat& deps, const Mat& dh);

  ParamRefs params();
  const DenoiserConfig& config() const { return cfg_; }

  const Vec& dummy_condition() const { return phi_; }
  void set_dummy_condition(const Vec& phi) { phi_ = phi; }

 private:
  DenoiserConfig cfg_;
  Linear cond_proj_;  // D_c -> E
  Param time_emb_;    // T x E
  TwoTokenBlock encoder_;
  Linear in_proj_;      // d -> E
  Linear fusion_;       // 2E -> H, tanh
  Linear out_proj_;     // H -> d
  Vec phi_;             // persistent dummy condition, sampled once at init
  std::vector<int> t_;  // caches
  Mat fused_act_, y_proj_, context_;
};

struct DiffusionBatch {
  Mat y0;              // B x d target item embeddings
  Mat c;               // B x D_c conditioning vectors
  std::vector<int> t;  // per-row steps in [1, T]
  Mat eps;             // B x d forward noise
  std::vector<char> use_dummy;  // rows whose condition is replaced by phi
};

struct DiffusionLosses {
  double diff = 0.0;
  double disp = 0.0;
  Mat h;  // recorded exactly once per forward pass
};

// Forward pass of the diffusion objective; with_grad additionally runs the
// backward pass with weight gamma2 on the dispersive term and writes dL/dc
// for non-dummy rows into dc (dummy rows get zero).
DiffusionLosses diffusion_losses(Denoiser& model, const NoiseSchedule& sched,
                                 const DiffusionBatch& batch, double iota,
                                 double gamma2, bool with_grad, Mat* dc,
                                 double grad_scale = 1.0);

// Classifier-free-guided ancestral sampling over the resampled schedule.
Vec cfg_sample(const Vec& c, double omega, const NoiseSchedule& sched, Denoiser& model,
               Rng& rng);

void save_denoiser(const Denoiser& model, BinaryWriter& w);
Denoiser load_denoiser(BinaryReader& r);

}  // namespace contrec
