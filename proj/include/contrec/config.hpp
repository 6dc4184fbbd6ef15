#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace contrec {

// Flat key=value run configuration; CLI flags override file keys.
struct RunConfig {
  // paths
  std::string interactions, catalog, external_embeddings;
  std::string workdir = "work";

  int seed = 1;

  // widths
  int D = 32;   // base embedding width (also the diffusion target width)
  int D_z = 8;  // per-token width
  int D_c = 32; // conditioning width
  int E = 32;   // backbone width
  int layers = 2;
  int hidden = 64;      // tokenizer perceptron hidden width
  int denoiser_E = 32;
  int denoiser_H = 64;

  // tokenizer
  int K = 3;
  double rho = 0.2;
  double beta = 0.25;
  double gamma_floor = 1e-3;

  // diffusion
  int T = 1000;
  int inference_steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double zeta = 0.1;
  double iota = 0.5;
  double omega = 2.0;
  double gamma1 = 1.0;
  double gamma2 = 0.5;

  // retrieval
  double pi_val = 0.05;
  bool pi_use_brand = false;

  // optimization
  double lr_backbone = 1e-5, wd_backbone = 1e-4;
  double lr_tokenizer = 1e-4, wd_tokenizer = 1e-3;
  int batch_size = 24;
  int epochs_tokenizer = 50;
  int epochs_rec = 10;
  int max_len = 20;
  double q1 = 0.90, q2 = 0.95;
  int eval_seeds = 5;
  int valid_subsample = 256;  // validation examples used for model selection

  std::string ablation = "none";  // none | no_diffusion | no_disp

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;
};

RunConfig load_config(const std::string& path);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kvs);

}  // namespace contrec
