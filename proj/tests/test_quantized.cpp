#include "doctest.h"

#include "contrec/quantized.hpp"
#include "test_util.hpp"

using namespace contrec;

namespace {

QuantizedConfig small_cfg() {
  QuantizedConfig cfg;
  cfg.D = 8;
  cfg.code_dim = 4;
  cfg.codebook_size = 6;
  cfg.depth = 3;
  cfg.hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("vq quantize picks the nearest codeword, ties to the smallest index") {
  Codebook cb(3, 2);
  cb.entries.v << 1.0, 0.0, 0.0, 1.0, 1.0, 0.0;  // rows 0 and 2 identical
  Vec mu(2);
  mu << 0.9, 0.1;
  auto [idx, cw] = vq_quantize(mu, cb);
  CHECK(idx == 0);  // tie between rows 0 and 2 resolves to 0
  CHECK((cw - cb.entries.v.row(0).transpose()).cwiseAbs().maxCoeff() == 0.0);

  Vec near1(2);
  near1 << 0.1, 0.9;
  CHECK(vq_quantize(near1, cb).first == 1);
  CHECK_THROWS_AS(vq_quantize(Vec::Zero(3), cb), ShapeError);
}

TEST_CASE("rq residuals telescope exactly") {
  Rng rng(1);
  ResidualStack stack;
  for (int r = 0; r < 3; ++r) {
    stack.levels.emplace_back(4, 2);
    stack.levels[r].entries.v = rng.gaussian_mat(4, 2);
  }
  Vec mu = rng.gaussian_vec(2);
  auto [indices, approx] = rq_quantize(mu, stack);
  CHECK(indices.size() == 3);
  // the selected codewords must sum to the returned approximation bitwise
  Vec manual = Vec::Zero(2);
  Vec residual = mu;
  for (int r = 0; r < 3; ++r) {
    Vec cw = stack.levels[r].entries.v.row(indices[r]).transpose();
    manual += cw;
    residual -= cw;
  }
  CHECK((approx - manual).cwiseAbs().maxCoeff() == 0.0);
  // deeper stacks never increase the residual norm on the chosen path
  auto [i1, a1] = rq_quantize(mu, ResidualStack{{stack.levels[0]}});
  CHECK((mu - approx).norm() <= (mu - a1).norm() + 1e-12);
}

TEST_CASE("kmeans++ centers are data points and distinct when possible") {
  Rng rng(2);
  Mat points = rng.gaussian_mat(32, 3);
  Mat centers = kmeans_pp_init(points, 5, rng);
  for (int c = 0; c < 5; ++c) {
    bool found = false;
    for (int i = 0; i < 32; ++i)
      if ((centers.row(c) - points.row(i)).cwiseAbs().maxCoeff() == 0.0) found = true;
    CHECK(found);
  }
}

TEST_CASE("straight-through gradients equal the plain autoencoder's") {
  QuantizedConfig cfg = small_cfg();
  Rng init1(3), init2(3);
  VqVae vq(cfg, init1);
  // replicate the encoder/decoder init by replaying the same rng stream
  Mlp enc({cfg.D, cfg.hidden, cfg.hidden, cfg.code_dim}, init2);
  Mlp dec({cfg.code_dim, cfg.hidden, cfg.hidden, cfg.D}, init2);

  Rng rng(4);
  Mat X = rng.gaussian_mat(8, 8);

  // identity quantization removes the codebook from the computation; the
  // encoder/decoder step must then match a plain autoencoder step exactly
  AdamW opt1(vq.params(), 1e-3, 0.0);
  Rng dummy(5);
  vq.train_step(X, opt1, dummy, /*identity_quantize=*/true);

  ParamRefs plain_params;
  append(plain_params, enc.params());
  append(plain_params, dec.params());
  AdamW opt2(plain_params, 1e-3, 0.0);
  opt2.zero_grad();
  Mat xhat = dec.forward(enc.forward(X));
  Mat dxhat = 2.0 / X.rows() * (xhat - X);
  enc.backward(dec.backward(dxhat));
  opt2.step();

  // after one step, every encoder/decoder tensor must match bitwise
  ParamRefs vq_params = vq.params();
  std::size_t n_plain = plain_params.size();
  REQUIRE(vq_params.size() == n_plain + 1);  // + codebook entries
  for (std::size_t i = 0; i < n_plain; ++i)
    CHECK((vq_params[i]->v - plain_params[i]->v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("vq training reduces reconstruction error") {
  QuantizedConfig cfg = small_cfg();
  Rng rng(5);
  VqVae vq(cfg, rng);
  Mat X = rng.gaussian_mat(32, 8);
  AdamW opt(vq.params(), 1e-3, 0.0);
  vq.train_step(X, opt, rng);
  double before = vq.reconstruction_mse(X);
  for (int s = 0; s < 400; ++s) vq.train_step(X, opt, rng);
  CHECK(vq.reconstruction_mse(X) < before);
}

TEST_CASE("dead codewords are reseeded") {
  QuantizedConfig cfg = small_cfg();
  Rng rng(6);
  VqVae vq(cfg, rng);
  Mat X = rng.gaussian_mat(16, 8);
  AdamW opt(vq.params(), 1e-3, 0.0);
  vq.train_step(X, opt, rng);
  vq.reset_usage();
  vq.train_step(X, opt, rng);
  long used = 0;
  for (long u : vq.codebook().usage) used += u > 0 ? 1 : 0;
  if (used < vq.codebook().size()) {
    int reseeded = vq.reseed_dead_codes(X, rng);
    CHECK(reseeded == vq.codebook().size() - used);
  }
}

TEST_CASE("rq training reduces reconstruction error below plain vq eventually") {
  QuantizedConfig cfg = small_cfg();
  Rng rng(7);
  RqVae rq(cfg, rng);
  Mat X = rng.gaussian_mat(32, 8);
  AdamW opt(rq.params(), 1e-3, 0.0);
  rq.train_step(X, opt, rng);
  double before = rq.reconstruction_mse(X);
  for (int s = 0; s < 400; ++s) rq.train_step(X, opt, rng);
  CHECK(rq.reconstruction_mse(X) < before);
}

TEST_CASE("gaussian vae trains and reconstructs finitely") {
  Rng rng(8);
  GaussianVae vae(8, 3, 8, 0.1, rng);
  Mat X = rng.gaussian_mat(32, 8);
  AdamW opt(vae.params(), 1e-3, 0.0);
  double first = vae.train_step(X, opt, rng);
  double last = 0;
  for (int s = 0; s < 300; ++s) last = vae.train_step(X, opt, rng);
  CHECK(last < first);
  CHECK(std::isfinite(vae.reconstruction_mse(X)));
}
