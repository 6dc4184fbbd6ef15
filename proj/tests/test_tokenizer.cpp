#include "doctest.h"

#include "contrec/tokenizer.hpp"
#include "test_util.hpp"

using namespace contrec;

namespace {

TokenizerConfig small_cfg() {
  TokenizerConfig cfg;
  cfg.K = 3;
  cfg.D = 10;
  cfg.D_z = 4;
  cfg.hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("bernoulli mask zeroes roughly rho of the entries") {
  Rng rng(1);
  Vec x = Vec::Ones(10000);
  Vec masked = SigmaVae::bernoulli_mask(x, 0.2, rng);
  double zeroed = (masked.array() == 0.0).count() / 10000.0;
  CHECK(zeroed == doctest::Approx(0.2).epsilon(0.1));
  CHECK(SigmaVae::bernoulli_mask(x, 0.0, rng).isApprox(x));
  CHECK(SigmaVae::bernoulli_mask(x, 1.0, rng).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gamma calibration is the first-batch std with a floor") {
  Rng rng(2);
  SigmaVae tok(small_cfg(), rng);
  Mat batch(2, 10);
  batch.setZero();
  batch(0, 0) = 2.0;  // mean 0.1, known population variance
  double mean = batch.mean();
  double expected = std::sqrt((batch.array() - mean).square().mean());
  tok.calibrate_gamma(batch);
  CHECK(tok.gamma() == doctest::Approx(expected).epsilon(1e-12));

  SigmaVae tok2(small_cfg(), rng);
  tok2.calibrate_gamma(Mat::Constant(4, 10, 3.14));  // zero variance -> floor
  CHECK(tok2.gamma() == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("tokenize requires calibration") {
  Rng rng(3);
  SigmaVae tok(small_cfg(), rng);
  CHECK_THROWS_AS(tok.tokenize(Vec::Ones(10), rng, false), ConfigError);
}

TEST_CASE("inference tokenization is deterministic and noise-free") {
  Rng rng(4);
  SigmaVae tok(small_cfg(), rng);
  tok.calibrate_gamma(rng.gaussian_mat(6, 10));
  Vec x = rng.gaussian_vec(10);
  Rng a(7), b(8);  // different streams must not matter at inference
  auto t1 = tok.tokenize(x, a, false);
  auto t2 = tok.tokenize(x, b, false);
  CHECK((t1.tokens - t2.tokens).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t1.tokens - t1.means).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t1.sigmas.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training tokenization adds per-channel scalar-scaled noise") {
  Rng rng(5);
  SigmaVae tok(small_cfg(), rng);
  tok.calibrate_gamma(rng.gaussian_mat(6, 10) * 2.0);
  Rng noise_rng(11);
  Vec x = rng.gaussian_vec(10);
  auto ts = tok.tokenize(x, noise_rng, true);
  CHECK((ts.tokens.rows()) == 3);
  CHECK(ts.sigmas.size() == 3);
  bool some_noise = (ts.tokens - ts.means).cwiseAbs().maxCoeff() > 0.0;
  CHECK(some_noise);
}

TEST_CASE("decode rejects mismatched token shapes") {
  Rng rng(6);
  SigmaVae tok(small_cfg(), rng);
  tok.calibrate_gamma(rng.gaussian_mat(4, 10));
  ContinuousTokenSet ts;
  ts.tokens = Mat::Zero(2, 4);  // K is 3
  CHECK_THROWS_AS(tok.decode(ts), ShapeError);
}

TEST_CASE("vae loss formula") {
  Vec x(3), xhat(3);
  x << 1.0, 0.0, -1.0;
  xhat << 0.5, 0.5, -1.0;
  Mat means(2, 2);
  means << 1.0, 0.0, 0.0, 2.0;
  // ||xhat-x||^2 = 0.5, prior = 1 + 4 = 5, beta/K = 0.25/2
  CHECK(SigmaVae::vae_loss(x, xhat, means, 0.25, 2) ==
        doctest::Approx(0.5 + 0.125 * 5.0).epsilon(1e-12));
}

TEST_CASE("batch pass gradients match finite differences") {
  Rng rng(7);
  TokenizerConfig cfg = small_cfg();
  SigmaVae tok(cfg, rng);
  Mat X = rng.gaussian_mat(3, 10);
  tok.calibrate_gamma(X);
  Mat mask(3, 10);
  for (long i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.bernoulli(0.2) ? 0.0 : 1.0;
  std::vector<Mat> z_noise;
  for (int k = 0; k < cfg.K; ++k) z_noise.push_back(0.1 * rng.gaussian_mat(3, 4));

  auto loss = [&] { return tok.batch_pass(X, mask, z_noise, false); };
  zero_grads(tok.params());
  tok.batch_pass(X, mask, z_noise, true);
  CHECK(testutil::max_grad_rel_err(tok.params(), loss) < 1e-4);
}

TEST_CASE("batch pass loss equals the mean of per-sample vae losses") {
  Rng rng(8);
  TokenizerConfig cfg = small_cfg();
  SigmaVae tok(cfg, rng);
  Mat X = rng.gaussian_mat(4, 10);
  tok.calibrate_gamma(X);
  Mat mask = Mat::Ones(4, 10);
  std::vector<Mat> z_noise(cfg.K, Mat::Zero(4, 4));
  double batch = tok.batch_pass(X, mask, z_noise, false);

  Rng unused(0);
  double acc = 0.0;
  for (int b = 0; b < 4; ++b) {
    Vec x = X.row(b).transpose();
    auto ts = tok.tokenize(x, unused, false);
    acc += SigmaVae::vae_loss(x, tok.decode(ts), ts.means, cfg.beta, cfg.K);
  }
  CHECK(batch == doctest::Approx(acc / 4.0).epsilon(1e-10));
}

TEST_CASE("training reduces the vae loss") {
  Rng rng(9);
  TokenizerConfig cfg = small_cfg();
  SigmaVae tok(cfg, rng);
  Mat X = rng.gaussian_mat(32, 10);
  tok.calibrate_gamma(X);
  AdamW opt(tok.params(), 1e-3, 1e-4);
  double first = 0, last = 0;
  for (int step = 0; step < 300; ++step) {
    double l = tok.train_step(X, opt, rng);
    if (step == 0) first = l;
    last = l;
  }
  CHECK(last < first);
}

TEST_CASE("tokenizer checkpoint round-trip is bit-exact") {
  Rng rng(10);
  SigmaVae tok(small_cfg(), rng);
  Mat X = rng.gaussian_mat(4, 10);
  tok.calibrate_gamma(X);
  tok.save("/tmp/contrec_test_tok.bin");
  SigmaVae loaded = SigmaVae::load("/tmp/contrec_test_tok.bin");
  CHECK(loaded.gamma() == tok.gamma());
  Rng unused(0);
  Vec x = X.row(0).transpose();
  auto a = tok.tokenize(x, unused, false);
  auto b = loaded.tokenize(x, unused, false);
  CHECK((a.tokens - b.tokens).cwiseAbs().maxCoeff() == 0.0);
  CHECK((tok.decode(a) - loaded.decode(b)).cwiseAbs().maxCoeff() == 0.0);
}
