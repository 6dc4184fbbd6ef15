#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "contrec/backbone.hpp"
#include "contrec/config.hpp"
#include "contrec/data.hpp"
#include "contrec/diffusion.hpp"
#include "contrec/retrieval.hpp"
#include "contrec/tokenizer.hpp"

namespace contrec {

// --- synthetic data with planted preference structure ----------------------

struct SynthConfig {
  int n_users = 256;
  int n_items = 160;
  int n_categories = 8;
  int n_brands = 6;
  int events_per_user = 30;
  int categories_per_user = 2;
  double preference_strength = 0.9;
  int seed = 7;
};

// Writes interaction and catalog files in the ingest format. Users draw most
// events from their planted preferred categories; timestamps interleave users
// so the chronological split leaves every user with training history.
void generate_synth(const SynthConfig& sc, const std::string& interactions_path,
                    const std::string& catalog_path);

// --- workdir artifacts -----------------------------------------------------

void save_split(const SplitDataset& ds, const std::string& path);
SplitDataset load_split(const std::string& path);
void save_embeddings(const EmbeddingBase& eb, const std::string& path);
EmbeddingBase load_embeddings(const std::string& path);

// --- training log ----------------------------------------------------------

class TrainLog {
 public:
  TrainLog(const std::string& path, std::uint64_t config_hash);
  void record(const std::string& phase, int step, double l_vae, double l_llm,
              double l_diff, double l_disp, double total);

 private:
  std::string path_;
  std::uint64_t hash_;
};

// --- recommender model bundle ---------------------------------------------

struct RecModel {
  std::unique_ptr<Backbone> backbone;
  std::unique_ptr<Denoiser> denoiser;
  std::unique_ptr<Linear> projection;  // no_diffusion ablation head
  NoiseSchedule schedule;
  std::string ablation = "none";

  void save(const std::string& path) const;
  static RecModel load(const std::string& path);
};

// --- pipeline phases -------------------------------------------------------

struct IngestSummary {
  int n_users = 0, n_items = 0;
  std::size_t n_interactions = 0;
  std::size_t n_train = 0, n_valid = 0, n_test = 0;
  int dropped_valid = 0, dropped_test = 0;
};

IngestSummary run_ingest(const RunConfig& cfg);
void run_train_tokenizer(const RunConfig& cfg);
void run_train_recommender(const RunConfig& cfg);

struct EvalSummary {
  double hr10_mean = 0, hr10_std = 0;
  double hr20_mean = 0, hr20_std = 0;
  double ndcg10_mean = 0, ndcg10_std = 0;
  double ndcg20_mean = 0, ndcg20_std = 0;
  std::vector<MetricReport> per_seed;
};

EvalSummary run_evaluate(const RunConfig& cfg, const std::string& split = "test");

// Ranking baselines over the same split, for reference lines in metrics.tsv.
MetricReport popularity_baseline(const SplitDataset& ds, const std::string& split);
double random_baseline_hr(const SplitDataset& ds, int K);  // analytic K/m

// --- reconstruction benchmark ---------------------------------------------

struct BenchCurves {
  std::vector<std::string> methods;  // vae, vq_vae, rq_vae, sigma_vae, diffusion
  std::vector<std::vector<double>> mse;  // [method][checkpoint]
  std::vector<int> steps;                // shared checkpoint step axis
};

// Trains all reconstructors on the rows of X under an equal step budget and
// matched capacity, recording reconstruction MSE along the way.
BenchCurves reconstruct_bench_on(const Mat& X, int train_steps, int eval_every,
                                 int seed, const RunConfig& cfg);
BenchCurves run_reconstruct_bench(const RunConfig& cfg);

// Low-rank synthetic embedding set used by benchmark tests.
Mat synthetic_lowrank(int n, int dim, int rank, int seed);

}  // namespace contrec
