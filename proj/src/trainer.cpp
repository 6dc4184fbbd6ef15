#include "contrec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "contrec/quantized.hpp"
#include "contrec/serialize.hpp"

namespace contrec {

namespace {

std::string join(const std::string& dir, const std::string& name) {
  if (dir.empty()) return name;
  return dir + "/" + name;
}

void ensure_workdir(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.workdir);
}

std::vector<Mat> snapshot_params(const ParamRefs& ps) {
  std::vector<Mat> out;
  out.reserve(ps.size());
  for (const Param* p : ps) out.push_back(p->v);
  return out;
}

void restore_params(const ParamRefs& ps, const std::vector<Mat>& snap) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->v = snap[i];
}

struct TokenCache {
  std::vector<Mat> user_tokens;  // n x (K x D_z)
  std::vector<Mat> item_tokens;  // m x (K x D_z)
};

TokenCache build_token_cache(SigmaVae& tok, const EmbeddingBase& eb) {
  Rng unused(0);  // inference tokenization draws no noise
  TokenCache tc;
  tc.user_tokens.reserve(eb.user_vectors.rows());
  for (int u = 0; u < eb.user_vectors.rows(); ++u)
    tc.user_tokens.push_back(
        tok.tokenize(eb.user_vectors.row(u).transpose(), unused, false).tokens);
  tc.item_tokens.reserve(eb.item_vectors.rows());
  for (int j = 0; j < eb.item_vectors.rows(); ++j)
    tc.item_tokens.push_back(
        tok.tokenize(eb.item_vectors.row(j).transpose(), unused, false).tokens);
  return tc;
}

// Longest history whose sequence (user block + h+1 item blocks) fits the
// backbone position cap without internal truncation.
int history_cap(const RunConfig& cfg, int max_positions) {
  int user_block = cfg.K + 2;
  int item_block = cfg.K + 4;
  return std::max(0, (max_positions - user_block - item_block) / item_block - 1);
}

struct PreparedTrain {
  HybridSequence seq;
  std::vector<std::pair<int, int>> targets;
  std::vector<int> gen_pos;
  int target_item = -1;
};

PreparedTrain prepare_train(const Example& ex, const SplitDataset& ds,
                            const TokenCache& tc, const Vocab& vocab,
                            const RunConfig& cfg, int h_cap) {
  std::vector<int> hist = ex.history;
  if (static_cast<int>(hist.size()) > h_cap)
    hist.erase(hist.begin(), hist.end() - h_cap);

  std::vector<Mat> item_toks;
  std::vector<std::pair<int, int>> labels;
  for (int j : hist) {
    item_toks.push_back(tc.item_tokens[j]);
    labels.emplace_back(ds.item_category[j], ds.item_brand[j]);
  }
  item_toks.push_back(tc.item_tokens[ex.target]);
  labels.emplace_back(ds.item_category[ex.target], ds.item_brand[ex.target]);

  PreparedTrain pt;
  pt.seq = build_sequence(tc.user_tokens[ex.user], item_toks, labels, vocab);
  int P = (cfg.K + 2) + static_cast<int>(hist.size()) * (cfg.K + 4);
  pt.targets = {{P - 1, vocab.category_token(ds.item_category[ex.target])},
                {P, vocab.brand_token(ds.item_brand[ex.target])}};
  pt.gen_pos = {P - 1, P};
  pt.target_item = ex.target;
  return pt;
}

HybridSequence prepare_prompt(const Example& ex, const SplitDataset& ds,
                              const TokenCache& tc, const Vocab& vocab, int h_cap) {
  std::vector<int> hist = ex.history;
  if (static_cast<int>(hist.size()) > h_cap)
    hist.erase(hist.begin(), hist.end() - h_cap);
  std::vector<Mat> item_toks;
  std::vector<std::pair<int, int>> labels;
  for (int j : hist) {
    item_toks.push_back(tc.item_tokens[j]);
    labels.emplace_back(ds.item_category[j], ds.item_brand[j]);
  }
  return build_sequence(tc.user_tokens[ex.user], item_toks, labels, vocab);
}

int argmax_range(const Eigen::RowVectorXd& logits, int begin, int count) {
  int best = 0;
  double best_v = logits[begin];
  for (int i = 1; i < count; ++i)
    if (logits[begin + i] > best_v) {  // strict: ties keep the smaller index
      best_v = logits[begin + i];
      best = i;
    }
  return best;
}

// Two teacher-free forwards: category first, then brand conditioned on it.
// Returns predicted labels, and the condition vector aggregated from the two
// generating positions.
struct SemanticPrediction {
  int category = 0, brand = 0;
  Vec condition;
};

SemanticPrediction predict_with_condition(Backbone& bb, HybridSequence prompt) {
  const Vocab& vocab = bb.vocab();
  auto out1 = bb.forward(prompt);
  int last = static_cast<int>(out1.logits.rows()) - 1;
  SemanticPrediction sp;
  sp.category = argmax_range(out1.logits.row(last), 3, vocab.n_categories());
  Vec h1 = out1.hidden.row(last).transpose();

  SeqElem cat_elem;
  cat_elem.token_id = vocab.category_token(sp.category);
  prompt.push_back(cat_elem);
  auto out2 = bb.forward(prompt);
  sp.brand = argmax_range(out2.logits.row(last + 1), 3 + vocab.n_categories(),
                          vocab.n_brands());
  Vec h2 = out2.hidden.row(last + 1).transpose();

  Mat hs(2, h1.size());
  hs.row(0) = h1.transpose();
  hs.row(1) = h2.transpose();
  sp.condition = bb.aggregate_condition(hs, {0, 1});
  return sp;
}

MetricReport evaluate_model(RecModel& model, const TokenCache& tc,
                            const SplitDataset& ds, const EmbeddingBase& eb,
                            const RunConfig& cfg, const std::vector<Example>& examples,
                            const Rng& base_rng) {
  const int m = ds.n_items;
  const int h_cap = history_cap(cfg, model.backbone->config().max_positions);
  std::vector<int> out_of_vocab;
  for (int j = 0; j < m; ++j)
    if (!ds.item_in_train[j]) out_of_vocab.push_back(j);

  std::vector<std::vector<int>> rankings;
  std::vector<int> targets;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = examples[i];
    Rng rng = base_rng.fork(static_cast<std::uint64_t>(i) + 1);
    HybridSequence prompt = prepare_prompt(ex, ds, tc, model.backbone->vocab(), h_cap);
    SemanticPrediction sp = predict_with_condition(*model.backbone, prompt);

    Vec y_hat;
    if (model.ablation == "no_diffusion") {
      Mat c_row = sp.condition.transpose();
      y_hat = model.projection->forward(c_row).row(0).transpose();
    } else {
      y_hat = cfg_sample(sp.condition, cfg.omega, model.schedule, *model.denoiser, rng);
    }

    Vec scores = Vec::Constant(m, -1e300);
    for (int j = 0; j < m; ++j) {
      if (!ds.item_in_train[j]) continue;
      bool pi_flag = ds.item_category[j] == sp.category;
      if (cfg.pi_use_brand) pi_flag = pi_flag && ds.item_brand[j] == sp.brand;
      scores[j] = hybrid_score(y_hat, eb.item_vectors.row(j).transpose(), pi_flag,
                               cfg.pi_val);
    }

    std::vector<int> excluded = ex.history;
    excluded.insert(excluded.end(), out_of_vocab.begin(), out_of_vocab.end());
    rankings.push_back(rank_topk(scores, 20, excluded));
    targets.push_back(ex.target);
  }
  return compute_metrics(rankings, targets);
}

void write_examples(BinaryWriter& w, const std::vector<Example>& xs) {
  w.u32(static_cast<std::uint32_t>(xs.size()));
  for (const auto& ex : xs) {
    w.u32(static_cast<std::uint32_t>(ex.user));
    w.u32(static_cast<std::uint32_t>(ex.target));
    w.u32(static_cast<std::uint32_t>(ex.history.size()));
    for (int j : ex.history) w.u32(static_cast<std::uint32_t>(j));
  }
}

std::vector<Example> read_examples(BinaryReader& r) {
  std::vector<Example> xs(r.u32());
  for (auto& ex : xs) {
    ex.user = static_cast<int>(r.u32());
    ex.target = static_cast<int>(r.u32());
    ex.history.resize(r.u32());
    for (auto& j : ex.history) j = static_cast<int>(r.u32());
  }
  return xs;
}

void write_strings(BinaryWriter& w, const std::vector<std::string>& ss) {
  w.u32(static_cast<std::uint32_t>(ss.size()));
  for (const auto& s : ss) w.str(s);
}

std::vector<std::string> read_strings(BinaryReader& r) {
  std::vector<std::string> ss(r.u32());
  for (auto& s : ss) s = r.str();
  return ss;
}

void write_ints(BinaryWriter& w, const std::vector<int>& xs) {
  w.u32(static_cast<std::uint32_t>(xs.size()));
  for (int x : xs) w.u32(static_cast<std::uint32_t>(x));
}

std::vector<int> read_ints(BinaryReader& r) {
  std::vector<int> xs(r.u32());
  for (auto& x : xs) x = static_cast<int>(r.u32());
  return xs;
}

void write_schedule(BinaryWriter& w, const NoiseSchedule& s) {
  w.u32(static_cast<std::uint32_t>(s.T));
  w.vec(s.beta);
  write_ints(w, s.inference_steps);
}

NoiseSchedule read_schedule(BinaryReader& r) {
  NoiseSchedule s;
  s.T = static_cast<int>(r.u32());
  s.beta = r.vec();
  s.inference_steps = read_ints(r);
  s.alpha = (1.0 - s.beta.array()).matrix();
  s.alpha_bar = s.alpha;
  for (int t = 1; t < s.T; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  return s;
}

const char* kMagic = "CTRC";

void write_magic(BinaryWriter& w, const std::string& kind) {
  w.str(kMagic);
  w.str(kind);
}

void check_magic(BinaryReader& r, const std::string& kind) {
  if (r.str() != kMagic) throw ParseError("bad checkpoint magic");
  std::string k = r.str();
  if (k != kind) throw ParseError("checkpoint kind mismatch: expected " + kind +
                                  ", got " + k);
}

// Batched ancestral denoising from an intermediate step, unconditional
// (every condition row is the dummy token). Used by the benchmark.
Mat denoise_from(Denoiser& model, const NoiseSchedule& sched, Mat y, int t_star,
                 Rng& rng) {
  const int B = static_cast<int>(y.rows());
  const int d = static_cast<int>(y.cols());
  Mat c(B, model.config().D_c);
  c.rowwise() = model.dummy_condition().transpose();

  std::vector<int> steps;
  for (int t : sched.inference_steps)
    if (t <= t_star) steps.push_back(t);
  for (int i = static_cast<int>(steps.size()) - 1; i >= 0; --i) {
    const int t = steps[i];
    const double ab = sched.alpha_bar[t - 1];
    const double ab_prev = i > 0 ? sched.alpha_bar[steps[i - 1] - 1] : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const double alpha = 1.0 - beta;
    std::vector<int> ts(B, t);
    Mat eps_hat = model.forward(y, c, ts).eps_hat;
    Mat mean = (y - beta / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(alpha);
    if (i > 0) {
      double var = beta * (1.0 - ab_prev) / (1.0 - ab);
      y = mean + std::sqrt(var) * rng.gaussian_mat(B, d);
    } else {
      y = mean;
    }
  }
  return y;
}

double sigma_vae_mse(SigmaVae& tok, const Mat& X) {
  Rng unused(0);
  double acc = 0.0;
  for (int b = 0; b < X.rows(); ++b) {
    Vec x = X.row(b).transpose();
    acc += (tok.decode(tok.tokenize(x, unused, false)) - x).squaredNorm();
  }
  return acc / X.rows();
}

}  // namespace

// --- synthetic data ---------------------------------------------------------

void generate_synth(const SynthConfig& sc, const std::string& interactions_path,
                    const std::string& catalog_path) {
  Rng rng(static_cast<std::uint64_t>(sc.seed));

  std::vector<int> item_cat(sc.n_items), item_brand(sc.n_items);
  std::vector<std::vector<int>> by_cat(sc.n_categories);
  for (int j = 0; j < sc.n_items; ++j) {
    item_cat[j] = j % sc.n_categories;
    item_brand[j] = j % sc.n_brands;
    by_cat[item_cat[j]].push_back(j);
  }

  std::ofstream cat_out(catalog_path);
  if (!cat_out) throw IoError("cannot write " + catalog_path);
  for (int j = 0; j < sc.n_items; ++j)
    cat_out << "item" << j << "\tTitle " << j << "\tbrand" << item_brand[j]
            << "\tcat" << item_cat[j] << "\n";

  std::ofstream int_out(interactions_path);
  if (!int_out) throw IoError("cannot write " + interactions_path);
  for (int u = 0; u < sc.n_users; ++u) {
    std::vector<int> prefs;
    while (static_cast<int>(prefs.size()) < sc.categories_per_user) {
      int c = static_cast<int>(rng.below(sc.n_categories));
      if (std::find(prefs.begin(), prefs.end(), c) == prefs.end()) prefs.push_back(c);
    }
    for (int e = 0; e < sc.events_per_user; ++e) {
      int item;
      if (rng.bernoulli(sc.preference_strength)) {
        int c = prefs[rng.below(prefs.size())];
        item = by_cat[c][rng.below(by_cat[c].size())];
      } else {
        item = static_cast<int>(rng.below(sc.n_items));
      }
      // interleave users so every user keeps training-era history
      std::int64_t ts = static_cast<std::int64_t>(e) * sc.n_users + u;
      int_out << "user" << u << "\titem" << item << "\t" << ts << "\n";
    }
  }
}

// --- workdir artifacts ------------------------------------------------------

void save_split(const SplitDataset& ds, const std::string& path) {
  BinaryWriter w(path);
  write_magic(w, "split");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ds.max_len));
  w.u32(static_cast<std::uint32_t>(ds.n_users));
  w.u32(static_cast<std::uint32_t>(ds.n_items));
  w.i64(ds.t_q1);
  w.i64(ds.t_q2);
  w.u32(static_cast<std::uint32_t>(ds.dropped_valid));
  w.u32(static_cast<std::uint32_t>(ds.dropped_test));
  write_examples(w, ds.train);
  write_examples(w, ds.valid);
  write_examples(w, ds.test);
  w.u32(static_cast<std::uint32_t>(ds.item_in_train.size()));
  for (char c : ds.item_in_train) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(ds.train_seq.size()));
  for (const auto& seq : ds.train_seq) write_ints(w, seq);
  write_ints(w, ds.item_brand);
  write_ints(w, ds.item_category);
  write_strings(w, ds.brand_names);
  write_strings(w, ds.category_names);
  write_strings(w, ds.item_ids);
}

SplitDataset load_split(const std::string& path) {
  BinaryReader r(path);
  check_magic(r, "split");
  if (r.u32() != 1) throw ParseError("unknown split version");
  SplitDataset ds;
  ds.max_len = static_cast<int>(r.u32());
  ds.n_users = static_cast<int>(r.u32());
  ds.n_items = static_cast<int>(r.u32());
  ds.t_q1 = r.i64();
  ds.t_q2 = r.i64();
  ds.dropped_valid = static_cast<int>(r.u32());
  ds.dropped_test = static_cast<int>(r.u32());
  ds.train = read_examples(r);
  ds.valid = read_examples(r);
  ds.test = read_examples(r);
  ds.item_in_train.resize(r.u32());
  for (auto& c : ds.item_in_train) c = static_cast<char>(r.u32());
  ds.train_seq.resize(r.u32());
  for (auto& seq : ds.train_seq) seq = read_ints(r);
  ds.item_brand = read_ints(r);
  ds.item_category = read_ints(r);
  ds.brand_names = read_strings(r);
  ds.category_names = read_strings(r);
  ds.item_ids = read_strings(r);
  return ds;
}

void save_embeddings(const EmbeddingBase& eb, const std::string& path) {
  BinaryWriter w(path);
  write_magic(w, "embeddings");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(eb.D));
  w.mat(eb.user_vectors);
  w.mat(eb.item_vectors);
}

EmbeddingBase load_embeddings(const std::string& path) {
  BinaryReader r(path);
  check_magic(r, "embeddings");
  if (r.u32() != 1) throw ParseError("unknown embeddings version");
  EmbeddingBase eb;
  eb.D = static_cast<int>(r.u32());
  eb.user_vectors = r.mat();
  eb.item_vectors = r.mat();
  return eb;
}

// --- training log -----------------------------------------------------------

TrainLog::TrainLog(const std::string& path, std::uint64_t config_hash)
    : path_(path), hash_(config_hash) {
  std::ofstream out(path_);
  if (!out) throw IoError("cannot write " + path_);
  out << "# config_hash=" << std::hex << hash_ << std::dec << "\n";
  out << "phase\tstep\tl_vae\tl_llm\tl_diff\tl_disp\ttotal\n";
}

void TrainLog::record(const std::string& phase, int step, double l_vae, double l_llm,
                      double l_diff, double l_disp, double total) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to " + path_);
  out.precision(10);
  out << phase << "\t" << step << "\t" << l_vae << "\t" << l_llm << "\t" << l_diff
      << "\t" << l_disp << "\t" << total << "\n";
}

// --- recommender model bundle -----------------------------------------------

void RecModel::save(const std::string& path) const {
  BinaryWriter w(path);
  write_magic(w, "rec_model");
  w.u32(1);
  w.str(ablation);
  write_schedule(w, schedule);
  backbone->save(w);
  w.u32(denoiser ? 1 : 0);
  if (denoiser) save_denoiser(*denoiser, w);
  w.u32(projection ? 1 : 0);
  if (projection) {
    w.mat(projection->W.v);
    w.mat(projection->b.v);
  }
}

RecModel RecModel::load(const std::string& path) {
  BinaryReader r(path);
  check_magic(r, "rec_model");
  if (r.u32() != 1) throw ParseError("unknown model version");
  RecModel m;
  m.ablation = r.str();
  m.schedule = read_schedule(r);
  m.backbone = std::make_unique<Backbone>(Backbone::load(r));
  if (r.u32()) m.denoiser = std::make_unique<Denoiser>(load_denoiser(r));
  if (r.u32()) {
    m.projection = std::make_unique<Linear>();
    m.projection->W.v = r.mat();
    m.projection->W.g = Mat::Zero(m.projection->W.v.rows(), m.projection->W.v.cols());
    m.projection->b.v = r.mat();
    m.projection->b.g = Mat::Zero(m.projection->b.v.rows(), m.projection->b.v.cols());
  }
  return m;
}

// --- pipeline phases --------------------------------------------------------

IngestSummary run_ingest(const RunConfig& cfg) {
  cfg.validate();
  ensure_workdir(cfg);
  InteractionDataset raw = load_dataset(cfg.interactions, cfg.catalog);
  SplitDataset ds = split_by_timepoint(raw, cfg.q1, cfg.q2, cfg.max_len);
  std::optional<std::string> ext;
  if (!cfg.external_embeddings.empty()) ext = cfg.external_embeddings;
  EmbeddingBase eb = build_base_embeddings(ds, cfg.D, ext, ExternalMode::Replace);

  save_split(ds, join(cfg.workdir, "split.bin"));
  save_embeddings(eb, join(cfg.workdir, "embeddings.bin"));

  IngestSummary s;
  s.n_users = ds.n_users;
  s.n_items = ds.n_items;
  s.n_interactions = raw.interactions.size();
  s.n_train = ds.train.size();
  s.n_valid = ds.valid.size();
  s.n_test = ds.test.size();
  s.dropped_valid = ds.dropped_valid;
  s.dropped_test = ds.dropped_test;
  return s;
}

void run_train_tokenizer(const RunConfig& cfg) {
  cfg.validate();
  SplitDataset ds = load_split(join(cfg.workdir, "split.bin"));
  EmbeddingBase eb = load_embeddings(join(cfg.workdir, "embeddings.bin"));

  // Tokenize everything the recommender will see: train-era items and users.
  std::vector<int> rows;
  for (int j = 0; j < ds.n_items; ++j)
    if (ds.item_in_train[j]) rows.push_back(j);
  const int n_item_rows = static_cast<int>(rows.size());
  Mat X(n_item_rows + ds.n_users, eb.D);
  for (int i = 0; i < n_item_rows; ++i) X.row(i) = eb.item_vectors.row(rows[i]);
  for (int u = 0; u < ds.n_users; ++u) X.row(n_item_rows + u) = eb.user_vectors.row(u);

  TokenizerConfig tcfg;
  tcfg.K = cfg.K;
  tcfg.rho = cfg.rho;
  tcfg.beta = cfg.beta;
  tcfg.D = eb.D;
  tcfg.D_z = cfg.D_z;
  tcfg.hidden = cfg.hidden;
  tcfg.gamma_floor = cfg.gamma_floor;

  Rng rng(static_cast<std::uint64_t>(cfg.seed) * 101 + 1);
  SigmaVae tok(tcfg, rng);
  AdamW opt(tok.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);
  TrainLog log(join(cfg.workdir, "train_log_tokenizer.tsv"), cfg.hash());

  const int n = static_cast<int>(X.rows());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs_tokenizer; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    double acc = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      int bs = std::min(cfg.batch_size, n - start);
      Mat batch(bs, eb.D);
      for (int b = 0; b < bs; ++b) batch.row(b) = X.row(order[start + b]);
      if (!tok.calibrated()) tok.calibrate_gamma(batch);
      acc += tok.train_step(batch, opt, rng);
      ++batches;
    }
    double l_vae = acc / batches;
    log.record("tokenizer", epoch + 1, l_vae, 0, 0, 0, l_vae);
  }
  tok.save(join(cfg.workdir, "tokenizer.bin"));
}

void run_train_recommender(const RunConfig& cfg) {
  cfg.validate();
  SplitDataset ds = load_split(join(cfg.workdir, "split.bin"));
  EmbeddingBase eb = load_embeddings(join(cfg.workdir, "embeddings.bin"));
  SigmaVae tok = SigmaVae::load(join(cfg.workdir, "tokenizer.bin"));
  TokenCache tc = build_token_cache(tok, eb);

  Vocab vocab;
  vocab.category_names = ds.category_names;
  vocab.brand_names = ds.brand_names;

  Rng rng(static_cast<std::uint64_t>(cfg.seed) * 313 + 2);
  RecModel model;
  model.ablation = cfg.ablation;
  BackboneConfig bcfg;
  bcfg.E = cfg.E;
  bcfg.layers = cfg.layers;
  bcfg.D_z = cfg.D_z;
  bcfg.D_c = cfg.D_c;
  model.backbone = std::make_unique<Backbone>(bcfg, vocab, rng);
  model.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end,
                                  cfg.inference_steps);
  if (cfg.ablation == "no_diffusion") {
    model.projection = std::make_unique<Linear>(cfg.D_c, eb.D, rng);
  } else {
    DenoiserConfig dcfg;
    dcfg.d = eb.D;
    dcfg.D_c = cfg.D_c;
    dcfg.E = cfg.denoiser_E;
    dcfg.H = cfg.denoiser_H;
    dcfg.T = cfg.T;
    model.denoiser = std::make_unique<Denoiser>(dcfg, rng);
  }

  ParamRefs params = model.backbone->params();
  if (model.denoiser) append(params, model.denoiser->params());
  if (model.projection) append(params, model.projection->params());
  AdamW opt(params, cfg.lr_backbone, cfg.wd_backbone);
  TrainLog log(join(cfg.workdir, "train_log_rec.tsv"), cfg.hash());

  const int h_cap = history_cap(cfg, bcfg.max_positions);
  const double gamma2 = cfg.ablation == "no_disp" ? 0.0 : cfg.gamma2;

  // deterministic validation subsample for model selection
  std::vector<Example> valid_sub = ds.valid;
  {
    Rng vrng(static_cast<std::uint64_t>(cfg.seed) * 577 + 3);
    for (int i = static_cast<int>(valid_sub.size()) - 1; i > 0; --i)
      std::swap(valid_sub[i], valid_sub[vrng.below(static_cast<std::uint64_t>(i) + 1)]);
    if (static_cast<int>(valid_sub.size()) > cfg.valid_subsample)
      valid_sub.resize(cfg.valid_subsample);
  }
  Rng valid_rng(static_cast<std::uint64_t>(cfg.seed) * 977 + 5);

  double best_hr = -1.0;
  std::vector<Mat> best_params = snapshot_params(params);

  const int n = static_cast<int>(ds.train.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs_rec; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    double acc_llm = 0, acc_diff = 0, acc_disp = 0;
    int batches = 0;

    for (int start = 0; start < n; start += cfg.batch_size) {
      int B = std::min(cfg.batch_size, n - start);
      std::vector<PreparedTrain> prep;
      prep.reserve(B);
      for (int b = 0; b < B; ++b)
        prep.push_back(prepare_train(ds.train[order[start + b]], ds, tc, vocab, cfg,
                                     h_cap));

      // pass A: backbone forwards, collect conditions and logit gradients
      double l_llm = 0.0;
      std::vector<Mat> dlogits(B);
      Mat C(B, cfg.D_c);
      for (int b = 0; b < B; ++b) {
        auto out = model.backbone->forward(prep[b].seq);
        l_llm += Backbone::llm_loss(out.logits, prep[b].targets) / B;
        dlogits[b] = Backbone::llm_loss_grad(out.logits, prep[b].targets) / B;
        C.row(b) =
            model.backbone->aggregate_condition(out.hidden, prep[b].gen_pos).transpose();
      }

      opt.zero_grad();
      double l_diff = 0, l_disp = 0;
      Mat dC = Mat::Zero(B, cfg.D_c);
      if (cfg.gamma1 != 0.0) {
        if (cfg.ablation == "no_diffusion") {
          Mat Y0(B, eb.D);
          for (int b = 0; b < B; ++b)
            Y0.row(b) = eb.item_vectors.row(prep[b].target_item);
          Mat y_hat = model.projection->forward(C);
          Mat err = y_hat - Y0;
          l_diff = err.array().square().rowwise().sum().mean();
          dC = model.projection->backward(cfg.gamma1 * 2.0 / B * err);
        } else {
          DiffusionBatch db;
          db.y0.resize(B, eb.D);
          db.eps.resize(B, eb.D);
          db.c = C;
          db.t.resize(B);
          db.use_dummy.resize(B);
          for (int b = 0; b < B; ++b) {
            db.y0.row(b) = eb.item_vectors.row(prep[b].target_item);
            db.t[b] = 1 + static_cast<int>(rng.below(cfg.T));
            db.eps.row(b) = rng.gaussian_vec(eb.D).transpose();
            db.use_dummy[b] = rng.bernoulli(cfg.zeta) ? 1 : 0;
          }
          auto losses = diffusion_losses(*model.denoiser, model.schedule, db, cfg.iota,
                                         gamma2, true, &dC, cfg.gamma1);
          l_diff = losses.diff;
          l_disp = losses.disp;
        }
      }

      // pass B: recompute backbone forwards and apply both gradient paths
      for (int b = 0; b < B; ++b) {
        auto out = model.backbone->forward(prep[b].seq);
        model.backbone->aggregate_condition(out.hidden, prep[b].gen_pos);
        model.backbone->backward(dlogits[b], dC.row(b).transpose(), prep[b].gen_pos);
      }
      opt.step();

      acc_llm += l_llm;
      acc_diff += l_diff;
      acc_disp += l_disp;
      ++batches;
    }

    double total = acc_llm / batches +
                   cfg.gamma1 * (acc_diff / batches + gamma2 * acc_disp / batches);
    log.record("rec", epoch + 1, 0, acc_llm / batches, acc_diff / batches,
               acc_disp / batches, total);

    if (!valid_sub.empty()) {
      MetricReport mr = evaluate_model(model, tc, ds, eb, cfg, valid_sub, valid_rng);
      log.record("valid_hr10", epoch + 1, 0, 0, 0, 0, mr.hr10);
      if (mr.hr10 > best_hr) {
        best_hr = mr.hr10;
        best_params = snapshot_params(params);
      }
    }
  }

  if (best_hr >= 0.0) restore_params(params, best_params);
  model.save(join(cfg.workdir, "model.bin"));
}

EvalSummary run_evaluate(const RunConfig& cfg, const std::string& split) {
  cfg.validate();
  SplitDataset ds = load_split(join(cfg.workdir, "split.bin"));
  EmbeddingBase eb = load_embeddings(join(cfg.workdir, "embeddings.bin"));
  SigmaVae tok = SigmaVae::load(join(cfg.workdir, "tokenizer.bin"));
  RecModel model = RecModel::load(join(cfg.workdir, "model.bin"));
  TokenCache tc = build_token_cache(tok, eb);

  const std::vector<Example>* examples = nullptr;
  if (split == "test") examples = &ds.test;
  else if (split == "valid") examples = &ds.valid;
  else throw ConfigError("evaluate split must be valid | test, got " + split);
  if (examples->empty()) throw EmptyInputError("no examples in split " + split);

  EvalSummary s;
  for (int r = 0; r < cfg.eval_seeds; ++r) {
    Rng base(static_cast<std::uint64_t>(cfg.seed) * 7919 + 17 * r + 1);
    s.per_seed.push_back(evaluate_model(model, tc, ds, eb, cfg, *examples, base));
  }

  auto mean_std = [&](auto getter, double& mean, double& stdev) {
    double acc = 0.0;
    for (const auto& mr : s.per_seed) acc += getter(mr);
    mean = acc / s.per_seed.size();
    double var = 0.0;
    for (const auto& mr : s.per_seed) var += (getter(mr) - mean) * (getter(mr) - mean);
    stdev = s.per_seed.size() > 1 ? std::sqrt(var / (s.per_seed.size() - 1)) : 0.0;
  };
  mean_std([](const MetricReport& m) { return m.hr10; }, s.hr10_mean, s.hr10_std);
  mean_std([](const MetricReport& m) { return m.hr20; }, s.hr20_mean, s.hr20_std);
  mean_std([](const MetricReport& m) { return m.ndcg10; }, s.ndcg10_mean, s.ndcg10_std);
  mean_std([](const MetricReport& m) { return m.ndcg20; }, s.ndcg20_mean, s.ndcg20_std);

  MetricReport pop = popularity_baseline(ds, split);

  std::ofstream out(join(cfg.workdir, "metrics.tsv"));
  if (!out) throw IoError("cannot write metrics.tsv");
  out.precision(10);
  out << "method\tsplit\tmetric\tK\tseed\tvalue\n";
  for (std::size_t r = 0; r < s.per_seed.size(); ++r) {
    const auto& mr = s.per_seed[r];
    out << "model\t" << split << "\thr\t10\t" << r << "\t" << mr.hr10 << "\n";
    out << "model\t" << split << "\thr\t20\t" << r << "\t" << mr.hr20 << "\n";
    out << "model\t" << split << "\tndcg\t10\t" << r << "\t" << mr.ndcg10 << "\n";
    out << "model\t" << split << "\tndcg\t20\t" << r << "\t" << mr.ndcg20 << "\n";
  }
  out << "model_mean\t" << split << "\thr\t10\t-\t" << s.hr10_mean << "\n";
  out << "model_std\t" << split << "\thr\t10\t-\t" << s.hr10_std << "\n";
  out << "model_mean\t" << split << "\thr\t20\t-\t" << s.hr20_mean << "\n";
  out << "model_std\t" << split << "\thr\t20\t-\t" << s.hr20_std << "\n";
  out << "model_mean\t" << split << "\tndcg\t10\t-\t" << s.ndcg10_mean << "\n";
  out << "model_std\t" << split << "\tndcg\t10\t-\t" << s.ndcg10_std << "\n";
  out << "model_mean\t" << split << "\tndcg\t20\t-\t" << s.ndcg20_mean << "\n";
  out << "model_std\t" << split << "\tndcg\t20\t-\t" << s.ndcg20_std << "\n";
  out << "popularity\t" << split << "\thr\t10\t-\t" << pop.hr10 << "\n";
  out << "popularity\t" << split << "\thr\t20\t-\t" << pop.hr20 << "\n";
  out << "popularity\t" << split << "\tndcg\t10\t-\t" << pop.ndcg10 << "\n";
  out << "popularity\t" << split << "\tndcg\t20\t-\t" << pop.ndcg20 << "\n";
  out << "random\t" << split << "\thr\t10\t-\t" << random_baseline_hr(ds, 10) << "\n";
  out << "random\t" << split << "\thr\t20\t-\t" << random_baseline_hr(ds, 20) << "\n";
  return s;
}

MetricReport popularity_baseline(const SplitDataset& ds, const std::string& split) {
  const std::vector<Example>& examples = split == "valid" ? ds.valid : ds.test;
  std::vector<long> counts(ds.n_items, 0);
  for (const auto& seq : ds.train_seq)
    for (int j : seq) ++counts[j];

  Vec scores(ds.n_items);
  for (int j = 0; j < ds.n_items; ++j)
    scores[j] = ds.item_in_train[j] ? static_cast<double>(counts[j]) : -1e300;

  std::vector<std::vector<int>> rankings;
  std::vector<int> targets;
  for (const auto& ex : examples) {
    rankings.push_back(rank_topk(scores, 20, ex.history));
    targets.push_back(ex.target);
  }
  return compute_metrics(rankings, targets);
}

double random_baseline_hr(const SplitDataset& ds, int K) {
  long m = std::count(ds.item_in_train.begin(), ds.item_in_train.end(),
                      static_cast<char>(1));
  if (m == 0) throw EmptyInputError("empty training item vocabulary");
  return std::min(1.0, static_cast<double>(K) / static_cast<double>(m));
}

// --- reconstruction benchmark -----------------------------------------------

BenchCurves reconstruct_bench_on(const Mat& X, int train_steps, int eval_every,
                                 int seed, const RunConfig& cfg) {
  const int D = static_cast<int>(X.cols());
  const int n = static_cast<int>(X.rows());
  const int latent = cfg.K * cfg.D_z;  // matched latent capacity across methods
  const int bs = std::min(cfg.batch_size, n);

  Rng init_rng(static_cast<std::uint64_t>(seed) * 11 + 1);

  GaussianVae vae(D, latent, cfg.hidden, 0.1, init_rng);
  QuantizedConfig qcfg;
  qcfg.D = D;
  qcfg.code_dim = latent;
  qcfg.hidden = cfg.hidden;
  VqVae vq(qcfg, init_rng);
  RqVae rq(qcfg, init_rng);

  TokenizerConfig tcfg;
  tcfg.K = cfg.K;
  tcfg.rho = cfg.rho;
  tcfg.beta = cfg.beta;
  tcfg.D = D;
  tcfg.D_z = cfg.D_z;
  tcfg.hidden = cfg.hidden;
  tcfg.gamma_floor = cfg.gamma_floor;
  SigmaVae sigma(tcfg, init_rng);

  DenoiserConfig dcfg;
  dcfg.d = D;
  dcfg.D_c = 8;
  dcfg.E = cfg.denoiser_E;
  dcfg.H = cfg.denoiser_H;
  dcfg.T = cfg.T;
  Denoiser den(dcfg, init_rng);
  NoiseSchedule sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end,
                                       cfg.inference_steps);

  AdamW opt_vae(vae.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);
  AdamW opt_vq(vq.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);
  AdamW opt_rq(rq.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);
  AdamW opt_sigma(sigma.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);
  AdamW opt_den(den.params(), cfg.lr_tokenizer, cfg.wd_tokenizer);

  Rng data_rng(static_cast<std::uint64_t>(seed) * 13 + 2);
  Rng step_rng(static_cast<std::uint64_t>(seed) * 17 + 3);

  // diffusion reconstruction is evaluated on a fixed subset to keep the
  // benchmark fast; the noising path is resampled identically per checkpoint
  const int n_sub = std::min(256, n);
  Mat X_sub = X.topRows(n_sub);
  const int t_star = cfg.T / 2;

  BenchCurves curves;
  curves.methods = {"vae", "vq_vae", "rq_vae", "sigma_vae", "diffusion"};
  curves.mse.resize(curves.methods.size());

  for (int step = 1; step <= train_steps; ++step) {
    Mat batch(bs, D);
    for (int b = 0; b < bs; ++b)
      batch.row(b) = X.row(data_rng.below(static_cast<std::uint64_t>(n)));

    vae.train_step(batch, opt_vae, step_rng);
    vq.train_step(batch, opt_vq, step_rng);
    rq.train_step(batch, opt_rq, step_rng);
    if (!sigma.calibrated()) sigma.calibrate_gamma(batch);
    sigma.train_step(batch, opt_sigma, step_rng);

    {
      DiffusionBatch db;
      db.y0 = batch;
      db.c = Mat::Zero(bs, dcfg.D_c);
      db.t.resize(bs);
      db.eps.resize(bs, D);
      db.use_dummy.assign(bs, 1);  // unconditional reconstructor
      for (int b = 0; b < bs; ++b) {
        db.t[b] = 1 + static_cast<int>(step_rng.below(cfg.T));
        db.eps.row(b) = step_rng.gaussian_vec(D).transpose();
      }
      diffusion_losses(den, sched, db, cfg.iota, 0.0, true, nullptr, 1.0);
      opt_den.step();
      opt_den.zero_grad();
    }

    if (step % eval_every == 0 || step == train_steps) {
      curves.steps.push_back(step);
      curves.mse[0].push_back(vae.reconstruction_mse(X));
      curves.mse[1].push_back(vq.reconstruction_mse(X));
      curves.mse[2].push_back(rq.reconstruction_mse(X));
      curves.mse[3].push_back(sigma_vae_mse(sigma, X));
      Rng eval_rng(static_cast<std::uint64_t>(seed) * 19 + 7 * step);
      Mat eps = eval_rng.gaussian_mat(n_sub, D);
      Mat noised(n_sub, D);
      for (int b = 0; b < n_sub; ++b)
        noised.row(b) = forward_noise(X_sub.row(b).transpose(), t_star,
                                      eps.row(b).transpose(), sched)
                            .transpose();
      Mat rec = denoise_from(den, sched, noised, t_star, eval_rng);
      curves.mse[4].push_back((rec - X_sub).squaredNorm() / n_sub);
    }
  }
  return curves;
}

BenchCurves run_reconstruct_bench(const RunConfig& cfg) {
  cfg.validate();
  ensure_workdir(cfg);
  Mat X = synthetic_lowrank(2048, cfg.D, 8, cfg.seed);
  BenchCurves curves = reconstruct_bench_on(X, 2000, 200, cfg.seed, cfg);

  std::ofstream out(join(cfg.workdir, "reconstruct_bench.tsv"));
  if (!out) throw IoError("cannot write reconstruct_bench.tsv");
  out.precision(10);
  out << "method\tstep\tmse\n";
  for (std::size_t m = 0; m < curves.methods.size(); ++m)
    for (std::size_t i = 0; i < curves.steps.size(); ++i)
      out << curves.methods[m] << "\t" << curves.steps[i] << "\t" << curves.mse[m][i]
          << "\n";
  return curves;
}

Mat synthetic_lowrank(int n, int dim, int rank, int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) * 23 + 9);
  Mat A = rng.gaussian_mat(n, rank);
  Mat B = rng.gaussian_mat(rank, dim);
  return A * B / std::sqrt(static_cast<double>(rank));
}

}  // namespace contrec
