#include "contrec/backbone.hpp"

#include <cmath>
#include <iostream>

namespace contrec {

int Vocab::category_token(int c) const {
  if (c < 0 || c >= n_categories())
    throw ConfigError("unknown category label id " + std::to_string(c));
  return 3 + c;
}

int Vocab::brand_token(int b) const {
  if (b < 0 || b >= n_brands())
    throw ConfigError("unknown brand label id " + std::to_string(b));
  return 3 + n_categories() + b;
}

HybridSequence build_sequence(const Mat& user_tokens,
                              const std::vector<Mat>& history_item_tokens,
                              const std::vector<std::pair<int, int>>& history_labels,
                              const Vocab& vocab) {
  if (history_item_tokens.size() != history_labels.size())
    throw ShapeError("history token/label count mismatch");

  HybridSequence seq;
  auto push_discrete = [&](int tok) {
    SeqElem e;
    e.continuous = false;
    e.token_id = tok;
    seq.push_back(e);
  };
  auto push_block = [&](const Mat& tokens) {
    push_discrete(Vocab::kZStart);
    for (int k = 0; k < tokens.rows(); ++k) {
      SeqElem e;
      e.continuous = true;
      e.z = tokens.row(k).transpose();
      seq.push_back(e);
    }
    push_discrete(Vocab::kZEnd);
  };

  push_block(user_tokens);
  for (std::size_t i = 0; i < history_item_tokens.size(); ++i) {
    push_discrete(vocab.category_token(history_labels[i].first));
    push_discrete(vocab.brand_token(history_labels[i].second));
    push_block(history_item_tokens[i]);
  }
  return seq;
}

Backbone::Backbone(const BackboneConfig& cfg, const Vocab& vocab, Rng& rng)
    : cfg_(cfg),
      vocab_(vocab),
      tok_emb_(vocab.size(), cfg.E),
      pos_emb_(cfg.max_positions, cfg.E),
      cont_proj_(cfg.D_z, cfg.E, rng),
      final_ln_(cfg.E),
      out_head_(cfg.E, vocab.size(), rng),
      cond_ln_(cfg.E),
      cond_net_(cfg.E, cfg.D_c, rng) {
  if (cfg.layers < 1 || cfg.layers > 4) throw ConfigError("backbone layers must be 1..4");
  tok_emb_.init_gaussian(rng, 0.02);
  pos_emb_.init_gaussian(rng, 0.02);
  for (int l = 0; l < cfg.layers; ++l) blocks_.emplace_back(cfg.E, /*causal=*/true, rng);
}

HybridSequence Backbone::truncate_to_cap(const HybridSequence& seq) const {
  if (static_cast<int>(seq.size()) <= cfg_.max_positions) return seq;
  // keep the user block (up to the first z_end), drop oldest item blocks
  std::size_t user_end = 0;
  while (user_end < seq.size() &&
         !(!seq[user_end].continuous && seq[user_end].token_id == Vocab::kZEnd))
    ++user_end;
  ++user_end;
  HybridSequence head(seq.begin(), seq.begin() + user_end);
  std::size_t drop_to = user_end;
  while (seq.size() - drop_to + head.size() > static_cast<std::size_t>(cfg_.max_positions)) {
    // advance past one item block: two labels, z_start..z_end
    std::size_t p = drop_to;
    while (p < seq.size() &&
           !(!seq[p].continuous && seq[p].token_id == Vocab::kZEnd))
      ++p;
    drop_to = p + 1;
    if (drop_to >= seq.size()) break;
  }
  std::cerr << "backbone: input over cap, truncated oldest items\n";
  head.insert(head.end(), seq.begin() + drop_to, seq.end());
  return head;
}

BackboneOut Backbone::forward(const HybridSequence& raw_seq) {
  HybridSequence seq = truncate_to_cap(raw_seq);
  const int L = static_cast<int>(seq.size());
  if (L == 0) throw ShapeError("empty sequence");

  discrete_pos_.clear();
  cont_pos_.clear();
  discrete_tok_.clear();
  Mat cont_inputs(0, cfg_.D_z);
  std::vector<Vec> cont_rows;
  for (int p = 0; p < L; ++p) {
    if (seq[p].continuous) {
      if (seq[p].z.size() != cfg_.D_z) throw ShapeError("continuous token width mismatch");
      cont_pos_.push_back(p);
      cont_rows.push_back(seq[p].z);
    } else {
      if (seq[p].token_id < 0 || seq[p].token_id >= vocab_.size())
        throw ConfigError("token id out of vocabulary");
      discrete_pos_.push_back(p);
      discrete_tok_.push_back(seq[p].token_id);
    }
  }

  Mat x(L, cfg_.E);
  for (std::size_t i = 0; i < discrete_pos_.size(); ++i)
    x.row(discrete_pos_[i]) = tok_emb_.v.row(discrete_tok_[i]);
  if (!cont_rows.empty()) {
    Mat cin(static_cast<int>(cont_rows.size()), cfg_.D_z);
    for (std::size_t i = 0; i < cont_rows.size(); ++i) cin.row(static_cast<int>(i)) = cont_rows[i].transpose();
    Mat cproj = cont_proj_.forward(cin);
    for (std::size_t i = 0; i < cont_pos_.size(); ++i)
      x.row(cont_pos_[i]) = cproj.row(static_cast<int>(i));
  }
  for (int p = 0; p < L; ++p) x.row(p) += pos_emb_.v.row(p);

  for (auto& block : blocks_) x = block.forward(x);
  hidden_ = final_ln_.forward(x);

  BackboneOut out;
  out.hidden = hidden_;
  out.logits = out_head_.forward(hidden_);
  return out;
}

double Backbone::llm_loss(const Mat& logits,
                          const std::vector<std::pair<int, int>>& targets) {
  double acc = 0.0;
  for (const auto& [pos, tok] : targets) {
    Vec p = softmax(logits.row(pos).transpose());
    acc -= std::log(std::max(p[tok], 1e-300));
  }
  return acc / static_cast<double>(targets.size());
}

Mat Backbone::llm_loss_grad(const Mat& logits,
                            const std::vector<std::pair<int, int>>& targets) {
  Mat g = Mat::Zero(logits.rows(), logits.cols());
  const double w = 1.0 / static_cast<double>(targets.size());
  for (const auto& [pos, tok] : targets) {
    Vec p = softmax(logits.row(pos).transpose());
    g.row(pos) += w * p.transpose();
    g(pos, tok) -= w;
  }
  return g;
}

Vec Backbone::aggregate_condition(const Mat& hidden,
                                  const std::vector<int>& gen_positions) {
  if (gen_positions.empty())
    throw ShapeError("condition aggregation needs at least one generated position");
  Mat mean = Mat::Zero(1, cfg_.E);
  for (int p : gen_positions) mean.row(0) += hidden.row(p);
  mean /= static_cast<double>(gen_positions.size());
  gen_count_ = static_cast<int>(gen_positions.size());
  return cond_net_.forward(cond_ln_.forward(mean)).row(0).transpose();
}

void Backbone::backward(const Mat& dlogits, const Vec& dc,
                        const std::vector<int>& gen_positions) {
  Mat dhidden = out_head_.backward(dlogits);
  if (dc.size() > 0 && !gen_positions.empty()) {
    Mat dmean = cond_ln_.backward(cond_net_.backward(dc.transpose()));
    for (int p : gen_positions)
      dhidden.row(p) += dmean.row(0) / static_cast<double>(gen_positions.size());
  }
  Mat dx = final_ln_.backward(dhidden);
  for (std::size_t l = blocks_.size(); l-- > 0;) dx = blocks_[l].backward(dx);

  for (int p = 0; p < dx.rows(); ++p) pos_emb_.g.row(p) += dx.row(p);
  for (std::size_t i = 0; i < discrete_pos_.size(); ++i)
    tok_emb_.g.row(discrete_tok_[i]) += dx.row(discrete_pos_[i]);
  if (!cont_pos_.empty()) {
    Mat dcont(static_cast<int>(cont_pos_.size()), cfg_.E);
    for (std::size_t i = 0; i < cont_pos_.size(); ++i)
      dcont.row(static_cast<int>(i)) = dx.row(cont_pos_[i]);
    cont_proj_.backward(dcont);  // tokenizer stays frozen; input grads dropped
  }
}

std::pair<int, int> Backbone::predict_semantics(const HybridSequence& prompt) {
  BackboneOut out = forward(prompt);
  const int last = static_cast<int>(out.logits.rows()) - 1;
  int best_cat = 0;
  double best = -1e300;
  for (int c = 0; c < vocab_.n_categories(); ++c) {
    double v = out.logits(last, vocab_.category_token(c));
    if (v > best) {  // strict: ties go to the lower label id
      best = v;
      best_cat = c;
    }
  }
  HybridSequence with_cat = prompt;
  SeqElem e;
  e.continuous = false;
  e.token_id = vocab_.category_token(best_cat);
  with_cat.push_back(e);
  BackboneOut out2 = forward(with_cat);
  const int last2 = static_cast<int>(out2.logits.rows()) - 1;
  int best_brand = 0;
  best = -1e300;
  for (int b = 0; b < vocab_.n_brands(); ++b) {
    double v = out2.logits(last2, vocab_.brand_token(b));
    if (v > best) {
      best = v;
      best_brand = b;
    }
  }
  return {best_cat, best_brand};
}

ParamRefs Backbone::params() {
  ParamRefs ps;
  ps.push_back(&tok_emb_);
  ps.push_back(&pos_emb_);
  append(ps, cont_proj_.params());
  for (auto& b : blocks_) append(ps, b.params());
  append(ps, final_ln_.params());
  append(ps, out_head_.params());
  append(ps, cond_ln_.params());
  append(ps, cond_net_.params());
  return ps;
}

void Backbone::save(BinaryWriter& w) const {
  w.str("backbone");
  w.u32(1);  // sequence layout version
  w.u32(static_cast<std::uint32_t>(cfg_.E));
  w.u32(static_cast<std::uint32_t>(cfg_.layers));
  w.u32(static_cast<std::uint32_t>(cfg_.D_z));
  w.u32(static_cast<std::uint32_t>(cfg_.D_c));
  w.u32(static_cast<std::uint32_t>(cfg_.max_positions));
  w.u32(static_cast<std::uint32_t>(vocab_.category_names.size()));
  for (const auto& s : vocab_.category_names) w.str(s);
  w.u32(static_cast<std::uint32_t>(vocab_.brand_names.size()));
  for (const auto& s : vocab_.brand_names) w.str(s);
  save_params(w, const_cast<Backbone*>(this)->params());
}

Backbone Backbone::load(BinaryReader& r) {
  if (r.str() != "backbone") throw IoError("expected backbone section");
  if (r.u32() != 1) throw IoError("unsupported sequence layout version");
  BackboneConfig cfg;
  cfg.E = static_cast<int>(r.u32());
  cfg.layers = static_cast<int>(r.u32());
  cfg.D_z = static_cast<int>(r.u32());
  cfg.D_c = static_cast<int>(r.u32());
  cfg.max_positions = static_cast<int>(r.u32());
  Vocab vocab;
  for (std::uint32_t i = 0, n = r.u32(); i < n; ++i)
    vocab.category_names.push_back(r.str());
  for (std::uint32_t i = 0, n = r.u32(); i < n; ++i)
    vocab.brand_names.push_back(r.str());
  Rng scratch(0);
  Backbone model(cfg, vocab, scratch);
  load_params(r, model.params());
  return model;
}

}  // namespace contrec
