#pragma once

#include <string>
#include <utility>
#include <vector>

#include "contrec/common.hpp"
#include "contrec/nn.hpp"
#include "contrec/rng.hpp"

namespace contrec {

// Discrete vocabulary: boundary markers + semantic labels + padding.
struct Vocab {
  std::vector<std::string> category_names;
  std::vector<std::string> brand_names;

  static constexpr int kPad = 0;
  static constexpr int kZStart = 1;
  static constexpr int kZEnd = 2;

  int n_categories() const { return static_cast<int>(category_names.size()); }
  int n_brands() const { return static_cast<int>(brand_names.size()); }
  int category_token(int c) const;
  int brand_token(int b) const;
  int size() const { return 3 + n_categories() + n_brands(); }
};

struct SeqElem {
  bool continuous = false;
  int token_id = Vocab::kPad;  // discrete elements
  Vec z;                       // continuous elements, width D_z
};

using HybridSequence = std::vector<SeqElem>;

// [user block] then per item [category, brand, z_start, K tokens, z_end].
// Continuous blocks are always bracketed by z_start / z_end.
HybridSequence build_sequence(const Mat& user_tokens,
                              const std::vector<Mat>& history_item_tokens,
                              const std::vector<std::pair<int, int>>& history_labels,
                              const Vocab& vocab);

struct BackboneConfig {
  int E = 32;      // model width
  int layers = 2;  // <= 4
  int D_z = 8;     // continuous token width
  int D_c = 32;    // conditioning width
  int max_positions = 256;
};

struct BackboneOut {
  Mat logits;  // L x V
  Mat hidden;  // L x E, post final layer norm
};

class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, const Vocab& vocab, Rng& rng);

  BackboneOut forward(const HybridSequence& seq);

  // Mean NLL over (position, target token) pairs and its logits gradient.
  static double llm_loss(const Mat& logits,
                         const std::vector<std::pair<int, int>>& targets);
  static Mat llm_loss_grad(const Mat& logits,
                           const std::vector<std::pair<int, int>>& targets);

  // c = condition_net(layer-normalized mean of hidden rows at gen_positions).
  Vec aggregate_condition(const Mat& hidden, const std::vector<int>& gen_positions);

  // Backpropagates dlogits plus the conditioning-path gradient dc through the
  // caches of the most recent forward/aggregate pair.
  void backward(const Mat& dlogits, const Vec& dc,
                const std::vector<int>& gen_positions);

  // Greedy labels (category index, brand index) for a prompt sequence.
  std::pair<int, int> predict_semantics(const HybridSequence& prompt);

  ParamRefs params();
  const BackboneConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }

  void save(BinaryWriter& w) const;
  static Backbone load(BinaryReader& r);

 private:
  HybridSequence truncate_to_cap(const HybridSequence& seq) const;

  BackboneConfig cfg_;
  Vocab vocab_;
  Param tok_emb_;   // V x E
  Param pos_emb_;   // max_positions x E
  Linear cont_proj_;  // D_z -> E
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
  Linear out_head_;  // E -> V
  LayerNorm cond_ln_;
  Linear cond_net_;  // E -> D_c

  // caches of the last forward
  std::vector<int> discrete_pos_, cont_pos_;
  std::vector<int> discrete_tok_;
  Mat hidden_;
  int gen_count_ = 0;
};

}  // namespace contrec
