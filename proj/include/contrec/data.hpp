#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "contrec/common.hpp"

namespace contrec {

struct Interaction {
  int user;
  int item;
  std::int64_t timestamp;
};

struct CatalogEntry {
  std::string item_id;
  std::string title;
  std::string brand;
  std::string category;
};

struct InteractionDataset {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::vector<CatalogEntry> catalog;     // aligned with item_ids
  std::vector<int> item_brand;           // label index per item
  std::vector<int> item_category;
  std::vector<std::string> brand_names;  // finite label sets, enumerated at ingest
  std::vector<std::string> category_names;
  std::vector<Interaction> interactions;  // deduplicated, sorted by timestamp

  int n_users() const { return static_cast<int>(user_ids.size()); }
  int n_items() const { return static_cast<int>(item_ids.size()); }
};

struct Example {
  int user;
  std::vector<int> history;  // chronological, length <= max_len
  int target;
};

struct SplitDataset {
  std::vector<Example> train, valid, test;
  int max_len = 20;
  int n_users = 0, n_items = 0;
  std::int64_t t_q1 = 0, t_q2 = 0;
  int dropped_valid = 0, dropped_test = 0;  // targets absent from train era
  std::vector<char> item_in_train;          // train-era item vocabulary
  std::vector<std::vector<int>> train_seq;  // per user, chronological train-era items

  // Catalog labels and ids carried through for the backbone, hybrid retrieval
  // and the external embedding interface.
  std::vector<int> item_brand, item_category;
  std::vector<std::string> brand_names, category_names;
  std::vector<std::string> item_ids;
};

struct EmbeddingBase {
  Mat user_vectors;  // n x D
  Mat item_vectors;  // m x D
  int D = 0;
};

enum class ExternalMode { Replace, Concat };

InteractionDataset load_dataset(const std::string& interactions_path,
                                const std::string& catalog_path);

SplitDataset split_by_timepoint(const InteractionDataset& ds, double q1 = 0.90,
                                double q2 = 0.95, int max_len = 20);

EmbeddingBase build_base_embeddings(
    const SplitDataset& ds, int D,
    const std::optional<std::string>& external_path = std::nullopt,
    ExternalMode mode = ExternalMode::Replace);

}  // namespace contrec
