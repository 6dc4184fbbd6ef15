#include "contrec/data.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace contrec {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

int intern(std::unordered_map<std::string, int>& index, std::vector<std::string>& names,
           const std::string& key) {
  auto it = index.find(key);
  if (it != index.end()) return it->second;
  int id = static_cast<int>(names.size());
  index.emplace(key, id);
  names.push_back(key);
  return id;
}

}  // namespace

InteractionDataset load_dataset(const std::string& interactions_path,
                                const std::string& catalog_path) {
  std::ifstream cat_in(catalog_path);
  if (!cat_in) throw IoError("cannot open catalog file: " + catalog_path);
  std::ifstream int_in(interactions_path);
  if (!int_in) throw IoError("cannot open interactions file: " + interactions_path);

  InteractionDataset ds;
  std::unordered_map<std::string, int> user_index, item_index;
  std::unordered_map<std::string, CatalogEntry> catalog_by_id;

  std::string line;
  int lineno = 0;
  while (std::getline(cat_in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 4)
      throw ParseError(catalog_path + ":" + std::to_string(lineno) +
                       ": expected 4 tab-separated fields, got " +
                       std::to_string(fields.size()));
    catalog_by_id[fields[0]] = CatalogEntry{fields[0], fields[1], fields[2], fields[3]};
  }

  struct RawEvent {
    std::string user, item;
    std::int64_t ts;
    int order;
  };
  std::vector<RawEvent> events;
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;

  lineno = 0;
  while (std::getline(int_in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 3)
      throw ParseError(interactions_path + ":" + std::to_string(lineno) +
                       ": expected 3 tab-separated fields, got " +
                       std::to_string(fields.size()));
    std::int64_t ts;
    try {
      std::size_t pos = 0;
      ts = std::stoll(fields[2], &pos);
      if (pos != fields[2].size()) throw std::invalid_argument("trailing chars");
    } catch (const std::exception&) {
      throw ParseError(interactions_path + ":" + std::to_string(lineno) +
                       ": bad timestamp '" + fields[2] + "'");
    }
    if (!seen.insert({fields[0], fields[1], ts}).second) continue;  // duplicate triple
    events.push_back({fields[0], fields[1], ts, static_cast<int>(events.size())});
  }
  if (events.empty()) throw EmptyInputError("no interactions in " + interactions_path);

  std::stable_sort(events.begin(), events.end(), [](const RawEvent& a, const RawEvent& b) {
    return a.ts < b.ts;
  });

  std::unordered_map<std::string, int> brand_index, category_index;
  for (const auto& e : events) {
    int u = intern(user_index, ds.user_ids, e.user);
    int i = intern(item_index, ds.item_ids, e.item);
    ds.interactions.push_back({u, i, e.ts});
  }
  // Catalog-only items are still registered so external embeddings can cover them.
  std::vector<std::string> cat_ids;
  for (const auto& [id, entry] : catalog_by_id) cat_ids.push_back(id);
  std::sort(cat_ids.begin(), cat_ids.end());
  for (const auto& id : cat_ids) intern(item_index, ds.item_ids, id);

  for (const auto& item_id : ds.item_ids) {
    auto it = catalog_by_id.find(item_id);
    CatalogEntry entry = it != catalog_by_id.end()
                             ? it->second
                             : CatalogEntry{item_id, "unknown", "unknown", "unknown"};
    ds.item_brand.push_back(intern(brand_index, ds.brand_names, entry.brand));
    ds.item_category.push_back(intern(category_index, ds.category_names, entry.category));
    ds.catalog.push_back(std::move(entry));
  }
  return ds;
}

SplitDataset split_by_timepoint(const InteractionDataset& ds, double q1, double q2,
                                int max_len) {
  if (!(0.0 < q1 && q1 < q2 && q2 < 1.0))
    throw ConfigError("split percentiles must satisfy 0 < q1 < q2 < 1");
  const auto& events = ds.interactions;
  const std::size_t n = events.size();
  if (n == 0) throw EmptyInputError("cannot split empty dataset");

  std::vector<std::int64_t> ts(n);
  for (std::size_t i = 0; i < n; ++i) ts[i] = events[i].timestamp;
  // events are already timestamp-sorted
  auto quantile = [&](double q) {
    std::size_t idx = static_cast<std::size_t>(
        std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(q * n)) - 1));
    return ts[std::min(idx, n - 1)];
  };

  SplitDataset out;
  out.max_len = max_len;
  out.n_users = ds.n_users();
  out.n_items = ds.n_items();
  out.t_q1 = quantile(q1);
  out.t_q2 = quantile(q2);
  out.item_brand = ds.item_brand;
  out.item_category = ds.item_category;
  out.brand_names = ds.brand_names;
  out.category_names = ds.category_names;
  out.item_ids = ds.item_ids;
  out.item_in_train.assign(ds.n_items(), 0);
  out.train_seq.assign(ds.n_users(), {});

  std::vector<std::pair<int, int>> valid_events, test_events;  // (user, item), time order
  for (const auto& e : events) {
    if (e.timestamp <= out.t_q1) {
      out.train_seq[e.user].push_back(e.item);
      out.item_in_train[e.item] = 1;
    } else if (e.timestamp <= out.t_q2) {
      valid_events.push_back({e.user, e.item});
    } else {
      test_events.push_back({e.user, e.item});
    }
  }

  std::size_t n_train_events = 0;
  for (const auto& s : out.train_seq) n_train_events += s.size();
  if (n_train_events == 0 || valid_events.empty() || test_events.empty()) {
    std::ostringstream msg;
    msg << "empty split segment: train=" << n_train_events
        << " valid=" << valid_events.size() << " test=" << test_events.size()
        << " (t_q1=" << out.t_q1 << ", t_q2=" << out.t_q2 << ", q1=" << q1
        << ", q2=" << q2 << ")";
    throw SplitError(msg.str());
  }

  for (int u = 0; u < out.n_users; ++u) {
    const auto& seq = out.train_seq[u];
    if (seq.size() < 2) continue;
    for (std::size_t i = 1; i < seq.size(); ++i) {
      std::size_t start = i > static_cast<std::size_t>(max_len) ? i - max_len : 0;
      out.train.push_back(
          {u, std::vector<int>(seq.begin() + start, seq.begin() + i), seq[i]});
    }
  }

  auto make_eval = [&](const std::vector<std::pair<int, int>>& evs,
                       std::vector<Example>& dst, int& dropped) {
    for (const auto& [u, item] : evs) {
      if (!out.item_in_train[item]) {
        ++dropped;
        continue;
      }
      const auto& seq = out.train_seq[u];
      if (seq.empty()) {
        ++dropped;  // no training-era history to condition on
        continue;
      }
      std::size_t start =
          seq.size() > static_cast<std::size_t>(max_len) ? seq.size() - max_len : 0;
      dst.push_back({u, std::vector<int>(seq.begin() + start, seq.end()), item});
    }
  };
  make_eval(valid_events, out.valid, out.dropped_valid);
  make_eval(test_events, out.test, out.dropped_test);
  return out;
}

EmbeddingBase build_base_embeddings(const SplitDataset& ds, int D,
                                    const std::optional<std::string>& external_path,
                                    ExternalMode mode) {
  if (D < 2) throw ConfigError("embedding width D must be >= 2");
  const int n = ds.n_users, m = ds.n_items;

  // Binary train-era implicit matrix; rating magnitudes ignored.
  Mat interactions = Mat::Zero(n, m);
  for (int u = 0; u < n; ++u)
    for (int item : ds.train_seq[u]) interactions(u, item) = 1.0;

  Eigen::BDCSVD<Mat> svd(interactions, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv[i] > 1e-10 * sv[0]) ++rank;
  if (D > rank)
    std::cerr << "warning: requested D=" << D << " exceeds interaction-matrix rank "
              << rank << "; trailing dimensions zero-padded\n";

  Mat item_svd = Mat::Zero(m, D);
  const int keep = std::min<int>({D, rank, static_cast<int>(sv.size())});
  for (int k = 0; k < keep; ++k) item_svd.col(k) = svd.matrixV().col(k) * sv[k];

  EmbeddingBase out;
  if (external_path) {
    std::ifstream in(*external_path);
    if (!in) throw IoError("cannot open external embedding file: " + *external_path);
    std::map<std::string, Vec> rows;
    std::string line;
    int lineno = 0, ext_dim = -1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::size_t tab = line.find('\t');
      if (tab == std::string::npos)
        throw ParseError(*external_path + ":" + std::to_string(lineno) +
                         ": expected `item_id \\t v_1,...,v_D`");
      std::string id = line.substr(0, tab);
      std::vector<double> vals;
      std::stringstream ss(line.substr(tab + 1));
      std::string tok;
      while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
      if (ext_dim < 0) ext_dim = static_cast<int>(vals.size());
      if (static_cast<int>(vals.size()) != ext_dim)
        throw ParseError(*external_path + ":" + std::to_string(lineno) +
                         ": inconsistent vector width");
      Vec v = Eigen::Map<Vec>(vals.data(), static_cast<int>(vals.size()));
      double norm = v.norm();
      if (norm > 0) v /= norm;  // L2-normalized per contract
      rows[id] = v;
    }
    std::string missing;
    int missing_count = 0;
    for (int j = 0; j < m; ++j) {
      if (!rows.count(ds.item_ids[j])) {
        if (missing_count < 10) missing += (missing.empty() ? "" : ", ") + ds.item_ids[j];
        ++missing_count;
      }
    }
    if (missing_count > 0)
      throw ConfigError("external embedding file missing " +
                        std::to_string(missing_count) + " items: " + missing +
                        (missing_count > 10 ? ", ..." : ""));
    Mat ext(m, ext_dim);
    for (int j = 0; j < m; ++j) ext.row(j) = rows[ds.item_ids[j]].transpose();
    if (mode == ExternalMode::Replace) {
      out.item_vectors = ext;
    } else {
      out.item_vectors = Mat(m, D + ext_dim);
      out.item_vectors << item_svd, ext;
    }
  } else {
    out.item_vectors = item_svd;
  }

  out.D = static_cast<int>(out.item_vectors.cols());
  out.user_vectors = Mat::Zero(n, out.D);
  for (int u = 0; u < n; ++u) {
    const auto& seq = ds.train_seq[u];
    if (seq.empty()) continue;
    Vec acc = Vec::Zero(out.D);
    for (int item : seq) acc += out.item_vectors.row(item).transpose();
    out.user_vectors.row(u) = acc.transpose() / static_cast<double>(seq.size());
  }
  require_finite(out.item_vectors, "item base embeddings");
  require_finite(out.user_vectors, "user base embeddings");
  return out;
}

}  // namespace contrec
