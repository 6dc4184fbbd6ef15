#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "contrec/config.hpp"
#include "contrec/trainer.hpp"

namespace {

contrec::RunConfig resolve_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  contrec::RunConfig cfg;
  if (!config_path.empty()) cfg = contrec::load_config(config_path);
  contrec::apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous-token generative recommender"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "flat key=value config file");
  app.add_option("--set", overrides, "override a config key (key=value)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  contrec::SynthConfig sc;
  std::string synth_interactions = "interactions.tsv", synth_catalog = "catalog.tsv";
  synth->add_option("--interactions", synth_interactions, "output interactions path");
  synth->add_option("--catalog", synth_catalog, "output catalog path");
  synth->add_option("--users", sc.n_users);
  synth->add_option("--items", sc.n_items);
  synth->add_option("--categories", sc.n_categories);
  synth->add_option("--brands", sc.n_brands);
  synth->add_option("--events-per-user", sc.events_per_user);
  synth->add_option("--preference-strength", sc.preference_strength);
  synth->add_option("--seed", sc.seed);

  auto* ingest = app.add_subcommand("ingest", "parse, split and embed a dataset");
  auto* train_tok = app.add_subcommand("train-tokenizer", "train the tokenizer");
  auto* train_rec = app.add_subcommand("train-rec", "train the recommender");
  auto* evaluate = app.add_subcommand("evaluate", "rank and score a held-out split");
  std::string split = "test";
  evaluate->add_option("--split", split, "valid | test");
  auto* bench = app.add_subcommand("reconstruct-bench",
                                   "compare reconstruction quality across tokenizers");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      contrec::generate_synth(sc, synth_interactions, synth_catalog);
      std::cout << "wrote " << synth_interactions << " and " << synth_catalog << "\n";
      return 0;
    }
    contrec::RunConfig cfg = resolve_config(config_path, overrides);
    if (ingest->parsed()) {
      auto s = contrec::run_ingest(cfg);
      std::cout << "users=" << s.n_users << " items=" << s.n_items
                << " interactions=" << s.n_interactions << "\n"
                << "train=" << s.n_train << " valid=" << s.n_valid
                << " test=" << s.n_test << " dropped_valid=" << s.dropped_valid
                << " dropped_test=" << s.dropped_test << "\n";
    } else if (train_tok->parsed()) {
      contrec::run_train_tokenizer(cfg);
      std::cout << "tokenizer saved to " << cfg.workdir << "/tokenizer.bin\n";
    } else if (train_rec->parsed()) {
      contrec::run_train_recommender(cfg);
      std::cout << "model saved to " << cfg.workdir << "/model.bin\n";
    } else if (evaluate->parsed()) {
      auto s = contrec::run_evaluate(cfg, split);
      std::cout.precision(6);
      std::cout << "HR@10 " << s.hr10_mean << " +/- " << s.hr10_std << "\n"
                << "HR@20 " << s.hr20_mean << " +/- " << s.hr20_std << "\n"
                << "NDCG@10 " << s.ndcg10_mean << " +/- " << s.ndcg10_std << "\n"
                << "NDCG@20 " << s.ndcg20_mean << " +/- " << s.ndcg20_std << "\n"
                << "metrics written to " << cfg.workdir << "/metrics.tsv\n";
    } else if (bench->parsed()) {
      auto curves = contrec::run_reconstruct_bench(cfg);
      std::cout.precision(6);
      for (std::size_t m = 0; m < curves.methods.size(); ++m)
        std::cout << curves.methods[m] << " final mse " << curves.mse[m].back()
                  << "\n";
      std::cout << "curves written to " << cfg.workdir << "/reconstruct_bench.tsv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
