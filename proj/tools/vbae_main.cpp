#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "vbae/checkpoint.hpp"
#include "vbae/experiment.hpp"
#include "vbae/ingest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

std::vector<std::uint64_t> parse_seed_csv(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const std::size_t comma = csv.find(',', start);
    const std::string tok =
        csv.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (seeds.empty()) throw vbae::exp::ConfigError("no seeds in '" + csv + "'");
  return seeds;
}

struct CommonOverrides {
  std::string out;
  std::string seeds_csv;
  std::string variant;
  int threads = 0;

  void apply(vbae::exp::ExperimentConfig& cfg) const {
    if (!out.empty()) cfg.out_dir = out;
    if (!seeds_csv.empty()) cfg.split_seeds = parse_seed_csv(seeds_csv);
    if (!variant.empty()) {
      cfg.model.channel = vbae::model::channel_from_string(variant);
      cfg.tag = cfg.tag + "-" + variant;
    }
    if (threads > 0) cfg.threads = threads;
  }
};

int cmd_ingest(const std::string& interactions, const std::string& item_tokens,
               int min_visits, int vocab_size, std::uint64_t seed,
               const std::string& out_dir) {
  const auto inter = vbae::ingest::load_interactions(interactions, min_visits);
  const auto split = vbae::ingest::make_split(inter, seed);
  fs::create_directories(out_dir);
  vbae::ingest::save_split(
      split, (fs::path(out_dir) / ("split_" + std::to_string(seed) + ".json"))
                 .string());

  const auto stats = vbae::ingest::density_stats(inter);
  json j;
  j["n_users"] = inter.n_users;
  j["n_items"] = inter.n_items;
  j["density"] = stats.density;
  j["max_visits"] = stats.max_visits;
  j["min_visits"] = stats.min_visits;
  j["mean_visits"] = stats.mean_visits;
  j["std_visits"] = stats.std_visits;
  if (!item_tokens.empty()) {
    const auto tokens = vbae::ingest::load_item_tokens(item_tokens, inter);
    const auto features =
        vbae::ingest::build_user_features(tokens, inter, vocab_size);
    j["n_tokens"] = tokens.tokens.size();
    j["vocab_size"] = features.vocab_size;
  }
  std::cout << j.dump(2) << std::endl;
  return kExitOk;
}

int cmd_train(const std::string& config_path, std::uint64_t seed,
              const CommonOverrides& over) {
  auto cfg = vbae::exp::load_config(config_path);
  over.apply(cfg);
  cfg.split_seeds = {seed};
  const auto result = vbae::exp::run(cfg);
  std::cout << result.aggregate.dump(2) << std::endl;
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             std::uint64_t seed, const std::string& report_out, int threads) {
  const auto cfg = vbae::exp::load_config(config_path);
  auto m = vbae::checkpoint::load_checkpoint(checkpoint_path);
  const auto inter = vbae::ingest::load_interactions(cfg.dataset.interactions,
                                                     cfg.dataset.min_visits);
  const auto split = vbae::ingest::make_split(inter, seed);
  const auto observed = vbae::ingest::observed_view(inter, split);

  const bool needs_features =
      m.config().channel != vbae::model::ChannelKind::CollabOnly;
  vbae::ingest::UserFeatureMatrix features;
  if (needs_features) {
    const auto tokens =
        vbae::ingest::load_item_tokens(cfg.dataset.item_tokens, inter);
    features = vbae::ingest::build_user_features(tokens, observed,
                                                 cfg.dataset.vocab_size);
  }
  const auto ev = vbae::exp::evaluate_on_split(
      m, observed.rows, needs_features ? &features : nullptr, split.test_users,
      split.heldout, threads > 0 ? threads : cfg.threads);
  const std::string text = vbae::metrics::report_to_json(ev.report);
  if (report_out.empty()) {
    std::cout << text << std::endl;
  } else {
    std::ofstream out(report_out, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + report_out);
    out << text << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational bandwidth auto-encoder for implicit-feedback "
               "recommendation"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand(
      "ingest", "Load a dataset, write a split manifest, print stats");
  std::string in_interactions, in_tokens, in_out = ".";
  int in_min_visits = 10, in_vocab = 8000;
  std::uint64_t in_seed = 1;
  ingest->add_option("--interactions", in_interactions, "user<TAB>item TSV")
      ->required();
  ingest->add_option("--item-tokens", in_tokens,
                     "item<TAB>token<TAB>count TSV");
  ingest->add_option("--min-visits", in_min_visits, "drop sparser users");
  ingest->add_option("--vocab-size", in_vocab, "feature vocabulary size");
  ingest->add_option("--seed", in_seed, "split seed");
  ingest->add_option("--out", in_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "Train a single seed end to end");
  std::string tr_config;
  std::uint64_t tr_seed = 1;
  CommonOverrides tr_over;
  train->add_option("--config", tr_config, "experiment config JSON")->required();
  train->add_option("--seed", tr_seed, "split + model seed");
  train->add_option("--out", tr_over.out, "output directory override");
  train->add_option("--variant", tr_over.variant,
                    "channel kind override (soft|hard|stop|pass|concat|collab-only)");
  train->add_option("--threads", tr_over.threads, "prediction fan-out");

  // eval
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_config, ev_out;
  std::uint64_t ev_seed = 1;
  int ev_threads = 0;
  evalc->add_option("--checkpoint", ev_ckpt, "checkpoint JSON")->required();
  evalc->add_option("--config", ev_config, "experiment config JSON")->required();
  evalc->add_option("--seed", ev_seed, "split seed");
  evalc->add_option("--report", ev_out, "write report here (default stdout)");
  evalc->add_option("--threads", ev_threads, "prediction fan-out");

  // run
  auto* runc = app.add_subcommand("run", "Multi-seed pipeline with aggregate");
  std::string run_config;
  CommonOverrides run_over;
  runc->add_option("--config", run_config, "experiment config JSON")->required();
  runc->add_option("--out", run_over.out, "output directory override");
  runc->add_option("--seeds", run_over.seeds_csv, "comma-separated seed list");
  runc->add_option("--variant", run_over.variant,
                   "channel kind override (soft|hard|stop|pass|concat|collab-only)");
  runc->add_option("--threads", run_over.threads, "prediction fan-out");

  // compare
  auto* cmp = app.add_subcommand("compare", "Tabulate reports side by side");
  std::vector<std::string> cmp_paths;
  std::string cmp_csv;
  cmp->add_option("reports", cmp_paths, "report or aggregate JSON files")
      ->required()
      ->expected(-2);
  cmp->add_option("--csv", cmp_csv, "also write a CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*ingest)
      return cmd_ingest(in_interactions, in_tokens, in_min_visits, in_vocab,
                        in_seed, in_out);
    if (*train) return cmd_train(tr_config, tr_seed, tr_over);
    if (*evalc)
      return cmd_eval(ev_ckpt, ev_config, ev_seed, ev_out, ev_threads);
    if (*runc) {
      auto cfg = vbae::exp::load_config(run_config);
      run_over.apply(cfg);
      const auto result = vbae::exp::run(cfg);
      std::cout << result.aggregate.dump(2) << std::endl;
      return kExitOk;
    }
    if (*cmp) {
      const auto comparison = vbae::exp::compare(cmp_paths);
      std::cout << comparison.table;
      if (!cmp_csv.empty()) {
        std::ofstream out(cmp_csv, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + cmp_csv);
        out << comparison.csv;
      }
      return kExitOk;
    }
  } catch (const vbae::exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const vbae::tensor::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << std::endl;
    return kExitDivergence;
  } catch (const vbae::ingest::ParseError& e) {
    std::cerr << "input error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitIo;
  }
  return kExitOk;
}
