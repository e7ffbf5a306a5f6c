#include "vbae/experiment.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "vbae/checkpoint.hpp"

namespace vbae::exp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

#ifndef VBAE_VERSION
#define VBAE_VERSION "0.1.0"
#endif

void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                    const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json history_record(const model::EpochRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["b_loss"] = r.b_loss;
  j["t_loss"] = r.t_loss;
  j["nll"] = r.nll;
  j["kl_zb"] = r.kl_zb;
  j["kl_channel"] = r.kl_channel;
  j["kl_zt"] = r.kl_zt;
  j["alpha_mean"] = r.alpha_mean;
  j["alpha_std"] = r.alpha_std;
  j["beta"] = r.beta;
  j["tau"] = r.tau;
  j["val_recall_at_20"] = r.val_recall20;
  j["val_recall_at_40"] = r.val_recall40;
  j["val_ndcg_at_100"] = r.val_ndcg100;
  if (r.lr_halved) j["lr_halved"] = true;
  return j;
}

struct Agg {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> values;
};

Agg aggregate_values(std::vector<double> values) {
  Agg a;
  a.values = std::move(values);
  const double n = static_cast<double>(a.values.size());
  for (double v : a.values) a.mean += v;
  a.mean /= n;
  if (a.values.size() > 1) {
    double ss = 0.0;
    for (double v : a.values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / (n - 1.0));
  }
  return a;
}

json agg_to_json(const Agg& a) {
  return json{{"mean", a.mean}, {"std", a.std}, {"values", a.values}};
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  reject_unknown(j,
                 {"schema_version", "tag", "dataset", "model", "split_seeds",
                  "out_dir", "threads"},
                 "experiment config");
  ExperimentConfig cfg;
  cfg.schema_version = j.value("schema_version", 1);
  if (cfg.schema_version != 1)
    throw ConfigError("unsupported schema_version " +
                      std::to_string(cfg.schema_version));
  cfg.tag = j.value("tag", cfg.tag);
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"interactions", "item_tokens", "min_visits", "vocab_size"},
                   "dataset config");
    cfg.dataset.interactions = d.value("interactions", "");
    cfg.dataset.item_tokens = d.value("item_tokens", "");
    cfg.dataset.min_visits = d.value("min_visits", cfg.dataset.min_visits);
    cfg.dataset.vocab_size = d.value("vocab_size", cfg.dataset.vocab_size);
  }
  if (j.contains("model")) {
    try {
      cfg.model = checkpoint::config_from_json(j.at("model"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("split_seeds"))
    cfg.split_seeds = j.at("split_seeds").get<std::vector<std::uint64_t>>();
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.threads = j.value("threads", cfg.threads);

  if (cfg.dataset.interactions.empty())
    throw ConfigError("dataset.interactions is required");
  if (cfg.split_seeds.empty()) throw ConfigError("split_seeds must be non-empty");
  if (cfg.dataset.min_visits < 1) throw ConfigError("min_visits must be >= 1");
  if (cfg.dataset.vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  const bool needs_features =
      cfg.model.channel != model::ChannelKind::CollabOnly;
  if (needs_features && cfg.dataset.item_tokens.empty())
    throw ConfigError("dataset.item_tokens is required for variant '" +
                      model::to_string(cfg.model.channel) + "'");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return config_from_json(j);
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["tag"] = cfg.tag;
  j["dataset"] = {{"interactions", cfg.dataset.interactions},
                  {"item_tokens", cfg.dataset.item_tokens},
                  {"min_visits", cfg.dataset.min_visits},
                  {"vocab_size", cfg.dataset.vocab_size}};
  j["model"] = checkpoint::config_to_json(cfg.model);
  j["split_seeds"] = cfg.split_seeds;
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  return j;
}

SplitEvaluation evaluate_on_split(
    model::VbaeModel& m, const std::vector<std::vector<int>>& rows,
    const ingest::UserFeatureMatrix* features,
    const std::vector<int>& eval_users,
    const std::map<int, std::vector<int>>& heldout, int threads) {
  SplitEvaluation ev;
  std::vector<std::vector<int>> fold_in;
  std::vector<std::uint64_t> keys;
  for (int u : eval_users) {
    fold_in.push_back(rows[static_cast<std::size_t>(u)]);
    keys.push_back(static_cast<std::uint64_t>(u));
  }
  Matrix feats;
  if (features != nullptr) feats = model::gather_features(*features, eval_users);
  const auto preds = m.predict_batch(fold_in, feats, keys, threads);

  std::vector<double> ndcgs, bandwidths;
  std::vector<int> activities;
  const bool gate_reported =
      m.config().channel != model::ChannelKind::Concat &&
      m.config().channel != model::ChannelKind::CollabOnly;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int u = eval_users[i];
    const auto held_it = heldout.find(u);
    if (held_it == heldout.end() || held_it->second.empty()) {
      ++ev.report.n_skipped;
      continue;
    }
    metrics::RankedList list{u, preds[i].ranking, held_it->second};
    const double r20 = *metrics::recall_at_m(list, 20);
    const double r40 = *metrics::recall_at_m(list, 40);
    const double n100 = *metrics::ndcg_at_m(list, 100);
    ev.report.recall_at_20 += r20;
    ev.report.recall_at_40 += r40;
    ev.report.ndcg_at_100 += n100;
    ++ev.report.n_users;
    ndcgs.push_back(n100);
    activities.push_back(static_cast<int>(fold_in[i].size()));
    const double bw = m.has_channel() ? preds[i].alpha : preds[i].d;
    if (gate_reported) bandwidths.push_back(bw);
    ev.per_user.push_back({u, static_cast<int>(fold_in[i].size()), bw, r20,
                           n100});
  }
  if (ev.report.n_users > 0) {
    ev.report.recall_at_20 /= ev.report.n_users;
    ev.report.recall_at_40 /= ev.report.n_users;
    ev.report.ndcg_at_100 /= ev.report.n_users;
  }
  if (ev.report.n_users >= 4)
    ev.report.quartile_ndcg_at_100 = metrics::quartile_breakdown(ndcgs, activities);
  if (bandwidths.size() >= 2) {
    const auto stats = metrics::bandwidth_stats(bandwidths, activities);
    ev.report.bandwidth_mean = stats.mean;
    ev.report.bandwidth_std = stats.std;
    ev.report.pcc_bandwidth_density = stats.pcc;
  }
  return ev;
}

RunResult run(const ExperimentConfig& cfg) {
  const auto t_start = std::chrono::steady_clock::now();
  const fs::path dir = fs::path(cfg.out_dir) / cfg.tag;
  fs::create_directories(dir);
  const fs::path fail_marker = dir / "FAILED";
  if (fs::exists(fail_marker)) fs::remove(fail_marker);

  RunResult result;
  try {
    const auto inter =
        ingest::load_interactions(cfg.dataset.interactions, cfg.dataset.min_visits);
    const bool needs_features =
        cfg.model.channel != model::ChannelKind::CollabOnly;
    ingest::ItemTokenCounts tokens;
    if (needs_features)
      tokens = ingest::load_item_tokens(cfg.dataset.item_tokens, inter);

    for (const std::uint64_t seed : cfg.split_seeds) {
      const std::string suffix = std::to_string(seed);
      const auto split = ingest::make_split(inter, seed);
      ingest::save_split(split, (dir / ("split_" + suffix + ".json")).string());

      const auto observed = ingest::observed_view(inter, split);
      ingest::UserFeatureMatrix features;
      if (needs_features)
        features =
            ingest::build_user_features(tokens, observed, cfg.dataset.vocab_size);

      model::VbaeConfig mc = cfg.model;
      mc.seed = seed;
      model::VbaeModel m(mc, inter.n_items,
                         needs_features ? features.vocab_size : 0);

      model::TrainData data;
      data.rows = &observed.rows;
      data.features = needs_features ? &features : nullptr;
      data.train_users = split.train_users;
      data.val_users = split.val_users;
      data.heldout = &split.heldout;

      if (mc.pretrain_epochs > 0)
        model::pretrain_features(m, data, mc.pretrain_epochs);
      const auto trained = model::train(m, data, cfg.threads);

      std::ostringstream hist;
      for (const auto& rec : trained.history)
        hist << history_record(rec).dump() << '\n';
      write_file(dir / ("history_" + suffix + ".jsonl"), hist.str());
      checkpoint::save_checkpoint(m, (dir / ("checkpoint_" + suffix + ".json")).string());

      auto ev = evaluate_on_split(m, observed.rows,
                                  needs_features ? &features : nullptr,
                                  split.test_users, split.heldout, cfg.threads);
      write_file(dir / ("report_" + suffix + ".json"),
                 metrics::report_to_json(ev.report) + "\n");
      write_file(dir / ("per_user_" + suffix + ".csv"),
                 metrics::per_user_csv(ev.per_user));
      result.seeds.push_back(seed);
      result.reports.push_back(ev.report);
    }

    // Aggregate across seeds.
    auto collect = [&](auto getter) {
      std::vector<double> v;
      for (const auto& r : result.reports) v.push_back(getter(r));
      return aggregate_values(std::move(v));
    };
    json agg;
    agg["format"] = "vbae-aggregate-v1";
    agg["tag"] = cfg.tag;
    agg["channel"] = model::to_string(cfg.model.channel);
    agg["seeds"] = result.seeds;
    agg["metrics"] = json::object();
    agg["metrics"]["recall_at_20"] = agg_to_json(
        collect([](const metrics::EvalReport& r) { return r.recall_at_20; }));
    agg["metrics"]["recall_at_40"] = agg_to_json(
        collect([](const metrics::EvalReport& r) { return r.recall_at_40; }));
    agg["metrics"]["ndcg_at_100"] = agg_to_json(
        collect([](const metrics::EvalReport& r) { return r.ndcg_at_100; }));
    agg["metrics"]["bandwidth_mean"] = agg_to_json(collect(
        [](const metrics::EvalReport& r) { return r.bandwidth_mean; }));
    agg["metrics"]["bandwidth_std"] = agg_to_json(
        collect([](const metrics::EvalReport& r) { return r.bandwidth_std; }));
    bool have_pcc = true;
    for (const auto& r : result.reports)
      have_pcc = have_pcc && r.pcc_bandwidth_density.has_value();
    if (have_pcc)
      agg["metrics"]["pcc_bandwidth_density"] =
          agg_to_json(collect([](const metrics::EvalReport& r) {
            return *r.pcc_bandwidth_density;
          }));
    else
      agg["metrics"]["pcc_bandwidth_density"] = nullptr;
    result.aggregate = agg;
    write_file(dir / "aggregate.json", agg.dump(2) + "\n");

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    json manifest;
    manifest["format"] = "vbae-manifest-v1";
    manifest["version"] = VBAE_VERSION;
    manifest["tag"] = cfg.tag;
    manifest["seeds"] = cfg.split_seeds;
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0')
         << fnv1a(config_to_json(cfg).dump());
    manifest["config_hash"] = hash.str();
    manifest["config"] = config_to_json(cfg);
    manifest["wall_clock_seconds"] = wall;
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    write_file(fail_marker, std::string(e.what()) + "\n");
    throw;
  }
  return result;
}

Comparison compare(const std::vector<std::string>& report_paths) {
  if (report_paths.size() < 2)
    throw ConfigError("compare needs at least two reports");

  struct Row {
    std::string label;
    double r20 = 0, r40 = 0, n100 = 0;
    double bw_mean = 0, bw_std = 0;
    std::optional<double> pcc;
  };
  std::vector<Row> rows;
  for (const auto& path : report_paths) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    json j;
    try {
      in >> j;
    } catch (const json::parse_error&) {
      throw ConfigError("report schema mismatch in " + path);
    }
    Row row;
    const std::string format = j.value("format", "");
    if (format == "vbae-report-v1") {
      const auto r = metrics::report_from_json(j.dump());
      row = {fs::path(path).stem().string(), r.recall_at_20, r.recall_at_40,
             r.ndcg_at_100,   r.bandwidth_mean, r.bandwidth_std,
             r.pcc_bandwidth_density};
    } else if (format == "vbae-aggregate-v1") {
      row.label = j.value("tag", fs::path(path).stem().string());
      try {
        const json& m = j.at("metrics");
        row.r20 = m.at("recall_at_20").at("mean").get<double>();
        row.r40 = m.at("recall_at_40").at("mean").get<double>();
        row.n100 = m.at("ndcg_at_100").at("mean").get<double>();
        row.bw_mean = m.at("bandwidth_mean").at("mean").get<double>();
        row.bw_std = m.at("bandwidth_std").at("mean").get<double>();
        if (!m.at("pcc_bandwidth_density").is_null())
          row.pcc = m.at("pcc_bandwidth_density").at("mean").get<double>();
      } catch (const json::exception&) {
        throw ConfigError("report schema mismatch in " + path);
      }
    } else {
      throw ConfigError("report schema mismatch in " + path);
    }
    rows.push_back(std::move(row));
  }

  auto best = [&](auto getter) {
    double b = getter(rows.front());
    for (const auto& r : rows) b = std::max(b, getter(r));
    return b;
  };
  const double best_r20 = best([](const Row& r) { return r.r20; });
  const double best_r40 = best([](const Row& r) { return r.r40; });
  const double best_n100 = best([](const Row& r) { return r.n100; });

  std::ostringstream table, csv;
  auto fmt = [](double v, double bestv) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v << (v == bestv ? "*" : " ");
    return s.str();
  };
  table << std::left << std::setw(24) << "run" << std::setw(12) << "Recall@20"
        << std::setw(12) << "Recall@40" << std::setw(12) << "NDCG@100"
        << std::setw(18) << "Bandwidth" << "PCC\n";
  csv << "run,recall_at_20,recall_at_40,ndcg_at_100,bandwidth_mean,"
         "bandwidth_std,pcc\n";
  for (const auto& r : rows) {
    std::ostringstream bw;
    bw << std::fixed << std::setprecision(3) << r.bw_mean << " +- "
       << r.bw_std;
    table << std::left << std::setw(24) << r.label << std::setw(12)
          << fmt(r.r20, best_r20) << std::setw(12) << fmt(r.r40, best_r40)
          << std::setw(12) << fmt(r.n100, best_n100) << std::setw(18)
          << bw.str();
    if (r.pcc)
      table << std::fixed << std::setprecision(3) << *r.pcc;
    else
      table << "n/a";
    table << '\n';
    csv << r.label << ',' << r.r20 << ',' << r.r40 << ',' << r.n100 << ','
        << r.bw_mean << ',' << r.bw_std << ',';
    if (r.pcc)
      csv << *r.pcc;
    else
      csv << "n/a";
    csv << '\n';
  }
  return {table.str(), csv.str()};
}

}  // namespace vbae::exp
