#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/synthetic.hpp"
#include "vbae/experiment.hpp"

using namespace vbae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A small on-disk dataset plus a ready experiment config.
struct CliWorld {
  std::string dir;
  std::string interactions;
  std::string tokens;
  json config;

  CliWorld() {
    dir = testsupport::make_temp_dir("exp");
    const auto data = testsupport::make_synthetic({.n_users = 60,
                                                   .n_items = 40,
                                                   .n_groups = 4,
                                                   .min_visits = 4,
                                                   .max_visits = 16,
                                                   .seed = 5});
    interactions = (fs::path(dir) / "inter.tsv").string();
    tokens = (fs::path(dir) / "tokens.tsv").string();
    testsupport::write_interactions_tsv(data.inter, interactions);
    testsupport::write_block_tokens_tsv(data.inter, 4, 10, tokens);

    config = {
        {"schema_version", 1},
        {"tag", "demo"},
        {"dataset",
         {{"interactions", interactions},
          {"item_tokens", tokens},
          {"min_visits", 2},
          {"vocab_size", 5}}},
        {"model",
         {{"channel", "soft"},
          {"latent_dim", 4},
          {"collab_hidden", 8},
          {"feature_hidden", json::array({8})},
          {"epochs", 2},
          {"batch_size", 16},
          {"lr", 0.002}}},
        {"split_seeds", json::array({1})},
        {"out_dir", (fs::path(dir) / "runs").string()},
        {"threads", 1},
    };
  }

  std::string write_config(const json& j, const std::string& name) const {
    const auto path = (fs::path(dir) / name).string();
    std::ofstream out(path, std::ios::binary);
    out << j.dump(2);
    return path;
  }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VBAE_CLI_PATH) + " " + args +
                          " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_SUITE_BEGIN("experiment");

TEST_CASE("config validation") {
  CliWorld w;

  SUBCASE("valid config parses") {
    const auto cfg = exp::config_from_json(w.config);
    CHECK(cfg.tag == "demo");
    CHECK(cfg.model.channel == model::ChannelKind::Soft);
    CHECK(cfg.split_seeds == std::vector<std::uint64_t>{1});
  }
  SUBCASE("unknown top-level key is rejected") {
    json bad = w.config;
    bad["typo_field"] = 1;
    CHECK_THROWS_AS(exp::config_from_json(bad), exp::ConfigError);
  }
  SUBCASE("unknown model key is rejected with its name") {
    json bad = w.config;
    bad["model"]["learning_rate"] = 0.1;
    CHECK_THROWS_WITH_AS(exp::config_from_json(bad),
                         doctest::Contains("learning_rate"), exp::ConfigError);
  }
  SUBCASE("missing interactions path is rejected") {
    json bad = w.config;
    bad["dataset"].erase("interactions");
    CHECK_THROWS_AS(exp::config_from_json(bad), exp::ConfigError);
  }
  SUBCASE("feature-needing variant without item tokens is rejected") {
    json bad = w.config;
    bad["dataset"].erase("item_tokens");
    CHECK_THROWS_AS(exp::config_from_json(bad), exp::ConfigError);
    bad["model"]["channel"] = "collab-only";
    CHECK_NOTHROW(exp::config_from_json(bad));
  }
  SUBCASE("empty seed list is rejected") {
    json bad = w.config;
    bad["split_seeds"] = json::array();
    CHECK_THROWS_AS(exp::config_from_json(bad), exp::ConfigError);
  }
}

TEST_CASE("run writes the full artifact set and is reproducible") {
  CliWorld w;
  const auto cfg = exp::config_from_json(w.config);
  const auto result = exp::run(cfg);
  REQUIRE(result.reports.size() == 1);

  const fs::path out = fs::path(cfg.out_dir) / "demo";
  for (const char* name :
       {"aggregate.json", "manifest.json", "split_1.json", "history_1.jsonl",
        "checkpoint_1.json", "report_1.json", "per_user_1.csv"})
    CHECK(fs::exists(out / name));
  CHECK(!fs::exists(out / "FAILED"));

  // history has one record per epoch
  std::istringstream hist(slurp(out / "history_1.jsonl"));
  int lines = 0;
  std::string line;
  while (std::getline(hist, line))
    if (!line.empty()) {
      CHECK_NOTHROW(json::parse(line));
      ++lines;
    }
  CHECK(lines == 2);

  // byte-identical aggregate on rerun
  const std::string first = slurp(out / "aggregate.json");
  exp::run(cfg);
  CHECK(slurp(out / "aggregate.json") == first);

  // report schema carries users and quartiles
  const auto rep = metrics::report_from_json(slurp(out / "report_1.json"));
  CHECK(rep.n_users > 0);
  CHECK(rep.quartile_ndcg_at_100.size() == 4);
}

TEST_CASE("ablation matrix produces one report per variant") {
  CliWorld w;
  std::vector<std::string> aggregate_paths;
  for (const std::string variant :
       {"soft", "hard", "stop", "pass", "concat"}) {
    json cfg_json = w.config;
    cfg_json["tag"] = variant;
    cfg_json["model"]["channel"] = variant;
    const auto cfg = exp::config_from_json(cfg_json);
    const auto result = exp::run(cfg);
    CHECK(result.reports.size() == 1);
    const fs::path agg = fs::path(cfg.out_dir) / variant / "aggregate.json";
    REQUIRE(fs::exists(agg));
    const auto parsed = json::parse(slurp(agg));
    CHECK(parsed.at("channel").get<std::string>() == variant);
    CHECK(parsed.at("metrics").contains("ndcg_at_100"));
    aggregate_paths.push_back(agg.string());
  }
  const auto cmp = exp::compare(aggregate_paths);
  CHECK(cmp.table.find("soft") != std::string::npos);
  CHECK(cmp.csv.find("concat") != std::string::npos);
}

TEST_CASE("compare") {
  CliWorld w;
  const auto dir = fs::path(testsupport::make_temp_dir("cmp"));

  metrics::EvalReport r;
  r.recall_at_20 = 0.2;
  r.recall_at_40 = 0.3;
  r.ndcg_at_100 = 0.25;
  r.quartile_ndcg_at_100 = {0.1, 0.2, 0.3, 0.4};
  r.bandwidth_mean = 0.5;
  r.bandwidth_std = 0.04;
  r.pcc_bandwidth_density = -0.8;
  r.n_users = 10;

  std::ofstream(dir / "a.json") << metrics::report_to_json(r);
  std::ofstream(dir / "b.json") << metrics::report_to_json(r);
  metrics::EvalReport better = r;
  better.ndcg_at_100 = 0.30;
  std::ofstream(dir / "c.json") << metrics::report_to_json(better);

  SUBCASE("identical reports tie and both get the mark") {
    const auto cmp =
        exp::compare({(dir / "a.json").string(), (dir / "b.json").string()});
    std::istringstream lines(cmp.table);
    std::string header, row1, row2;
    std::getline(lines, header);
    std::getline(lines, row1);
    std::getline(lines, row2);
    CHECK(row1.find("0.2500*") != std::string::npos);
    CHECK(row2.find("0.2500*") != std::string::npos);
  }
  SUBCASE("three reports mark the column maxima") {
    const auto cmp = exp::compare({(dir / "a.json").string(),
                                   (dir / "b.json").string(),
                                   (dir / "c.json").string()});
    CHECK(cmp.table.find("0.3000*") != std::string::npos);
    std::istringstream lines(cmp.table);
    std::string line;
    std::getline(lines, line);  // header
    std::getline(lines, line);  // a: ndcg not best
    CHECK(line.find("0.2500*") == std::string::npos);
  }
  SUBCASE("fewer than two reports is an error") {
    CHECK_THROWS_AS(exp::compare({(dir / "a.json").string()}),
                    exp::ConfigError);
  }
  SUBCASE("schema mismatch names the offending file") {
    std::ofstream(dir / "bad.json") << "{\"format\": \"something-else\"}";
    CHECK_THROWS_WITH_AS(exp::compare({(dir / "a.json").string(),
                                       (dir / "bad.json").string()}),
                         doctest::Contains("bad.json"), exp::ConfigError);
  }
}

TEST_CASE("failure marker on a broken mid-run") {
  CliWorld w;
  json cfg_json = w.config;
  cfg_json["dataset"]["interactions"] =
      (fs::path(w.dir) / "missing.tsv").string();
  const auto cfg = exp::config_from_json(cfg_json);
  CHECK_THROWS(exp::run(cfg));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "demo" / "FAILED"));
}

TEST_CASE("command line interface") {
  CliWorld w;
  const auto cfg_path = w.write_config(w.config, "config.json");

  SUBCASE("ingest writes a split manifest and succeeds") {
    const int rc = run_cli("ingest --interactions " + w.interactions +
                           " --item-tokens " + w.tokens +
                           " --min-visits 2 --vocab-size 5 --seed 3 --out " +
                           w.dir + "/ing");
    CHECK(rc == 0);
    CHECK(fs::exists(fs::path(w.dir) / "ing" / "split_3.json"));
  }

  SUBCASE("run executes end to end, twice, byte-identically") {
    const int rc = run_cli("run --config " + cfg_path);
    REQUIRE(rc == 0);
    const fs::path agg =
        fs::path(w.dir) / "runs" / "demo" / "aggregate.json";
    REQUIRE(fs::exists(agg));
    const std::string first = slurp(agg);
    REQUIRE(run_cli("run --config " + cfg_path) == 0);
    CHECK(slurp(agg) == first);
  }

  SUBCASE("train then eval a checkpoint") {
    REQUIRE(run_cli("train --config " + cfg_path + " --seed 1") == 0);
    const fs::path ckpt =
        fs::path(w.dir) / "runs" / "demo" / "checkpoint_1.json";
    REQUIRE(fs::exists(ckpt));
    const auto report_path = (fs::path(w.dir) / "report.json").string();
    CHECK(run_cli("eval --checkpoint " + ckpt.string() + " --config " +
                  cfg_path + " --seed 1 --report " + report_path) == 0);
    CHECK(fs::exists(report_path));
  }

  SUBCASE("variant override changes the channel") {
    const int rc = run_cli("run --config " + cfg_path + " --variant stop");
    REQUIRE(rc == 0);
    const fs::path agg =
        fs::path(w.dir) / "runs" / "demo-stop" / "aggregate.json";
    REQUIRE(fs::exists(agg));
    CHECK(json::parse(slurp(agg)).at("channel").get<std::string>() == "stop");
  }

  SUBCASE("invalid config exits with the config code") {
    json bad = w.config;
    bad["nonsense"] = true;
    const auto bad_path = w.write_config(bad, "bad.json");
    CHECK(run_cli("run --config " + bad_path) == 2);
    CHECK(run_cli("run --config " + bad_path + "missing") == 4);  // unreadable
    CHECK(run_cli("definitely-not-a-subcommand") == 2);
  }

  SUBCASE("missing dataset exits with the I/O code") {
    json bad = w.config;
    bad["dataset"]["interactions"] = (fs::path(w.dir) / "nope.tsv").string();
    const auto bad_path = w.write_config(bad, "io.json");
    CHECK(run_cli("run --config " + bad_path) == 4);
  }

  SUBCASE("compare joins two aggregates") {
    REQUIRE(run_cli("run --config " + cfg_path) == 0);
    REQUIRE(run_cli("run --config " + cfg_path + " --variant stop") == 0);
    const auto a = fs::path(w.dir) / "runs" / "demo" / "aggregate.json";
    const auto b = fs::path(w.dir) / "runs" / "demo-stop" / "aggregate.json";
    const auto csv_out = (fs::path(w.dir) / "cmp.csv").string();
    CHECK(run_cli("compare " + a.string() + " " + b.string() + " --csv " +
                  csv_out) == 0);
    CHECK(fs::exists(csv_out));
  }
}

TEST_SUITE_END();
