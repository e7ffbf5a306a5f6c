#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "support/synthetic.hpp"
#include "vbae/ingest.hpp"

using namespace vbae;
using namespace vbae::ingest;

namespace {

std::string write_tmp(const std::string& dir, const std::string& name,
                      const std::string& content) {
  const auto path = (std::filesystem::path(dir) / name).string();
  std::ofstream out(path, std::ios::binary);
  out << content;
  return path;
}

}  // namespace

TEST_SUITE_BEGIN("ingest");

TEST_CASE("load_interactions basics") {
  const auto dir = testsupport::make_temp_dir("ingest");

  SUBCASE("small file with dedup and ordering") {
    const auto path = write_tmp(dir, "a.tsv", "0\t1\n0\t3\n1\t2\n");
    const auto m = load_interactions(path, 1);
    CHECK(m.n_users == 2);
    CHECK(m.n_items == 3);
    REQUIRE(m.rows.size() == 2);
    CHECK(m.rows[0] == std::vector<int>{0, 1});  // items "1","3"
    CHECK(m.rows[1] == std::vector<int>{2});     // item  "2"
    CHECK(m.user_ids == std::vector<std::string>{"0", "1"});
    CHECK(m.item_ids == std::vector<std::string>{"1", "3", "2"});
  }

  SUBCASE("duplicate pairs collapse to one entry") {
    const auto path = write_tmp(dir, "dup.tsv", "0\t1\n0\t1\n");
    const auto m = load_interactions(path, 1);
    CHECK(m.rows[0] == std::vector<int>{0});
  }

  SUBCASE("min_visits drops sparse users and reindexes") {
    const auto path =
        write_tmp(dir, "mv.tsv", "a\tx\na\ty\nb\tz\nc\tx\nc\ty\nc\tz\n");
    const auto m = load_interactions(path, 2);
    CHECK(m.n_users == 2);
    CHECK(m.user_ids == std::vector<std::string>{"a", "c"});
    CHECK(m.rows[0].size() == 2);
    CHECK(m.rows[1].size() == 3);
  }

  SUBCASE("malformed line reports its number") {
    const auto path = write_tmp(dir, "bad.tsv", "0\t1\nnot-a-pair\n");
    CHECK_THROWS_WITH_AS(load_interactions(path, 1),
                         doctest::Contains(":2:"), ParseError);
  }

  SUBCASE("empty result is fatal") {
    const auto path = write_tmp(dir, "empty.tsv", "0\t1\n");
    CHECK_THROWS_AS(load_interactions(path, 5), ParseError);
    const auto blank = write_tmp(dir, "blank.tsv", "");
    CHECK_THROWS_AS(load_interactions(blank, 1), ParseError);
  }

  SUBCASE("reloading is bit-identical") {
    const auto path = write_tmp(dir, "re.tsv", "0\t9\n0\t4\n7\t4\n7\t9\n");
    const auto a = load_interactions(path, 1);
    const auto b = load_interactions(path, 1);
    CHECK(a.rows == b.rows);
    CHECK(a.item_ids == b.item_ids);
  }
}

TEST_CASE("build_user_features") {
  const auto dir = testsupport::make_temp_dir("feat");

  SUBCASE("per-word normalization by the corpus maximum") {
    // word w appears with counts 4 and 10; the max scan gives 0.4 and 1.0
    const auto ipath = write_tmp(dir, "i.tsv", "u\tA\nv\tB\n");
    const auto tpath = write_tmp(dir, "t.tsv", "A\tw\t4\nB\tw\t10\n");
    const auto inter = load_interactions(ipath, 1);
    const auto tokens = load_item_tokens(tpath, inter);
    const auto feats = build_user_features(tokens, inter, 4);
    CHECK(feats.dense_row(0)[0] == doctest::Approx(0.4));
    CHECK(feats.dense_row(1)[0] == doctest::Approx(1.0));
  }

  SUBCASE("element-wise max over a user's items") {
    const auto ipath = write_tmp(dir, "i.tsv", "u\tA\nu\tB\nv\tB\n");
    // normalized vectors: A = [0.2, 0.9], B = [0.5, 0.1] on words w0,w1
    // achieved via a third item carrying the per-word maxima
    const auto tpath = write_tmp(
        dir, "t.tsv",
        "A\tw0\t2\nA\tw1\t9\nB\tw0\t5\nB\tw1\t1\nC\tw0\t10\nC\tw1\t10\n");
    const auto ipath2 = write_tmp(dir, "i2.tsv", "u\tA\nu\tB\nv\tB\nx\tC\n");
    const auto inter = load_interactions(ipath2, 1);
    const auto tokens = load_item_tokens(tpath, inter);
    const auto feats = build_user_features(tokens, inter, 2);
    const auto col = [&](const std::string& tok) {
      return static_cast<std::size_t>(
          std::find(feats.vocab.begin(), feats.vocab.end(), tok) -
          feats.vocab.begin());
    };
    const auto u = feats.dense_row(0);
    CHECK(u[col("w0")] == doctest::Approx(0.5));
    CHECK(u[col("w1")] == doctest::Approx(0.9));
    // single-item user gets that item's normalized vector verbatim
    const auto v = feats.dense_row(1);
    CHECK(v[col("w0")] == doctest::Approx(0.5));
    CHECK(v[col("w1")] == doctest::Approx(0.1));
    (void)ipath;
  }

  SUBCASE("vocabulary keeps the top tf-idf words") {
    const auto ipath = write_tmp(dir, "i.tsv", "u\tA\nv\tB\n");
    // "rare" occurs in one item with a large count; "everywhere" in all items
    const auto tpath = write_tmp(
        dir, "t.tsv", "A\trare\t50\nA\teverywhere\t1\nB\teverywhere\t1\n");
    const auto inter = load_interactions(ipath, 1);
    const auto tokens = load_item_tokens(tpath, inter);
    const auto feats = build_user_features(tokens, inter, 1);
    REQUIRE(feats.vocab.size() == 1);
    CHECK(feats.vocab[0] == "rare");
  }

  SUBCASE("values stay inside [0,1] on random corpora") {
    const auto data = testsupport::make_synthetic(
        {.n_users = 60, .n_items = 40, .n_groups = 4, .seed = 3});
    const auto ipath = (std::filesystem::path(dir) / "s.tsv").string();
    const auto tpath = (std::filesystem::path(dir) / "st.tsv").string();
    testsupport::write_interactions_tsv(data.inter, ipath);
    testsupport::write_block_tokens_tsv(data.inter, 4, 10, tpath);
    const auto inter = load_interactions(ipath, 1);
    const auto tokens = load_item_tokens(tpath, inter);
    const auto feats = build_user_features(tokens, inter, 5);
    for (int u = 0; u < feats.n_users; ++u)
      for (const auto& [c, v] : feats.values[static_cast<std::size_t>(u)]) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
  }

  SUBCASE("user with no observed items gets an all-zero row") {
    const auto ipath = write_tmp(dir, "i.tsv", "u\tA\nv\tB\n");
    const auto tpath = write_tmp(dir, "t.tsv", "A\tw\t1\nB\tw\t2\n");
    auto inter = load_interactions(ipath, 1);
    inter.rows[0].clear();  // simulate an observed view with nothing left
    const auto tokens = load_item_tokens(tpath, inter);
    const auto feats = build_user_features(tokens, inter, 2);
    CHECK(feats.values[0].empty());
  }
}

TEST_CASE("make_split") {
  const auto data = testsupport::make_synthetic(
      {.n_users = 50, .n_items = 60, .n_groups = 5, .min_visits = 4,
       .max_visits = 20, .seed = 11});

  SUBCASE("8:1:1 partition, deterministic under the seed") {
    const auto s1 = make_split(data.inter, 123);
    const auto s2 = make_split(data.inter, 123);
    CHECK(s1.train_users == s2.train_users);
    CHECK(s1.val_users == s2.val_users);
    CHECK(s1.test_users == s2.test_users);
    CHECK(s1.heldout == s2.heldout);
    CHECK(static_cast<int>(s1.val_users.size()) == 5);
    CHECK(static_cast<int>(s1.test_users.size()) == 5);
    CHECK(s1.train_users.size() + s1.val_users.size() + s1.test_users.size() ==
          50);

    // disjoint user sets
    std::set<int> all;
    for (int u : s1.train_users) all.insert(u);
    for (int u : s1.val_users) all.insert(u);
    for (int u : s1.test_users) all.insert(u);
    CHECK(all.size() == 50);
  }

  SUBCASE("different seeds give different splits") {
    const auto s1 = make_split(data.inter, 1);
    const auto s2 = make_split(data.inter, 2);
    CHECK(s1.val_users != s2.val_users);
  }

  SUBCASE("held-out fraction is 20% with at least one held out") {
    const auto split = make_split(data.inter, 9);
    for (int u : split.val_users) {
      const auto& row = data.inter.rows[static_cast<std::size_t>(u)];
      const auto& obs = split.observed.at(u);
      const auto& held = split.heldout.at(u);
      CHECK(obs.size() + held.size() == row.size());
      CHECK(held.size() >= 1);
      const long expect = std::lround(0.8 * static_cast<double>(row.size()));
      CHECK(static_cast<long>(obs.size()) ==
            std::min<long>(expect, static_cast<long>(row.size()) - 1));
      // observed and held-out partition the row
      std::set<int> join(obs.begin(), obs.end());
      for (int j : held) CHECK(join.insert(j).second);
      CHECK(join == std::set<int>(row.begin(), row.end()));
    }
  }

  SUBCASE("a ten-item user held at 8 observed / 2 held out") {
    InteractionMatrix m;
    m.n_users = 10;
    m.n_items = 30;
    for (int u = 0; u < 10; ++u) {
      std::vector<int> row;
      for (int j = 0; j < 10; ++j) row.push_back((u + j * 3) % 30);
      std::sort(row.begin(), row.end());
      row.erase(std::unique(row.begin(), row.end()), row.end());
      m.rows.push_back(row);
      m.user_ids.push_back(std::to_string(u));
    }
    for (int j = 0; j < 30; ++j) m.item_ids.push_back(std::to_string(j));
    const auto split = make_split(m, 5);
    for (int u : split.test_users) {
      const auto n = m.rows[static_cast<std::size_t>(u)].size();
      if (n == 10) {
        CHECK(split.observed.at(u).size() == 8);
        CHECK(split.heldout.at(u).size() == 2);
      }
    }
  }

  SUBCASE("single-interaction users fall back to train") {
    InteractionMatrix m;
    m.n_users = 20;
    m.n_items = 25;
    for (int u = 0; u < 20; ++u) {
      m.user_ids.push_back(std::to_string(u));
      m.rows.push_back({u});  // every user has exactly one item
    }
    for (int j = 0; j < 25; ++j) m.item_ids.push_back(std::to_string(j));
    const auto split = make_split(m, 3);
    CHECK(split.val_users.empty());
    CHECK(split.test_users.empty());
    CHECK(split.train_users.size() == 20);
  }

  SUBCASE("ten distinct seeds give ten distinct splits") {
    std::set<std::vector<int>> vals;
    for (std::uint64_t s = 1; s <= 10; ++s)
      vals.insert(make_split(data.inter, s).val_users);
    CHECK(vals.size() == 10);
  }
}

TEST_CASE("observed_view hides every held-out item") {
  const auto data = testsupport::make_synthetic(
      {.n_users = 40, .n_items = 50, .n_groups = 5, .seed = 21});
  const auto split = make_split(data.inter, 77);
  const auto view = observed_view(data.inter, split);
  for (const auto& [u, held] : split.heldout) {
    const auto& row = view.rows[static_cast<std::size_t>(u)];
    for (int j : held)
      CHECK(!std::binary_search(row.begin(), row.end(), j));
    CHECK(row == split.observed.at(u));
  }
  // train rows untouched
  for (int u : split.train_users)
    CHECK(view.rows[static_cast<std::size_t>(u)] ==
          data.inter.rows[static_cast<std::size_t>(u)]);
}

TEST_CASE("density_stats") {
  SUBCASE("two-row example") {
    InteractionMatrix m;
    m.n_users = 2;
    m.n_items = 4;
    m.rows = {{0}, {1, 2, 3}};
    const auto s = density_stats(m);
    CHECK(s.max_visits == 3);
    CHECK(s.min_visits == 1);
    CHECK(s.mean_visits == doctest::Approx(2.0));
    CHECK(s.std_visits == doctest::Approx(1.0));
    CHECK(s.density == doctest::Approx(0.5));
  }
  SUBCASE("empty matrix is an error") {
    InteractionMatrix m;
    CHECK_THROWS_AS(density_stats(m), std::invalid_argument);
  }
}

TEST_CASE("split manifest round-trips byte-exactly") {
  const auto data = testsupport::make_synthetic(
      {.n_users = 30, .n_items = 40, .n_groups = 3, .seed = 4});
  const auto split = make_split(data.inter, 99);
  const std::string one = split_to_json(split);
  const std::string two = split_to_json(split_from_json(one));
  CHECK(one == two);

  const auto dir = testsupport::make_temp_dir("manifest");
  const auto path = (std::filesystem::path(dir) / "split.json").string();
  save_split(split, path);
  const auto loaded = load_split(path);
  CHECK(loaded.seed == split.seed);
  CHECK(loaded.train_users == split.train_users);
  CHECK(loaded.heldout == split.heldout);
  CHECK(loaded.observed == split.observed);
}

TEST_SUITE_END();
