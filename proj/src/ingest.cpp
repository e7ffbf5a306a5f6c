#include "vbae/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "vbae/rng.hpp"

namespace vbae::ingest {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no,
                             const std::string& what) {
  throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

std::vector<double> UserFeatureMatrix::dense_row(int user) const {
  std::vector<double> row(static_cast<std::size_t>(vocab_size), 0.0);
  for (const auto& [col, v] : values[static_cast<std::size_t>(user)])
    row[static_cast<std::size_t>(col)] = v;
  return row;
}

InteractionMatrix load_interactions(const std::string& path, int min_visits) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;
  std::vector<std::string> user_ids, item_ids;
  std::vector<std::set<int>> rows;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty())
      parse_fail(path, line_no, "expected user_id<TAB>item_id");
    auto [uit, unew] = user_index.try_emplace(
        fields[0], static_cast<int>(user_ids.size()));
    if (unew) {
      user_ids.push_back(fields[0]);
      rows.emplace_back();
    }
    auto [iit, inew] = item_index.try_emplace(
        fields[1], static_cast<int>(item_ids.size()));
    if (inew) item_ids.push_back(fields[1]);
    rows[static_cast<std::size_t>(uit->second)].insert(iit->second);
  }

  InteractionMatrix out;
  out.n_items = static_cast<int>(item_ids.size());
  out.item_ids = std::move(item_ids);
  for (std::size_t u = 0; u < rows.size(); ++u) {
    if (static_cast<int>(rows[u].size()) < min_visits) continue;
    out.rows.emplace_back(rows[u].begin(), rows[u].end());
    out.user_ids.push_back(user_ids[u]);
  }
  out.n_users = static_cast<int>(out.rows.size());
  if (out.n_users == 0 || out.n_items == 0)
    throw ParseError(path + ": no interactions left after filtering");
  return out;
}

ItemTokenCounts load_item_tokens(const std::string& path,
                                 const InteractionMatrix& inter) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  std::unordered_map<std::string, int> item_index;
  for (int i = 0; i < inter.n_items; ++i)
    item_index[inter.item_ids[static_cast<std::size_t>(i)]] = i;

  ItemTokenCounts out;
  out.counts.resize(static_cast<std::size_t>(inter.n_items));
  std::unordered_map<std::string, int> token_index;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3)
      parse_fail(path, line_no, "expected item_id<TAB>token<TAB>count");
    const auto item_it = item_index.find(fields[0]);
    if (item_it == item_index.end()) continue;
    double count = 0.0;
    try {
      count = std::stod(fields[2]);
    } catch (const std::exception&) {
      parse_fail(path, line_no, "count is not a number: " + fields[2]);
    }
    if (count < 0.0) parse_fail(path, line_no, "negative count");
    if (count == 0.0) continue;
    auto [tit, tnew] = token_index.try_emplace(
        fields[1], static_cast<int>(out.tokens.size()));
    if (tnew) out.tokens.push_back(fields[1]);
    out.counts[static_cast<std::size_t>(item_it->second)]
        .emplace_back(tit->second, count);
  }
  for (auto& row : out.counts) {
    std::sort(row.begin(), row.end());
    // merge duplicate (item, token) lines by summation
    std::size_t w = 0;
    for (std::size_t r = 0; r < row.size(); ++r) {
      if (w > 0 && row[w - 1].first == row[r].first)
        row[w - 1].second += row[r].second;
      else
        row[w++] = row[r];
    }
    row.resize(w);
  }
  return out;
}

UserFeatureMatrix build_user_features(const ItemTokenCounts& items_text,
                                      const InteractionMatrix& inter,
                                      int vocab_size) {
  const int n_tokens = static_cast<int>(items_text.tokens.size());
  const double n_items = static_cast<double>(inter.n_items);

  std::vector<double> total(static_cast<std::size_t>(n_tokens), 0.0);
  std::vector<int> df(static_cast<std::size_t>(n_tokens), 0);
  for (const auto& row : items_text.counts) {
    for (const auto& [t, c] : row) {
      total[static_cast<std::size_t>(t)] += c;
      df[static_cast<std::size_t>(t)] += 1;
    }
  }

  std::vector<int> order(static_cast<std::size_t>(n_tokens));
  for (int t = 0; t < n_tokens; ++t) order[static_cast<std::size_t>(t)] = t;
  std::vector<double> score(static_cast<std::size_t>(n_tokens));
  for (int t = 0; t < n_tokens; ++t) {
    const double idf =
        std::log((1.0 + n_items) / (1.0 + df[static_cast<std::size_t>(t)])) +
        1.0;
    score[static_cast<std::size_t>(t)] =
        total[static_cast<std::size_t>(t)] * idf;
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = score[static_cast<std::size_t>(a)];
    const double sb = score[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return items_text.tokens[static_cast<std::size_t>(a)] <
           items_text.tokens[static_cast<std::size_t>(b)];
  });
  const int kept = std::min(vocab_size, n_tokens);
  order.resize(static_cast<std::size_t>(kept));

  std::vector<int> column(static_cast<std::size_t>(n_tokens), -1);
  UserFeatureMatrix out;
  out.vocab_size = vocab_size;
  out.n_users = inter.n_users;
  for (int c = 0; c < kept; ++c) {
    column[static_cast<std::size_t>(order[static_cast<std::size_t>(c)])] = c;
    out.vocab.push_back(
        items_text.tokens[static_cast<std::size_t>(order[static_cast<std::size_t>(c)])]);
  }

  // Per-token maximum count over items, on the selected vocabulary.
  std::vector<double> max_count(static_cast<std::size_t>(kept), 0.0);
  for (const auto& row : items_text.counts) {
    for (const auto& [t, c] : row) {
      const int col = column[static_cast<std::size_t>(t)];
      if (col >= 0)
        max_count[static_cast<std::size_t>(col)] =
            std::max(max_count[static_cast<std::size_t>(col)], c);
    }
  }

  // Normalized per-item vectors on the selected columns.
  std::vector<std::vector<std::pair<int, double>>> item_vec(
      items_text.counts.size());
  for (std::size_t i = 0; i < items_text.counts.size(); ++i) {
    for (const auto& [t, c] : items_text.counts[i]) {
      const int col = column[static_cast<std::size_t>(t)];
      if (col < 0) continue;
      item_vec[i].emplace_back(col, c / max_count[static_cast<std::size_t>(col)]);
    }
    std::sort(item_vec[i].begin(), item_vec[i].end());
  }

  out.values.resize(static_cast<std::size_t>(inter.n_users));
  std::vector<double> acc(static_cast<std::size_t>(kept));
  for (int u = 0; u < inter.n_users; ++u) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int item : inter.rows[static_cast<std::size_t>(u)])
      for (const auto& [col, v] : item_vec[static_cast<std::size_t>(item)])
        acc[static_cast<std::size_t>(col)] =
            std::max(acc[static_cast<std::size_t>(col)], v);
    auto& row = out.values[static_cast<std::size_t>(u)];
    for (int c = 0; c < kept; ++c)
      if (acc[static_cast<std::size_t>(c)] > 0.0)
        row.emplace_back(c, acc[static_cast<std::size_t>(c)]);
  }
  return out;
}

InteractionMatrix observed_view(const InteractionMatrix& inter,
                                const SplitSpec& split) {
  InteractionMatrix out = inter;
  for (const auto& [user, items] : split.observed)
    out.rows[static_cast<std::size_t>(user)] = items;
  return out;
}

SplitSpec make_split(const InteractionMatrix& inter, std::uint64_t seed) {
  if (inter.n_users < 10)
    throw std::invalid_argument("need at least 10 users to split 8:1:1");

  SplitSpec split;
  split.seed = seed;

  std::vector<int> users(static_cast<std::size_t>(inter.n_users));
  for (int u = 0; u < inter.n_users; ++u)
    users[static_cast<std::size_t>(u)] = u;
  StreamRng rng(seed, /*stream=*/0x5917ULL);
  shuffle(users, rng);

  const int n = inter.n_users;
  const int n_val = n / 10;
  const int n_test = n / 10;
  std::vector<int> val(users.begin(), users.begin() + n_val);
  std::vector<int> test(users.begin() + n_val, users.begin() + n_val + n_test);
  std::vector<int> train(users.begin() + n_val + n_test, users.end());

  auto hold_out = [&](int user) {
    const auto& items = inter.rows[static_cast<std::size_t>(user)];
    const int n_int = static_cast<int>(items.size());
    if (n_int < 2) return false;  // nothing to hold out; move back to train
    int n_obs = static_cast<int>(std::lround(0.8 * n_int));
    n_obs = std::min(n_obs, n_int - 1);
    n_obs = std::max(n_obs, 1);
    std::vector<int> shuffled = items;
    StreamRng user_rng(seed, /*stream=*/0x0b5eULL,
                       static_cast<std::uint64_t>(user));
    shuffle(shuffled, user_rng);
    std::vector<int> obs(shuffled.begin(), shuffled.begin() + n_obs);
    std::vector<int> held(shuffled.begin() + n_obs, shuffled.end());
    std::sort(obs.begin(), obs.end());
    std::sort(held.begin(), held.end());
    split.observed[user] = std::move(obs);
    split.heldout[user] = std::move(held);
    return true;
  };

  for (int u : val) {
    if (hold_out(u))
      split.val_users.push_back(u);
    else
      train.push_back(u);
  }
  for (int u : test) {
    if (hold_out(u))
      split.test_users.push_back(u);
    else
      train.push_back(u);
  }
  split.train_users = std::move(train);
  std::sort(split.train_users.begin(), split.train_users.end());
  std::sort(split.val_users.begin(), split.val_users.end());
  std::sort(split.test_users.begin(), split.test_users.end());
  return split;
}

DensityStats density_stats(const InteractionMatrix& inter) {
  if (inter.n_users == 0) throw std::invalid_argument("empty matrix");
  DensityStats s;
  s.max_visits = 0;
  s.min_visits = inter.n_items + 1;
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& row : inter.rows) {
    const int n = static_cast<int>(row.size());
    s.max_visits = std::max(s.max_visits, n);
    s.min_visits = std::min(s.min_visits, n);
    sum += n;
    sum_sq += static_cast<double>(n) * n;
  }
  const double n_users = static_cast<double>(inter.n_users);
  s.mean_visits = sum / n_users;
  s.std_visits = std::sqrt(std::max(0.0, sum_sq / n_users - s.mean_visits * s.mean_visits));
  s.density = sum / (n_users * static_cast<double>(inter.n_items));
  return s;
}

std::string split_to_json(const SplitSpec& split) {
  nlohmann::json j;
  j["format"] = "vbae-split-v1";
  j["seed"] = split.seed;
  j["train_users"] = split.train_users;
  j["val_users"] = split.val_users;
  j["test_users"] = split.test_users;
  nlohmann::json obs = nlohmann::json::object();
  nlohmann::json held = nlohmann::json::object();
  for (const auto& [u, items] : split.observed) obs[std::to_string(u)] = items;
  for (const auto& [u, items] : split.heldout) held[std::to_string(u)] = items;
  j["observed"] = std::move(obs);
  j["heldout"] = std::move(held);
  return j.dump(2);
}

SplitSpec split_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  if (j.value("format", "") != "vbae-split-v1")
    throw std::runtime_error("unrecognized split manifest format");
  SplitSpec split;
  split.seed = j.at("seed").get<std::uint64_t>();
  split.train_users = j.at("train_users").get<std::vector<int>>();
  split.val_users = j.at("val_users").get<std::vector<int>>();
  split.test_users = j.at("test_users").get<std::vector<int>>();
  for (const auto& [key, items] : j.at("observed").items())
    split.observed[std::stoi(key)] = items.get<std::vector<int>>();
  for (const auto& [key, items] : j.at("heldout").items())
    split.heldout[std::stoi(key)] = items.get<std::vector<int>>();
  return split;
}

void save_split(const SplitSpec& split, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << split_to_json(split) << '\n';
}

SplitSpec load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return split_from_json(ss.str());
}

}  // namespace vbae::ingest
