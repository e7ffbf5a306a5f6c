#include "support/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace vbae::testsupport {

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  SyntheticData data;
  const int block_size = spec.n_items / spec.n_groups;
  StreamRng rng(spec.seed, 0x5e7ULL);

  data.inter.n_users = spec.n_users;
  data.inter.n_items = spec.n_items;
  data.inter.rows.resize(static_cast<std::size_t>(spec.n_users));
  data.group.resize(static_cast<std::size_t>(spec.n_users));
  data.misleading.resize(static_cast<std::size_t>(spec.n_users));
  for (int u = 0; u < spec.n_users; ++u)
    data.inter.user_ids.push_back("u" + std::to_string(u));
  for (int j = 0; j < spec.n_items; ++j)
    data.inter.item_ids.push_back("i" + std::to_string(j));

  const int n_dims = spec.n_groups + spec.n_noise_dims;
  data.features.n_users = spec.n_users;
  data.features.vocab_size = n_dims;
  data.features.values.resize(static_cast<std::size_t>(spec.n_users));
  for (int c = 0; c < n_dims; ++c)
    data.features.vocab.push_back("f" + std::to_string(c));

  const int n_subs = std::max(1, spec.subblocks_per_group);
  const int sub_size = std::max(1, block_size / n_subs);

  for (int u = 0; u < spec.n_users; ++u) {
    const int g = static_cast<int>(rng.uniform_below(
        static_cast<std::uint64_t>(spec.n_groups)));
    const int sub = static_cast<int>(
        rng.uniform_below(static_cast<std::uint64_t>(n_subs)));
    data.group[static_cast<std::size_t>(u)] = g;
    data.misleading[static_cast<std::size_t>(u)] =
        rng.uniform() < spec.misleading_frac ? 1 : 0;

    // Long-tailed activity.
    const double tail =
        static_cast<double>(spec.min_visits) *
        std::pow(1.0 - rng.uniform(), -1.0 / spec.tail_shape);
    const int n_visits = std::min(
        spec.max_visits,
        std::max(spec.min_visits, static_cast<int>(std::floor(tail))));

    std::set<int> items;
    int guard = 0;
    while (static_cast<int>(items.size()) < n_visits &&
           guard++ < 50 * n_visits) {
      int item;
      const double roll = rng.uniform();
      if (spec.in_sub_prob > 0.0 && roll < spec.in_sub_prob) {
        // favorite sub-block, which the features cannot see
        const int base = g * block_size + sub * sub_size;
        item = base + static_cast<int>(rng.uniform_below(
                          static_cast<std::uint64_t>(sub_size)));
      } else if (roll < spec.in_block_prob) {
        item = g * block_size +
               static_cast<int>(rng.uniform_below(
                   static_cast<std::uint64_t>(block_size)));
      } else {
        item = static_cast<int>(
            rng.uniform_below(static_cast<std::uint64_t>(spec.n_items)));
      }
      items.insert(std::min(item, spec.n_items - 1));
    }
    data.inter.rows[static_cast<std::size_t>(u)].assign(items.begin(),
                                                        items.end());

    // Features: a block-level marker of varying strength, possibly pointing
    // at the wrong block, plus junk dimensions.
    int marker = g;
    if (data.misleading[static_cast<std::size_t>(u)]) {
      marker = static_cast<int>(rng.uniform_below(
          static_cast<std::uint64_t>(spec.n_groups - 1)));
      if (marker >= g) ++marker;
    }
    auto& row = data.features.values[static_cast<std::size_t>(u)];
    for (int c = 0; c < n_dims; ++c) {
      double v = 0.0;
      if (c == marker)
        v = spec.marker_strength_min +
            (1.0 - spec.marker_strength_min) * rng.uniform();
      else if (c < spec.n_groups)
        v = 0.05 * rng.uniform();
      else
        v = 0.3 * rng.uniform();
      if (v > 0.0) row.emplace_back(c, v);
    }
  }
  return data;
}

void write_interactions_tsv(const ingest::InteractionMatrix& inter,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  for (int u = 0; u < inter.n_users; ++u)
    for (int j : inter.rows[static_cast<std::size_t>(u)])
      out << inter.user_ids[static_cast<std::size_t>(u)] << '\t'
          << inter.item_ids[static_cast<std::size_t>(j)] << '\n';
}

void write_block_tokens_tsv(const ingest::InteractionMatrix& inter,
                            int n_groups, int block_size,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  for (int j = 0; j < inter.n_items; ++j) {
    const int g = std::min(j / block_size, n_groups - 1);
    out << inter.item_ids[static_cast<std::size_t>(j)] << "\tblock"
        << g << "\t" << (3 + j % 5) << '\n';
    out << inter.item_ids[static_cast<std::size_t>(j)] << "\tcommon\t1\n";
  }
}

std::string make_temp_dir(const std::string& hint) {
  static std::atomic<int> counter{0};
  const auto dir = std::filesystem::temp_directory_path() /
                   ("vbae_test_" + hint + "_" +
                    std::to_string(counter.fetch_add(1)) + "_" +
                    std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace vbae::testsupport
