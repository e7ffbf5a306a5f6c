#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace vbae::ingest {

// Sparse binary user x item implicit-feedback matrix. Rows are sorted,
// deduplicated item indices; immutable after construction.
struct InteractionMatrix {
  int n_users = 0;
  int n_items = 0;
  std::vector<std::vector<int>> rows;
  // Original string ids, indexed by the dense indices used everywhere else.
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

// Dense user x vocab feature matrix with values in [0,1]. Rows are stored
// sparsely as (column, value) pairs sorted by column.
struct UserFeatureMatrix {
  int n_users = 0;
  int vocab_size = 0;
  std::vector<std::vector<std::pair<int, double>>> values;
  std::vector<std::string> vocab;  // selected tokens, by column

  std::vector<double> dense_row(int user) const;
};

// Per-item token counts, `item_id<TAB>token<TAB>count` on disk.
struct ItemTokenCounts {
  // counts[item] = (token index, count) sorted by token index
  std::vector<std::vector<std::pair<int, double>>> counts;
  std::vector<std::string> tokens;
};

struct SplitSpec {
  std::uint64_t seed = 0;
  std::vector<int> train_users;
  std::vector<int> val_users;
  std::vector<int> test_users;
  // Keyed by user index; present exactly for val/test users.
  std::map<int, std::vector<int>> observed;
  std::map<int, std::vector<int>> heldout;
};

struct DensityStats {
  int max_visits = 0;
  int min_visits = 0;
  double mean_visits = 0.0;
  double std_visits = 0.0;
  double density = 0.0;  // fraction of nonzero entries
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Loads `user_id<TAB>item_id` pairs. Rows are deduplicated and sorted; users
// with fewer than min_visits interactions after dedup are dropped and the
// remaining users reindexed densely. Throws ParseError with the line number on
// malformed input and on an empty result.
InteractionMatrix load_interactions(const std::string& path, int min_visits);

// Loads `item_id<TAB>token<TAB>count` keyed by the item ids of `inter`.
// Unknown item ids are ignored; items without any tokens get empty vectors.
ItemTokenCounts load_item_tokens(const std::string& path,
                                 const InteractionMatrix& inter);

// Selects the top vocab_size tokens by corpus tf-idf (total count times
// smooth idf = ln((1+N_items)/(1+df)) + 1, ties by token string), normalizes
// each token's count per item by that token's maximum count over all items,
// and builds each user's feature as the element-wise max over the items of
// the user's row. Callers that must avoid evaluation leakage pass a matrix
// whose val/test rows hold observed items only (see observed_view).
UserFeatureMatrix build_user_features(const ItemTokenCounts& items_text,
                                      const InteractionMatrix& inter,
                                      int vocab_size);

// Copy of `inter` with val/test rows replaced by their observed subsets.
InteractionMatrix observed_view(const InteractionMatrix& inter,
                                const SplitSpec& split);

// Deterministic 8:1:1 user split; for each val/test user, round(0.8*N_int)
// observed items (at least one held out). Users with a single interaction
// that land in val/test are moved back to train.
SplitSpec make_split(const InteractionMatrix& inter, std::uint64_t seed);

DensityStats density_stats(const InteractionMatrix& inter);

// Split manifest round-trip; bit-exact given the same split.
std::string split_to_json(const SplitSpec& split);
SplitSpec split_from_json(const std::string& json_text);
void save_split(const SplitSpec& split, const std::string& path);
SplitSpec load_split(const std::string& path);

}  // namespace vbae::ingest
