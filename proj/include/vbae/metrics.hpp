#pragma once

#include <optional>
#include <string>
#include <vector>

namespace vbae::metrics {

// Recommendation list for one user: ranked unobserved items plus the held-out
// relevant set.
struct RankedList {
  int user = 0;
  std::vector<int> ranked_items;
  std::vector<int> heldout;  // sorted
};

struct EvalReport {
  double recall_at_20 = 0.0;
  double recall_at_40 = 0.0;
  double ndcg_at_100 = 0.0;
  std::vector<double> quartile_ndcg_at_100;  // 4 entries, by rising activity
  double bandwidth_mean = 0.0;
  double bandwidth_std = 0.0;
  std::optional<double> pcc_bandwidth_density;  // absent when undefined
  int n_users = 0;     // users included in metric averages
  int n_skipped = 0;   // users excluded for empty held-out sets
};

// (hits in top M) / min(M, |heldout|). Returns nullopt when heldout is empty
// (the user is excluded from averages).
std::optional<double> recall_at_m(const RankedList& list, int m);

// DCG@M with the binary-gain logarithmic discount, normalized by the ideal
// DCG@M. Independent of the logarithm base.
std::optional<double> ndcg_at_m(const RankedList& list, int m);

// Mean metric per activity quartile. Users are sorted by activity (ties by
// index order) and cut into 4 contiguous groups of near-equal size.
std::vector<double> quartile_breakdown(const std::vector<double>& ndcg,
                                       const std::vector<int>& activity);

struct BandwidthStats {
  double mean = 0.0;
  double std = 0.0;
  std::optional<double> pcc;  // vs. activity; absent when either is constant
};

BandwidthStats bandwidth_stats(const std::vector<double>& alpha,
                               const std::vector<int>& activity);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& json_text);

// Optional per-user CSV: user, activity, bandwidth, recall@20, ndcg@100.
struct PerUserRow {
  int user;
  int activity;
  double bandwidth;
  double recall20;
  double ndcg100;
};
std::string per_user_csv(const std::vector<PerUserRow>& rows);

}  // namespace vbae::metrics
