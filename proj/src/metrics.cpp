#include "vbae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace vbae::metrics {

namespace {

bool is_relevant(const RankedList& list, int item) {
  return std::binary_search(list.heldout.begin(), list.heldout.end(), item);
}

}  // namespace

std::optional<double> recall_at_m(const RankedList& list, int m) {
  if (list.heldout.empty()) return std::nullopt;
  int hits = 0;
  const int top = std::min<int>(m, static_cast<int>(list.ranked_items.size()));
  for (int r = 0; r < top; ++r)
    if (is_relevant(list, list.ranked_items[static_cast<std::size_t>(r)]))
      ++hits;
  return static_cast<double>(hits) /
         std::min<double>(m, static_cast<double>(list.heldout.size()));
}

std::optional<double> ndcg_at_m(const RankedList& list, int m) {
  if (list.heldout.empty()) return std::nullopt;
  double dcg = 0.0;
  const int top = std::min<int>(m, static_cast<int>(list.ranked_items.size()));
  for (int r = 0; r < top; ++r)
    if (is_relevant(list, list.ranked_items[static_cast<std::size_t>(r)]))
      dcg += 1.0 / std::log(static_cast<double>(r) + 2.0);
  double idcg = 0.0;
  const int ideal = std::min<int>(m, static_cast<int>(list.heldout.size()));
  for (int r = 0; r < ideal; ++r)
    idcg += 1.0 / std::log(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

std::vector<double> quartile_breakdown(const std::vector<double>& ndcg,
                                       const std::vector<int>& activity) {
  if (ndcg.size() != activity.size())
    throw std::invalid_argument("ndcg and activity must align");
  const int n = static_cast<int>(ndcg.size());
  if (n < 4) throw std::invalid_argument("need at least 4 users");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return activity[static_cast<std::size_t>(a)] <
           activity[static_cast<std::size_t>(b)];
  });

  std::vector<double> means(4, 0.0);
  for (int q = 0; q < 4; ++q) {
    const int lo = q * n / 4;
    const int hi = (q + 1) * n / 4;
    double sum = 0.0;
    for (int i = lo; i < hi; ++i)
      sum += ndcg[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    means[static_cast<std::size_t>(q)] = sum / (hi - lo);
  }
  return means;
}

BandwidthStats bandwidth_stats(const std::vector<double>& alpha,
                               const std::vector<int>& activity) {
  if (alpha.size() != activity.size())
    throw std::invalid_argument("alpha and activity must align");
  if (alpha.size() < 2) throw std::invalid_argument("need at least 2 users");

  const double n = static_cast<double>(alpha.size());
  BandwidthStats s;
  s.mean = std::accumulate(alpha.begin(), alpha.end(), 0.0) / n;
  double ssq = 0.0;
  for (double a : alpha) ssq += (a - s.mean) * (a - s.mean);
  s.std = std::sqrt(ssq / (n - 1.0));

  const double act_mean =
      std::accumulate(activity.begin(), activity.end(), 0.0) / n;
  double cov = 0.0, var_a = 0.0, var_n = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const double da = alpha[i] - s.mean;
    const double dn = activity[i] - act_mean;
    cov += da * dn;
    var_a += da * da;
    var_n += dn * dn;
  }
  if (var_a > 0.0 && var_n > 0.0)
    s.pcc = cov / std::sqrt(var_a * var_n);
  return s;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["format"] = "vbae-report-v1";
  j["recall_at_20"] = report.recall_at_20;
  j["recall_at_40"] = report.recall_at_40;
  j["ndcg_at_100"] = report.ndcg_at_100;
  j["quartile_ndcg_at_100"] = report.quartile_ndcg_at_100;
  j["bandwidth_mean"] = report.bandwidth_mean;
  j["bandwidth_std"] = report.bandwidth_std;
  if (report.pcc_bandwidth_density)
    j["pcc_bandwidth_density"] = *report.pcc_bandwidth_density;
  else
    j["pcc_bandwidth_density"] = nullptr;
  j["n_users"] = report.n_users;
  j["n_skipped"] = report.n_skipped;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  if (j.value("format", "") != "vbae-report-v1")
    throw std::runtime_error("unrecognized report format");
  EvalReport r;
  r.recall_at_20 = j.at("recall_at_20").get<double>();
  r.recall_at_40 = j.at("recall_at_40").get<double>();
  r.ndcg_at_100 = j.at("ndcg_at_100").get<double>();
  r.quartile_ndcg_at_100 =
      j.at("quartile_ndcg_at_100").get<std::vector<double>>();
  r.bandwidth_mean = j.at("bandwidth_mean").get<double>();
  r.bandwidth_std = j.at("bandwidth_std").get<double>();
  if (!j.at("pcc_bandwidth_density").is_null())
    r.pcc_bandwidth_density = j.at("pcc_bandwidth_density").get<double>();
  r.n_users = j.at("n_users").get<int>();
  r.n_skipped = j.at("n_skipped").get<int>();
  return r;
}

std::string per_user_csv(const std::vector<PerUserRow>& rows) {
  std::ostringstream out;
  out << "user,activity,bandwidth,recall_at_20,ndcg_at_100\n";
  for (const auto& r : rows)
    out << r.user << ',' << r.activity << ',' << r.bandwidth << ','
        << r.recall20 << ',' << r.ndcg100 << '\n';
  return out.str();
}

}  // namespace vbae::metrics
