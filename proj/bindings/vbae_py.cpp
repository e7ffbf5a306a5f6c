#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "vbae/checkpoint.hpp"
#include "vbae/experiment.hpp"
#include "vbae/ingest.hpp"
#include "vbae/metrics.hpp"
#include "vbae/stochastic.hpp"

namespace py = pybind11;
using namespace vbae;

namespace {

model::VbaeConfig config_from_json_text(const std::string& text) {
  return checkpoint::config_from_json(nlohmann::json::parse(text));
}

ingest::UserFeatureMatrix features_from_dense(
    const std::vector<std::vector<double>>& rows) {
  ingest::UserFeatureMatrix f;
  f.n_users = static_cast<int>(rows.size());
  f.vocab_size = rows.empty() ? 0 : static_cast<int>(rows[0].size());
  f.values.resize(rows.size());
  for (std::size_t u = 0; u < rows.size(); ++u) {
    if (static_cast<int>(rows[u].size()) != f.vocab_size)
      throw std::invalid_argument("ragged feature rows");
    for (int c = 0; c < f.vocab_size; ++c)
      if (rows[u][static_cast<std::size_t>(c)] != 0.0)
        f.values[u].emplace_back(c, rows[u][static_cast<std::size_t>(c)]);
  }
  return f;
}

// Owns the model plus whatever the training call needs to stay alive.
struct PyModel {
  model::VbaeModel m;

  PyModel(const std::string& config_json, int n_items, int n_features)
      : m(config_from_json_text(config_json), n_items, n_features) {}
  explicit PyModel(model::VbaeModel&& moved) : m(std::move(moved)) {}

  std::vector<py::dict> train(
      const std::vector<std::vector<int>>& rows,
      const std::vector<std::vector<double>>& features,
      const std::vector<int>& train_users, const std::vector<int>& val_users,
      const std::map<int, std::vector<int>>& heldout, int pretrain_epochs,
      int threads) {
    const auto feats = features_from_dense(features);
    model::TrainData data;
    data.rows = &rows;
    data.features = features.empty() ? nullptr : &feats;
    data.train_users = train_users;
    data.val_users = val_users;
    data.heldout = &heldout;
    if (pretrain_epochs > 0) model::pretrain_features(m, data, pretrain_epochs);
    const auto result = model::train(m, data, threads);
    std::vector<py::dict> history;
    for (const auto& r : result.history) {
      py::dict d;
      d["epoch"] = r.epoch;
      d["b_loss"] = r.b_loss;
      d["t_loss"] = r.t_loss;
      d["kl_zb"] = r.kl_zb;
      d["kl_channel"] = r.kl_channel;
      d["kl_zt"] = r.kl_zt;
      d["alpha_mean"] = r.alpha_mean;
      d["alpha_std"] = r.alpha_std;
      d["beta"] = r.beta;
      d["tau"] = r.tau;
      d["val_recall_at_20"] = r.val_recall20;
      d["val_recall_at_40"] = r.val_recall40;
      d["val_ndcg_at_100"] = r.val_ndcg100;
      history.push_back(std::move(d));
    }
    return history;
  }

  py::dict predict(const std::vector<int>& observed,
                   const std::vector<double>& x, std::uint64_t key) const {
    const auto pred = m.predict(observed, x, key);
    py::dict d;
    d["ranking"] = pred.ranking;
    d["alpha"] = pred.alpha;
    d["d"] = pred.d;
    return d;
  }

  std::string config_json() const {
    return checkpoint::config_to_json(m.config()).dump();
  }
};

}  // namespace

PYBIND11_MODULE(_vbae, mod) {
  mod.doc() = "Variational bandwidth auto-encoder core";

  py::register_exception<exp::ConfigError>(mod, "ConfigError");
  py::register_exception<ingest::ParseError>(mod, "ParseError");

  // ---- ingest ----
  py::class_<ingest::InteractionMatrix>(mod, "InteractionMatrix")
      .def_readonly("n_users", &ingest::InteractionMatrix::n_users)
      .def_readonly("n_items", &ingest::InteractionMatrix::n_items)
      .def_readonly("rows", &ingest::InteractionMatrix::rows)
      .def_readonly("user_ids", &ingest::InteractionMatrix::user_ids)
      .def_readonly("item_ids", &ingest::InteractionMatrix::item_ids);

  py::class_<ingest::ItemTokenCounts>(mod, "ItemTokenCounts")
      .def_readonly("tokens", &ingest::ItemTokenCounts::tokens);

  py::class_<ingest::UserFeatureMatrix>(mod, "UserFeatureMatrix")
      .def_readonly("n_users", &ingest::UserFeatureMatrix::n_users)
      .def_readonly("vocab_size", &ingest::UserFeatureMatrix::vocab_size)
      .def_readonly("vocab", &ingest::UserFeatureMatrix::vocab)
      .def("dense_row", &ingest::UserFeatureMatrix::dense_row);

  py::class_<ingest::SplitSpec>(mod, "SplitSpec")
      .def_readonly("seed", &ingest::SplitSpec::seed)
      .def_readonly("train_users", &ingest::SplitSpec::train_users)
      .def_readonly("val_users", &ingest::SplitSpec::val_users)
      .def_readonly("test_users", &ingest::SplitSpec::test_users)
      .def_readonly("observed", &ingest::SplitSpec::observed)
      .def_readonly("heldout", &ingest::SplitSpec::heldout);

  mod.def("load_interactions", &ingest::load_interactions, py::arg("path"),
          py::arg("min_visits"));
  mod.def("load_item_tokens", &ingest::load_item_tokens, py::arg("path"),
          py::arg("interactions"));
  mod.def("build_user_features", &ingest::build_user_features,
          py::arg("item_tokens"), py::arg("interactions"),
          py::arg("vocab_size"));
  mod.def("make_split", &ingest::make_split, py::arg("interactions"),
          py::arg("seed"));
  mod.def("observed_view", &ingest::observed_view, py::arg("interactions"),
          py::arg("split"));
  mod.def("density_stats", [](const ingest::InteractionMatrix& m) {
    const auto s = ingest::density_stats(m);
    py::dict d;
    d["max_visits"] = s.max_visits;
    d["min_visits"] = s.min_visits;
    d["mean_visits"] = s.mean_visits;
    d["std_visits"] = s.std_visits;
    d["density"] = s.density;
    return d;
  });

  // ---- metrics ----
  mod.def(
      "recall_at_m",
      [](const std::vector<int>& ranking, const std::vector<int>& heldout,
         int m) -> std::optional<double> {
        metrics::RankedList list{0, ranking, heldout};
        return metrics::recall_at_m(list, m);
      },
      py::arg("ranking"), py::arg("heldout"), py::arg("m"));
  mod.def(
      "ndcg_at_m",
      [](const std::vector<int>& ranking, const std::vector<int>& heldout,
         int m) -> std::optional<double> {
        metrics::RankedList list{0, ranking, heldout};
        return metrics::ndcg_at_m(list, m);
      },
      py::arg("ranking"), py::arg("heldout"), py::arg("m"));
  mod.def("quartile_breakdown", &metrics::quartile_breakdown, py::arg("ndcg"),
          py::arg("activity"));
  mod.def(
      "bandwidth_stats",
      [](const std::vector<double>& alpha, const std::vector<int>& activity) {
        const auto s = metrics::bandwidth_stats(alpha, activity);
        py::dict d;
        d["mean"] = s.mean;
        d["std"] = s.std;
        d["pcc"] = s.pcc;
        return d;
      },
      py::arg("alpha"), py::arg("activity"));

  // ---- stochastic primitives ----
  mod.def("kl_bernoulli", &stoch::kl_bernoulli, py::arg("alpha"),
          py::arg("prior_p"));
  mod.def(
      "kl_gaussian_vs_prior",
      [](const std::vector<double>& mu, const std::vector<double>& log_sigma,
         double lambda) {
        Vector m(static_cast<Eigen::Index>(mu.size()));
        Vector s(static_cast<Eigen::Index>(log_sigma.size()));
        for (std::size_t i = 0; i < mu.size(); ++i)
          m(static_cast<Eigen::Index>(i)) = mu[i];
        for (std::size_t i = 0; i < log_sigma.size(); ++i)
          s(static_cast<Eigen::Index>(i)) = log_sigma[i];
        return stoch::kl_gaussian_vs_prior(m, s, lambda);
      },
      py::arg("mu"), py::arg("log_sigma"), py::arg("prior_precision"));
  mod.def(
      "kl_soft_channel",
      [](double alpha_q, double sigma_q, double alpha_p, double sigma_p) {
        return stoch::kl_soft_channel({alpha_q, sigma_q}, {alpha_p, sigma_p});
      },
      py::arg("alpha_q"), py::arg("sigma_q"), py::arg("alpha_p"),
      py::arg("sigma_p"));
  mod.def(
      "sample_concrete",
      [](double alpha, double tau, double g1, double g2) {
        return stoch::sample_concrete({alpha, tau}, g1, g2);
      },
      py::arg("alpha"), py::arg("tau"), py::arg("g1"), py::arg("g2"));
  mod.def(
      "sample_logistic_normal",
      [](double alpha, double sigma, double e1, double e2) {
        return stoch::sample_logistic_normal({alpha, sigma}, e1, e2);
      },
      py::arg("alpha"), py::arg("sigma"), py::arg("e1"), py::arg("e2"));

  // ---- model ----
  py::class_<PyModel>(mod, "Model")
      .def(py::init<const std::string&, int, int>(), py::arg("config_json"),
           py::arg("n_items"), py::arg("n_features"))
      .def("train", &PyModel::train, py::arg("rows"), py::arg("features"),
           py::arg("train_users"), py::arg("val_users"), py::arg("heldout"),
           py::arg("pretrain_epochs") = 0, py::arg("threads") = 1)
      .def("predict", &PyModel::predict, py::arg("observed"), py::arg("x"),
           py::arg("key") = 0)
      .def("config_json", &PyModel::config_json)
      .def("save",
           [](const PyModel& self, const std::string& path) {
             checkpoint::save_checkpoint(self.m, path);
           })
      .def_static("load", [](const std::string& path) {
        return PyModel(checkpoint::load_checkpoint(path));
      });

  // ---- experiment runner ----
  mod.def(
      "run_experiment",
      [](const std::string& config_path) {
        const auto result = exp::run(exp::load_config(config_path));
        return result.aggregate.dump();
      },
      py::arg("config_path"));
  mod.def("compare_reports", [](const std::vector<std::string>& paths) {
    return exp::compare(paths).table;
  });

  mod.attr("__version__") = "0.1.0";
}
