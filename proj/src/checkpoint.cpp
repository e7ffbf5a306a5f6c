#include "vbae/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vbae::checkpoint {

using nlohmann::json;
using model::VbaeConfig;

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("unknown key '" + key + "' in " + where);
  }
}

std::string double_to_hex(double v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0')
      << std::bit_cast<std::uint64_t>(v);
  return out.str();
}

double hex_to_double(const std::string& s) {
  return std::bit_cast<double>(
      static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

json store_to_json(const tensor::ParamStore& store) {
  json blocks = json::object();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const tensor::ParamBlock& p = store.block(i);
    json entry;
    entry["rows"] = p.value.rows();
    entry["cols"] = p.value.cols();
    std::vector<std::string> data;
    data.reserve(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c)
        data.push_back(double_to_hex(p.value(r, c)));
    entry["data"] = std::move(data);
    blocks[p.name] = std::move(entry);
  }
  return blocks;
}

void store_from_json(const json& blocks, tensor::ParamStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    tensor::ParamBlock& p = store.block(i);
    if (!blocks.contains(p.name))
      throw std::runtime_error("checkpoint is missing block " + p.name);
    const json& entry = blocks.at(p.name);
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (rows != p.value.rows() || cols != p.value.cols())
      throw std::runtime_error("checkpoint shape mismatch in " + p.name);
    const auto data = entry.at("data").get<std::vector<std::string>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw std::runtime_error("checkpoint size mismatch in " + p.name);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        p.value(r, c) = hex_to_double(data[k++]);
  }
}

}  // namespace

json config_to_json(const VbaeConfig& cfg) {
  json j;
  j["channel"] = model::to_string(cfg.channel);
  j["latent_dim"] = cfg.latent_dim;
  j["collab_hidden"] = cfg.collab_hidden;
  j["feature_hidden"] = cfg.feature_hidden;
  j["decoder_hidden"] = cfg.decoder_hidden;
  j["beta_max"] = cfg.beta_max;
  j["beta_anneal_steps"] = cfg.beta_anneal_steps;
  j["tau_start"] = cfg.tau_start;
  j["tau_end"] = cfg.tau_end;
  j["lambda_w"] = cfg.lambda_w;
  j["lambda_b"] = cfg.lambda_b;
  j["lambda_t"] = cfg.lambda_t;
  j["bandwidth_decay_mult"] = cfg.bandwidth_decay_mult;
  j["sigma_logit"] = cfg.sigma_logit;
  j["prior_bernoulli"] = cfg.prior_bernoulli;
  j["init_std"] = cfg.init_std;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["pretrain_epochs"] = cfg.pretrain_epochs;
  j["lr"] = cfg.lr;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["seed"] = cfg.seed;
  return j;
}

VbaeConfig config_from_json(const json& j) {
  reject_unknown_keys(
      j,
      {"channel", "latent_dim", "collab_hidden", "feature_hidden",
       "decoder_hidden", "beta_max", "beta_anneal_steps", "tau_start",
       "tau_end", "lambda_w", "lambda_b", "lambda_t", "bandwidth_decay_mult",
       "sigma_logit", "prior_bernoulli", "init_std", "epochs", "batch_size",
       "pretrain_epochs", "lr", "adam_beta1", "adam_beta2", "seed"},
      "model config");
  VbaeConfig cfg;
  if (j.contains("channel"))
    cfg.channel = model::channel_from_string(j.at("channel").get<std::string>());
  cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
  cfg.collab_hidden = j.value("collab_hidden", cfg.collab_hidden);
  cfg.feature_hidden = j.value("feature_hidden", cfg.feature_hidden);
  cfg.decoder_hidden = j.value("decoder_hidden", cfg.decoder_hidden);
  cfg.beta_max = j.value("beta_max", cfg.beta_max);
  cfg.beta_anneal_steps = j.value("beta_anneal_steps", cfg.beta_anneal_steps);
  cfg.tau_start = j.value("tau_start", cfg.tau_start);
  cfg.tau_end = j.value("tau_end", cfg.tau_end);
  cfg.lambda_w = j.value("lambda_w", cfg.lambda_w);
  cfg.lambda_b = j.value("lambda_b", cfg.lambda_b);
  cfg.lambda_t = j.value("lambda_t", cfg.lambda_t);
  cfg.bandwidth_decay_mult =
      j.value("bandwidth_decay_mult", cfg.bandwidth_decay_mult);
  cfg.sigma_logit = j.value("sigma_logit", cfg.sigma_logit);
  cfg.prior_bernoulli = j.value("prior_bernoulli", cfg.prior_bernoulli);
  cfg.init_std = j.value("init_std", cfg.init_std);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.pretrain_epochs = j.value("pretrain_epochs", cfg.pretrain_epochs);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
  cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
  cfg.seed = j.value("seed", cfg.seed);

  if (cfg.latent_dim <= 0 || cfg.collab_hidden <= 0)
    throw std::invalid_argument("layer widths must be positive");
  if (cfg.batch_size < 2)
    throw std::invalid_argument("batch_size must be at least 2");
  if (cfg.sigma_logit <= 0.0)
    throw std::invalid_argument("sigma_logit must be positive");
  if (cfg.prior_bernoulli <= 0.0 || cfg.prior_bernoulli >= 1.0)
    throw std::invalid_argument("prior_bernoulli must lie in (0,1)");
  if (cfg.tau_start <= 0.0 || cfg.tau_end <= 0.0)
    throw std::invalid_argument("temperatures must be positive");
  if (cfg.epochs < 0 || cfg.pretrain_epochs < 0)
    throw std::invalid_argument("epoch counts must be non-negative");
  return cfg;
}

std::string checkpoint_to_json(const model::VbaeModel& m) {
  json j;
  j["format"] = "vbae-checkpoint-v1";
  j["config"] = config_to_json(m.config());
  j["n_items"] = m.n_items();
  j["n_features"] = m.n_features();
  j["bn"] = {{"running_mean", double_to_hex(m.norm_bn().running_mean)},
             {"running_var", double_to_hex(m.norm_bn().running_var)}};
  j["blocks_collab"] = store_to_json(m.collab_params());
  j["blocks_feature"] = store_to_json(m.feature_params());
  return j.dump();
}

model::VbaeModel checkpoint_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "vbae-checkpoint-v1")
    throw std::runtime_error("unrecognized checkpoint format");
  model::VbaeModel m(config_from_json(j.at("config")),
                     j.at("n_items").get<int>(),
                     j.at("n_features").get<int>());
  m.norm_bn().running_mean =
      hex_to_double(j.at("bn").at("running_mean").get<std::string>());
  m.norm_bn().running_var =
      hex_to_double(j.at("bn").at("running_var").get<std::string>());
  store_from_json(j.at("blocks_collab"), m.collab_params());
  store_from_json(j.at("blocks_feature"), m.feature_params());
  return m;
}

void save_checkpoint(const model::VbaeModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << checkpoint_to_json(m) << '\n';
}

model::VbaeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace vbae::checkpoint
