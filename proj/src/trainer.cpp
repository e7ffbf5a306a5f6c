#include <algorithm>
#include <cmath>

#include "vbae/model.hpp"

namespace vbae::model {

namespace {

constexpr std::uint64_t kStreamBNoise = 0x21;
constexpr std::uint64_t kStreamTNoise = 0x22;
constexpr std::uint64_t kStreamShuffleB = 0x31;
constexpr std::uint64_t kStreamShuffleT = 0x32;
constexpr std::uint64_t kStreamPretrain = 0x41;

struct ModelSnapshot {
  std::vector<Matrix> b_values;
  std::vector<Matrix> t_values;
  tensor::ScalarBatchNorm bn;
};

ModelSnapshot take_snapshot(VbaeModel& m) {
  ModelSnapshot s;
  for (std::size_t i = 0; i < m.collab_params().size(); ++i)
    s.b_values.push_back(m.collab_params().block(i).value);
  for (std::size_t i = 0; i < m.feature_params().size(); ++i)
    s.t_values.push_back(m.feature_params().block(i).value);
  s.bn = m.norm_bn();
  return s;
}

void restore_snapshot(VbaeModel& m, const ModelSnapshot& s) {
  for (std::size_t i = 0; i < m.collab_params().size(); ++i)
    m.collab_params().block(i).value = s.b_values[i];
  for (std::size_t i = 0; i < m.feature_params().size(); ++i)
    m.feature_params().block(i).value = s.t_values[i];
  m.norm_bn() = s.bn;
}

// Batch boundaries over a user order; a trailing singleton is folded into the
// previous batch so batch-norm always sees at least two samples.
std::vector<std::pair<int, int>> batch_ranges(int n, int batch_size) {
  std::vector<std::pair<int, int>> ranges;
  for (int lo = 0; lo < n; lo += batch_size)
    ranges.emplace_back(lo, std::min(n, lo + batch_size));
  if (ranges.size() >= 2 && ranges.back().second - ranges.back().first < 2) {
    ranges[ranges.size() - 2].second = ranges.back().second;
    ranges.pop_back();
  }
  return ranges;
}

Batch make_batch(const TrainData& data, const std::vector<int>& users,
                 bool with_features) {
  Batch b;
  b.rows.reserve(users.size());
  for (int u : users) {
    b.rows.push_back((*data.rows)[static_cast<std::size_t>(u)]);
    b.targets.push_back((*data.rows)[static_cast<std::size_t>(u)]);
  }
  if (with_features && data.features != nullptr)
    b.features = gather_features(*data.features, users);
  return b;
}

struct ValScores {
  double recall20 = 0.0, recall40 = 0.0, ndcg100 = 0.0;
};

ValScores validate(VbaeModel& model, const TrainData& data, int threads) {
  ValScores v;
  if (data.val_users.empty()) return v;
  std::vector<std::vector<int>> rows;
  std::vector<std::uint64_t> keys;
  for (int u : data.val_users) {
    rows.push_back((*data.rows)[static_cast<std::size_t>(u)]);
    keys.push_back(static_cast<std::uint64_t>(u));
  }
  Matrix feats;
  if (data.features != nullptr)
    feats = gather_features(*data.features, data.val_users);
  const auto preds = model.predict_batch(rows, feats, keys, threads);

  int counted = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int u = data.val_users[i];
    const auto held_it = data.heldout->find(u);
    if (held_it == data.heldout->end() || held_it->second.empty()) continue;
    metrics::RankedList list{u, preds[i].ranking, held_it->second};
    v.recall20 += *metrics::recall_at_m(list, 20);
    v.recall40 += *metrics::recall_at_m(list, 40);
    v.ndcg100 += *metrics::ndcg_at_m(list, 100);
    ++counted;
  }
  if (counted > 0) {
    v.recall20 /= counted;
    v.recall40 /= counted;
    v.ndcg100 /= counted;
  }
  return v;
}

}  // namespace

BStepNoise make_b_step_noise(const VbaeConfig& cfg,
                             const std::vector<int>& users, int epoch) {
  BStepNoise n;
  const int B = static_cast<int>(users.size());
  n.eps_z.resize(B, cfg.latent_dim);
  n.ch1.resize(B);
  n.ch2.resize(B);
  for (int i = 0; i < B; ++i) {
    StreamRng rng(cfg.seed, kStreamBNoise,
                  static_cast<std::uint64_t>(users[static_cast<std::size_t>(i)]),
                  static_cast<std::uint64_t>(epoch));
    for (int k = 0; k < cfg.latent_dim; ++k) n.eps_z(i, k) = rng.normal();
    if (cfg.channel == ChannelKind::Hard) {
      n.ch1(i) = rng.gumbel();
      n.ch2(i) = rng.gumbel();
    } else {
      n.ch1(i) = rng.normal();
      n.ch2(i) = rng.normal();
    }
  }
  return n;
}

TStepNoise make_t_step_noise(const VbaeConfig& cfg,
                             const std::vector<int>& users, int epoch) {
  TStepNoise n;
  const int B = static_cast<int>(users.size());
  n.eps_z.resize(B, cfg.latent_dim);
  for (int i = 0; i < B; ++i) {
    StreamRng rng(cfg.seed, kStreamTNoise,
                  static_cast<std::uint64_t>(users[static_cast<std::size_t>(i)]),
                  static_cast<std::uint64_t>(epoch));
    for (int k = 0; k < cfg.latent_dim; ++k) n.eps_z(i, k) = rng.normal();
  }
  return n;
}

std::vector<std::vector<double>> pretrain_features(VbaeModel& model,
                                                   const TrainData& data,
                                                   int epochs) {
  std::vector<std::vector<double>> losses;
  if (!model.has_feature_tower() || epochs <= 0) return losses;
  const VbaeConfig& cfg = model.config();
  const int n_layers = static_cast<int>(cfg.feature_hidden.size());
  constexpr double clamp = 1e-7;

  for (int layer = 0; layer < n_layers; ++layer) {
    tensor::Adam adam({cfg.lr, cfg.adam_beta1, cfg.adam_beta2});
    std::vector<double> layer_losses;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::vector<int> order = data.train_users;
      StreamRng shuffle_rng(cfg.seed, kStreamPretrain,
                            static_cast<std::uint64_t>(layer),
                            static_cast<std::uint64_t>(epoch));
      shuffle(order, shuffle_rng);
      double epoch_loss = 0.0;
      long seen = 0;
      for (const auto& [lo, hi] : batch_ranges(static_cast<int>(order.size()),
                                               cfg.batch_size)) {
        const std::vector<int> users(order.begin() + lo, order.begin() + hi);
        Matrix a = gather_features(*data.features, users);
        auto& enc = model.feature_encoder_layer(layer);
        auto& dec = model.feature_decoder_tied_layer(layer);
        for (int p = 0; p < layer; ++p)
          a = model.feature_encoder_layer(p).infer(a);

        model.feature_params().zero_grad();
        const Matrix hidden = enc.forward(a);
        const Matrix recon = dec.forward(hidden);
        const Matrix xc = recon.array().max(clamp).min(1.0 - clamp);
        const double loss = -(a.array() * xc.array().log() +
                              (1.0 - a.array()) * (1.0 - xc.array()).log())
                                 .sum() /
                            static_cast<double>(users.size());
        Matrix drecon = (((xc.array() - a.array()) /
                          (xc.array() * (1.0 - xc.array()))) /
                         static_cast<double>(users.size()))
                            .matrix();
        for (Eigen::Index c = 0; c < recon.cols(); ++c)
          for (Eigen::Index r = 0; r < recon.rows(); ++r)
            if (recon(r, c) <= clamp || recon(r, c) >= 1.0 - clamp)
              drecon(r, c) = 0.0;
        enc.backward(dec.backward(drecon));
        adam.step(model.feature_params());
        epoch_loss += loss * static_cast<double>(users.size());
        seen += hi - lo;
      }
      layer_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    losses.push_back(std::move(layer_losses));
  }

  // Head stage: the latent mean reconstructs the top activation through the
  // decoder input layer, so the bottleneck starts in a sensible region too.
  {
    tensor::Adam adam({cfg.lr, cfg.adam_beta1, cfg.adam_beta2});
    const int K = cfg.latent_dim;
    std::vector<double> head_losses;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::vector<int> order = data.train_users;
      StreamRng shuffle_rng(cfg.seed, kStreamPretrain,
                            static_cast<std::uint64_t>(n_layers),
                            static_cast<std::uint64_t>(epoch));
      shuffle(order, shuffle_rng);
      double epoch_loss = 0.0;
      long seen = 0;
      for (const auto& [lo, hi] : batch_ranges(static_cast<int>(order.size()),
                                               cfg.batch_size)) {
        const std::vector<int> users(order.begin() + lo, order.begin() + hi);
        Matrix a = gather_features(*data.features, users);
        for (int p = 0; p < n_layers; ++p)
          a = model.feature_encoder_layer(p).infer(a);

        model.feature_params().zero_grad();
        auto& gauss = model.feature_gauss_layer();
        auto& dec_in = model.feature_decoder_input_layer();
        const Matrix musig = gauss.forward(a);
        const Matrix mu = musig.leftCols(K);
        const Matrix recon = dec_in.forward(mu);
        const Matrix xc = recon.array().max(clamp).min(1.0 - clamp);
        const double B = static_cast<double>(users.size());
        // Reconstruction plus the prior pull on the mean, so the bottleneck
        // starts in the region the variational objective expects.
        const double loss = (-(a.array() * xc.array().log() +
                               (1.0 - a.array()) * (1.0 - xc.array()).log())
                                  .sum() +
                             0.5 * cfg.lambda_t * mu.squaredNorm()) /
                            B;
        Matrix drecon = (((xc.array() - a.array()) /
                          (xc.array() * (1.0 - xc.array()))) /
                         B)
                            .matrix();
        for (Eigen::Index c = 0; c < recon.cols(); ++c)
          for (Eigen::Index r = 0; r < recon.rows(); ++r)
            if (recon(r, c) <= clamp || recon(r, c) >= 1.0 - clamp)
              drecon(r, c) = 0.0;
        const Matrix dmu = dec_in.backward(drecon) + (cfg.lambda_t / B) * mu;
        Matrix dmusig = Matrix::Zero(dmu.rows(), 2 * K);
        dmusig.leftCols(K) = dmu;
        gauss.backward(dmusig);
        adam.step(model.feature_params());
        epoch_loss += loss * B;
        seen += hi - lo;
      }
      head_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    losses.push_back(std::move(head_losses));
  }
  return losses;
}

TrainResult train(VbaeModel& model, const TrainData& data, int threads) {
  const VbaeConfig& cfg = model.config();
  TrainResult result;
  if (cfg.epochs <= 0) return result;
  if (data.train_users.empty())
    throw std::invalid_argument("no training users");

  tensor::Adam adam_b({cfg.lr, cfg.adam_beta1, cfg.adam_beta2});
  tensor::Adam adam_t({cfg.lr, cfg.adam_beta1, cfg.adam_beta2});

  const auto ranges =
      batch_ranges(static_cast<int>(data.train_users.size()), cfg.batch_size);
  const long total_b_steps =
      static_cast<long>(cfg.epochs) * static_cast<long>(ranges.size());
  const long anneal_steps = cfg.beta_anneal_steps >= 0
                                ? std::max<long>(1, cfg.beta_anneal_steps)
                                : std::max<long>(1, total_b_steps / 2);

  ModelSnapshot best = take_snapshot(model);
  bool lr_halved = false;
  long b_step = 0;

  auto handle_divergence = [&](const char* phase) {
    if (lr_halved)
      throw tensor::DivergenceError(std::string("training diverged twice (") +
                                    phase + ")");
    lr_halved = true;
    adam_b.config().lr *= 0.5;
    adam_t.config().lr *= 0.5;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.tau = cfg.epochs > 1
                  ? cfg.tau_start *
                        std::pow(cfg.tau_end / cfg.tau_start,
                                 static_cast<double>(epoch) /
                                     static_cast<double>(cfg.epochs - 1))
                  : cfg.tau_end;

    // Collaborative pass.
    std::vector<int> order = data.train_users;
    StreamRng rng_b(cfg.seed, kStreamShuffleB,
                    static_cast<std::uint64_t>(epoch));
    shuffle(order, rng_b);
    double alpha_sum = 0.0, alpha_sq = 0.0;
    long alpha_n = 0;
    long users_seen = 0;
    for (const auto& [lo, hi] : ranges) {
      const std::vector<int> users(order.begin() + lo, order.begin() + hi);
      const Batch batch =
          make_batch(data, users, model.has_feature_tower() ||
                                      cfg.channel == ChannelKind::Concat);
      const BStepNoise noise = make_b_step_noise(cfg, users, epoch);
      rec.beta = std::min(
          cfg.beta_max, cfg.beta_max * static_cast<double>(b_step) /
                            static_cast<double>(anneal_steps));
      model.collab_params().zero_grad();
      try {
        const BStepTerms terms =
            model.b_step_loss(batch, rec.beta, rec.tau, noise, true);
        adam_b.step(model.collab_params());
        const double n_users = static_cast<double>(users.size());
        rec.b_loss += terms.loss * n_users;
        rec.nll += terms.nll * n_users;
        rec.kl_zb += terms.kl_z * n_users;
        rec.kl_channel += terms.kl_channel * n_users;
        users_seen += users.size();
        for (Eigen::Index i = 0; i < terms.alpha.size(); ++i) {
          alpha_sum += terms.alpha(i);
          alpha_sq += terms.alpha(i) * terms.alpha(i);
          ++alpha_n;
        }
      } catch (const tensor::DivergenceError&) {
        handle_divergence("b_step");
        rec.lr_halved = true;
      }
      ++b_step;
    }
    if (users_seen > 0) {
      rec.b_loss /= static_cast<double>(users_seen);
      rec.nll /= static_cast<double>(users_seen);
      rec.kl_zb /= static_cast<double>(users_seen);
      rec.kl_channel /= static_cast<double>(users_seen);
    }
    if (alpha_n > 0) {
      rec.alpha_mean = alpha_sum / static_cast<double>(alpha_n);
      const double var =
          alpha_sq / static_cast<double>(alpha_n) - rec.alpha_mean * rec.alpha_mean;
      rec.alpha_std = std::sqrt(std::max(0.0, var));
    }

    // Feature pass.
    if (model.has_feature_tower()) {
      std::vector<int> t_order = data.train_users;
      StreamRng rng_t(cfg.seed, kStreamShuffleT,
                      static_cast<std::uint64_t>(epoch));
      shuffle(t_order, rng_t);
      long t_seen = 0;
      for (const auto& [lo, hi] : ranges) {
        const std::vector<int> users(t_order.begin() + lo,
                                     t_order.begin() + hi);
        const Batch batch = make_batch(data, users, true);
        const TStepNoise noise = make_t_step_noise(cfg, users, epoch);
        model.feature_params().zero_grad();
        try {
          const TStepTerms terms = model.t_step_loss(batch, noise, true);
          adam_t.step(model.feature_params());
          rec.t_loss += terms.loss * static_cast<double>(users.size());
          rec.kl_zt += terms.kl_z * static_cast<double>(users.size());
          t_seen += users.size();
        } catch (const tensor::DivergenceError&) {
          handle_divergence("t_step");
          rec.lr_halved = true;
        }
      }
      if (t_seen > 0) {
        rec.t_loss /= static_cast<double>(t_seen);
        rec.kl_zt /= static_cast<double>(t_seen);
      }
    }

    const ValScores val = validate(model, data, threads);
    rec.val_recall20 = val.recall20;
    rec.val_recall40 = val.recall40;
    rec.val_ndcg100 = val.ndcg100;
    if (result.best_epoch < 0 || val.ndcg100 > result.best_val_ndcg) {
      result.best_val_ndcg = val.ndcg100;
      result.best_epoch = epoch;
      best = take_snapshot(model);
    }
    result.history.push_back(rec);
  }

  restore_snapshot(model, best);
  return result;
}

}  // namespace vbae::model
