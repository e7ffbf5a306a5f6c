#include "vbae/model.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace vbae::model {

namespace {

constexpr std::uint64_t kStreamInit = 0x11;
constexpr std::uint64_t kStreamPredictDraw = 0x77;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double square(double x) { return x * x; }

}  // namespace

std::string to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::Hard: return "hard";
    case ChannelKind::Soft: return "soft";
    case ChannelKind::Stop: return "stop";
    case ChannelKind::Pass: return "pass";
    case ChannelKind::Concat: return "concat";
    case ChannelKind::CollabOnly: return "collab-only";
  }
  throw std::logic_error("unreachable channel kind");
}

ChannelKind channel_from_string(const std::string& name) {
  if (name == "hard") return ChannelKind::Hard;
  if (name == "soft") return ChannelKind::Soft;
  if (name == "stop") return ChannelKind::Stop;
  if (name == "pass") return ChannelKind::Pass;
  if (name == "concat") return ChannelKind::Concat;
  if (name == "collab-only") return ChannelKind::CollabOnly;
  throw std::invalid_argument("unknown channel kind: " + name);
}

bool VbaeModel::has_feature_tower() const {
  return cfg_.channel != ChannelKind::Concat &&
         cfg_.channel != ChannelKind::CollabOnly;
}

bool VbaeModel::has_channel() const {
  return cfg_.channel == ChannelKind::Hard || cfg_.channel == ChannelKind::Soft;
}

VbaeModel::VbaeModel(VbaeConfig cfg, int n_items, int n_features)
    : cfg_(std::move(cfg)), n_items_(n_items), n_features_(n_features) {
  using tensor::Activation;
  using tensor::DenseLayer;

  if (cfg_.batch_size < 2)
    throw std::invalid_argument("batch_size must be at least 2");
  const int K = cfg_.latent_dim;
  const int Kh = cfg_.collab_hidden;

  const int emb_in =
      cfg_.channel == ChannelKind::Concat ? n_items_ + n_features_ : n_items_;
  emb_ = DenseLayer::create(params_b_, "b.emb", emb_in, Kh,
                            Activation::Identity);
  gauss_b_ = DenseLayer::create(params_b_, "b.gauss", Kh, 2 * K,
                                Activation::Identity);
  if (has_channel() || cfg_.channel == ChannelKind::Stop ||
      cfg_.channel == ChannelKind::Pass) {
    params_b_.add("b.alpha.w", 1, 1, cfg_.bandwidth_decay_mult);
    params_b_.add("b.alpha.b", 1, 1, cfg_.bandwidth_decay_mult);
  }
  int prev = K;
  for (std::size_t i = 0; i < cfg_.decoder_hidden.size(); ++i) {
    dec_b_.push_back(DenseLayer::create(params_b_,
                                        "b.dec." + std::to_string(i), prev,
                                        cfg_.decoder_hidden[i],
                                        Activation::Sigmoid));
    prev = cfg_.decoder_hidden[i];
  }
  dec_b_.push_back(DenseLayer::create(params_b_, "b.dec.out", prev, n_items_,
                                      Activation::Identity));

  if (has_feature_tower()) {
    if (cfg_.feature_hidden.empty())
      throw std::invalid_argument("feature tower needs at least one layer");
    prev = n_features_;
    for (std::size_t i = 0; i < cfg_.feature_hidden.size(); ++i) {
      enc_t_.push_back(DenseLayer::create(params_t_,
                                          "t.enc." + std::to_string(i), prev,
                                          cfg_.feature_hidden[i],
                                          Activation::Sigmoid));
      prev = cfg_.feature_hidden[i];
    }
    gauss_t_ = DenseLayer::create(params_t_, "t.gauss", prev, 2 * K,
                                  Activation::Identity);
    dec_t_in_ = DenseLayer::create(params_t_, "t.dec.in", K, prev,
                                   Activation::Sigmoid);
    // Mirror of the encoder stack with transposed, shared weights and own
    // biases; the final layer emits feature probabilities.
    for (std::size_t i = enc_t_.size(); i-- > 0;) {
      const auto name = "t.dec." + std::to_string(enc_t_.size() - 1 - i);
      tensor::ParamBlock& bias =
          params_t_.add(name + ".b", 1, enc_t_[i].in_dim());
      dec_t_tied_.emplace_back(&enc_t_[i].weights(), &bias,
                               Activation::Sigmoid, /*transpose_w=*/true);
    }
  }

  auto init_store = [&](tensor::ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      tensor::ParamBlock& p = store.block(i);
      if (p.name.ends_with(".b")) continue;  // biases stay zero
      StreamRng rng(cfg_.seed, kStreamInit, fnv1a(p.name));
      for (Eigen::Index c = 0; c < p.value.cols(); ++c)
        for (Eigen::Index r = 0; r < p.value.rows(); ++r)
          p.value(r, c) = cfg_.init_std * rng.normal();
    }
  };
  init_store(params_b_);
  init_store(params_t_);
}

void VbaeModel::collab_encode_core(const std::vector<std::vector<int>>& rows,
                                   bool training,
                                   CollabEncoding& out) const {
  const int B = static_cast<int>(rows.size());
  out.empty_row.assign(static_cast<std::size_t>(B), 0);
  out.n_empty = 0;
  for (int i = 0; i < B; ++i) {
    if (rows[static_cast<std::size_t>(i)].empty()) {
      out.empty_row[static_cast<std::size_t>(i)] = 1;
      ++out.n_empty;
    }
  }
  (void)training;
}

VbaeModel::CollabEncoding VbaeModel::encode_ratings(
    const std::vector<std::vector<int>>& rows, bool training) {
  CollabEncoding enc;
  collab_encode_core(rows, training, enc);
  const int B = static_cast<int>(rows.size());
  const int K = cfg_.latent_dim;

  std::vector<double> scale;
  if (cfg_.channel == ChannelKind::CollabOnly) {
    // L2-normalized input ratings instead of normalized hidden embeddings.
    scale.resize(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      const auto n = rows[static_cast<std::size_t>(i)].size();
      scale[static_cast<std::size_t>(i)] =
          n > 0 ? 1.0 / std::sqrt(static_cast<double>(n)) : 0.0;
    }
  }
  if (cfg_.channel == ChannelKind::Concat)
    throw std::logic_error("concat variant encodes through the batch path");

  enc.h = training ? emb_.forward_rows(rows, scale)
                   : emb_.infer_rows(rows, scale);

  const bool normalize_hidden = cfg_.channel != ChannelKind::CollabOnly;
  Matrix gauss_in;
  if (normalize_hidden) {
    enc.norm = enc.h.rowwise().norm();
    enc.direction = Matrix::Zero(B, enc.h.cols());
    for (int i = 0; i < B; ++i)
      if (enc.norm(i) > 0.0) enc.direction.row(i) = enc.h.row(i) / enc.norm(i);
    gauss_in = enc.direction;
  } else {
    enc.norm = enc.h.rowwise().norm();
    enc.direction = enc.h;
    gauss_in = enc.h;
  }

  Matrix musig =
      training ? gauss_b_.forward(gauss_in) : gauss_b_.infer(gauss_in);
  enc.mu = musig.leftCols(K);
  enc.log_sigma = musig.rightCols(K);
  // Empty rating rows carry no collaborative evidence: the posterior falls
  // back to the prior.
  for (int i = 0; i < B; ++i) {
    if (!enc.empty_row[static_cast<std::size_t>(i)]) continue;
    enc.mu.row(i).setZero();
    enc.log_sigma.row(i).setConstant(-0.5 * std::log(cfg_.lambda_b));
  }
  return enc;
}

Vector VbaeModel::infer_bandwidth(const Vector& norms, bool training) {
  const Vector normed = bn_.forward(norms, training);
  const double w = params_b_.at("b.alpha.w").value(0, 0);
  const double b = params_b_.at("b.alpha.b").value(0, 0);
  return (normed.array() * w + b).unaryExpr(
      [](double v) { return sigmoid(v); });
}

VbaeModel::GaussianBatch VbaeModel::encode_features(const Matrix& x,
                                                    bool training) {
  if (!has_feature_tower())
    throw std::logic_error("this variant has no feature tower");
  if ((x.array() < 0.0).any() || (x.array() > 1.0).any())
    throw std::invalid_argument("feature values must lie in [0,1]");
  Matrix a = x;
  for (auto& layer : enc_t_) a = training ? layer.forward(a) : layer.infer(a);
  const Matrix musig = training ? gauss_t_.forward(a) : gauss_t_.infer(a);
  const int K = cfg_.latent_dim;
  return {musig.leftCols(K), musig.rightCols(K)};
}

Matrix VbaeModel::fuse(const Matrix& z_b, const Matrix& z_t, const Vector& d) {
  if (z_b.rows() != z_t.rows() || z_b.cols() != z_t.cols() ||
      d.size() != z_b.rows())
    throw std::invalid_argument("fuse: dimension mismatch");
  return z_b + d.asDiagonal() * z_t;
}

Matrix VbaeModel::decode_ratings(const Matrix& v) const {
  Matrix a = v;
  for (const auto& layer : dec_b_) a = layer.infer(a);
  return a;
}

Matrix VbaeModel::decode_features(const Matrix& z_t) const {
  if (!has_feature_tower())
    throw std::logic_error("this variant has no feature tower");
  Matrix a = dec_t_in_.infer(z_t);
  for (const auto& layer : dec_t_tied_) a = layer.infer(a);
  return a;
}

Matrix VbaeModel::concat_input(const Batch& batch) const {
  const int B = batch.size();
  Matrix input = Matrix::Zero(B, n_items_ + n_features_);
  for (int i = 0; i < B; ++i) {
    const auto& row = batch.rows[static_cast<std::size_t>(i)];
    if (!row.empty()) {
      const double s = 1.0 / std::sqrt(static_cast<double>(row.size()));
      for (int j : row) input(i, j) = s;
    }
  }
  if (batch.features.size() > 0)
    input.rightCols(n_features_) = batch.features;
  return input;
}

tensor::DenseLayer& VbaeModel::feature_encoder_layer(int i) {
  return enc_t_.at(static_cast<std::size_t>(i));
}

tensor::DenseLayer& VbaeModel::feature_decoder_tied_layer(int enc_layer) {
  return dec_t_tied_.at(enc_t_.size() - 1 -
                        static_cast<std::size_t>(enc_layer));
}

Matrix VbaeModel::feature_mu_frozen(const Matrix& x) const {
  Matrix a = x;
  for (const auto& layer : enc_t_) a = layer.infer(a);
  return gauss_t_.infer(a).leftCols(cfg_.latent_dim);
}

namespace {

// -sum_{j in targets_i} logp_ij, plus its gradient scaffold.
double multinomial_nll(const Matrix& logp,
                       const std::vector<std::vector<int>>& targets) {
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (int j : targets[i]) total -= logp(static_cast<Eigen::Index>(i), j);
  return total;
}

Matrix multinomial_nll_grad(const Matrix& logp,
                            const std::vector<std::vector<int>>& targets,
                            double scale) {
  Matrix g = logp.array().exp().matrix();
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    g.row(i) *= static_cast<double>(targets[static_cast<std::size_t>(i)].size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (int j : targets[i]) g(static_cast<Eigen::Index>(i), j) -= 1.0;
  return g * scale;
}

constexpr double kProbClampLo = 1e-7;

}  // namespace

BStepTerms VbaeModel::b_step_loss(const Batch& batch, double beta, double tau,
                                  const BStepNoise& noise,
                                  bool accumulate_grads) {
  switch (cfg_.channel) {
    case ChannelKind::Stop:
      return b_step_loss_impl(batch, beta, tau, noise, 0.0, false,
                              accumulate_grads);
    case ChannelKind::Pass:
      return b_step_loss_impl(batch, beta, tau, noise, 1.0, false,
                              accumulate_grads);
    default:
      return b_step_loss_impl(batch, beta, tau, noise, std::nullopt,
                              has_channel(), accumulate_grads);
  }
}

BStepTerms VbaeModel::b_step_loss_impl(const Batch& batch, double beta,
                                       double tau, const BStepNoise& noise,
                                       std::optional<double> forced_d,
                                       bool include_channel_kl,
                                       bool accumulate_grads) {
  const int B = batch.size();
  const int K = cfg_.latent_dim;
  if (B < 2) throw std::invalid_argument("batch must hold at least 2 users");
  BStepTerms terms;

  // ---- forward ----
  const bool concat = cfg_.channel == ChannelKind::Concat;
  const bool collab_only = cfg_.channel == ChannelKind::CollabOnly;
  const bool gated = !concat && !collab_only;

  CollabEncoding enc;
  Matrix concat_in;
  if (concat) {
    collab_encode_core(batch.rows, true, enc);
    concat_in = concat_input(batch);
    enc.h = emb_.forward(concat_in);
    const Matrix musig = gauss_b_.forward(enc.h);
    enc.mu = musig.leftCols(K);
    enc.log_sigma = musig.rightCols(K);
  } else {
    enc = encode_ratings(batch.rows, true);
  }

  Vector alpha_logit, alpha;
  Vector d = Vector::Zero(B);
  Vector normed;
  if (gated) {
    if (forced_d.has_value()) {
      d.setConstant(*forced_d);
    } else {
      normed = bn_.forward(enc.norm, true);
      const double w = params_b_.at("b.alpha.w").value(0, 0);
      const double b0 = params_b_.at("b.alpha.b").value(0, 0);
      alpha_logit = normed.array() * w + b0;
      alpha = alpha_logit.unaryExpr([](double v) { return sigmoid(v); });
      for (int i = 0; i < B; ++i) {
        if (cfg_.channel == ChannelKind::Hard)
          d(i) = sigmoid((alpha_logit(i) + noise.ch1(i) - noise.ch2(i)) / tau);
        else
          d(i) = sigmoid(alpha_logit(i) +
                         cfg_.sigma_logit * (noise.ch1(i) - noise.ch2(i)));
      }
    }
  }

  const Matrix sigma_b = enc.log_sigma.array().exp();
  const Matrix z_b = enc.mu + noise.eps_z.cwiseProduct(sigma_b);

  Matrix z_t;
  Matrix v;
  if (gated) {
    z_t = feature_mu_frozen(batch.features);
    v = fuse(z_b, z_t, d);
  } else {
    v = z_b;
  }

  Matrix a = v;
  for (auto& layer : dec_b_) a = layer.forward(a);
  if (!a.allFinite())
    throw tensor::DivergenceError("non-finite rating logits");
  const Matrix logp = tensor::softmax_logprob(a);

  terms.nll = multinomial_nll(logp, batch.targets) / B;
  double kl_z = 0.0;
  for (int i = 0; i < B; ++i)
    kl_z += stoch::kl_gaussian_vs_prior(enc.mu.row(i).transpose(),
                                        enc.log_sigma.row(i).transpose(),
                                        cfg_.lambda_b);
  terms.kl_z = kl_z / B;

  if (include_channel_kl && alpha.size() > 0) {
    double kl_ch = 0.0;
    for (int i = 0; i < B; ++i) {
      if (cfg_.channel == ChannelKind::Hard)
        kl_ch += stoch::kl_bernoulli(alpha(i), cfg_.prior_bernoulli);
      else
        kl_ch += square(alpha_logit(i)) /
                 (4.0 * square(cfg_.sigma_logit));
    }
    terms.kl_channel = kl_ch / B;
  }

  terms.penalty = params_b_.apply_l2(cfg_.lambda_w, "b.", accumulate_grads);
  terms.loss = terms.nll + beta * terms.kl_z + terms.kl_channel + terms.penalty;
  terms.alpha = alpha;
  terms.d = d;
  if (!std::isfinite(terms.loss))
    throw tensor::DivergenceError("non-finite collaborative loss");
  if (!accumulate_grads) return terms;

  // ---- backward ----
  const Matrix dlogits = multinomial_nll_grad(logp, batch.targets, 1.0 / B);
  Matrix dv = dlogits;
  for (std::size_t li = dec_b_.size(); li-- > 0;)
    dv = dec_b_[li].backward(dv);

  // v = z_b + d .* z_t
  Matrix dmu = dv;  // through z_b = mu + eps*sigma
  Matrix dlogsig = dv.cwiseProduct(noise.eps_z).cwiseProduct(sigma_b);
  dmu += (beta / B) * cfg_.lambda_b * enc.mu;
  dlogsig.array() +=
      (beta / B) * (cfg_.lambda_b * sigma_b.array().square() - 1.0);

  Vector dalpha_logit;
  if (gated && !forced_d.has_value()) {
    const Vector dd = dv.cwiseProduct(z_t).rowwise().sum();
    dalpha_logit = Vector::Zero(B);
    for (int i = 0; i < B; ++i) {
      const double sample_grad = d(i) * (1.0 - d(i));
      dalpha_logit(i) = cfg_.channel == ChannelKind::Hard
                            ? dd(i) * sample_grad / tau
                            : dd(i) * sample_grad;
      if (include_channel_kl) {
        if (cfg_.channel == ChannelKind::Hard) {
          const double a_i = alpha(i);
          const double dkl = std::log(a_i / cfg_.prior_bernoulli) -
                             std::log((1.0 - a_i) / (1.0 - cfg_.prior_bernoulli));
          dalpha_logit(i) += dkl * a_i * (1.0 - a_i) / B;
        } else {
          dalpha_logit(i) +=
              alpha_logit(i) / (2.0 * square(cfg_.sigma_logit) * B);
        }
      }
    }
  }

  Matrix dmusig(B, 2 * K);
  dmusig.leftCols(K) = dmu;
  dmusig.rightCols(K) = dlogsig;
  for (int i = 0; i < B; ++i)
    if (enc.empty_row[static_cast<std::size_t>(i)]) dmusig.row(i).setZero();
  Matrix dgauss_in = gauss_b_.backward(dmusig);

  if (concat) {
    emb_.backward(dgauss_in);
  } else if (collab_only) {
    emb_.backward_rows(dgauss_in);
  } else {
    // Undo the norm/direction split: dh = dnorm*dir + (I - dir dir^T) ddir / n
    Vector dnorm = Vector::Zero(B);
    if (dalpha_logit.size() > 0) {
      const double w = params_b_.at("b.alpha.w").value(0, 0);
      tensor::ParamBlock& wa = params_b_.at("b.alpha.w");
      tensor::ParamBlock& ba = params_b_.at("b.alpha.b");
      wa.grad(0, 0) += dalpha_logit.dot(normed);
      ba.grad(0, 0) += dalpha_logit.sum();
      dnorm = bn_.backward(dalpha_logit * w);
    }
    Matrix dh = Matrix::Zero(B, enc.h.cols());
    for (int i = 0; i < B; ++i) {
      if (enc.norm(i) <= 0.0) continue;
      const auto dir = enc.direction.row(i);
      const auto ddir = dgauss_in.row(i);
      const double radial = ddir.dot(dir);
      dh.row(i) = dnorm(i) * dir + (ddir - radial * dir) / enc.norm(i);
    }
    emb_.backward_rows(dh);
  }
  return terms;
}

TStepTerms VbaeModel::t_step_loss(const Batch& batch, const TStepNoise& noise,
                                  bool accumulate_grads) {
  if (!has_feature_tower())
    throw std::logic_error("t_step is undefined without a feature tower");
  const int B = batch.size();
  const int K = cfg_.latent_dim;
  TStepTerms terms;

  // Frozen collaborative estimates (eval mode, no gradients).
  CollabEncoding enc;
  collab_encode_core(batch.rows, false, enc);
  enc.h = emb_.infer_rows(batch.rows);
  enc.norm = enc.h.rowwise().norm();
  Matrix dir = Matrix::Zero(B, enc.h.cols());
  for (int i = 0; i < B; ++i)
    if (enc.norm(i) > 0.0) dir.row(i) = enc.h.row(i) / enc.norm(i);
  Matrix musig_b = gauss_b_.infer(dir);
  Matrix mu_b = musig_b.leftCols(K);
  for (int i = 0; i < B; ++i)
    if (enc.empty_row[static_cast<std::size_t>(i)]) mu_b.row(i).setZero();

  Vector d_bar = Vector::Zero(B);
  if (has_channel()) {
    const Vector normed = bn_.eval(enc.norm);
    const double w = params_b_.at("b.alpha.w").value(0, 0);
    const double b0 = params_b_.at("b.alpha.b").value(0, 0);
    d_bar = (normed.array() * w + b0)
                .unaryExpr([](double v) { return sigmoid(v); });
  } else if (cfg_.channel == ChannelKind::Pass) {
    d_bar.setOnes();
  }

  // Feature tower, training mode.
  Matrix x = batch.features;
  Matrix act = x;
  for (auto& layer : enc_t_) act = layer.forward(act);
  const Matrix musig_t = gauss_t_.forward(act);
  const Matrix mu_t = musig_t.leftCols(K);
  const Matrix logsig_t = musig_t.rightCols(K);
  const Matrix sigma_t = logsig_t.array().exp();
  const Matrix z_t = mu_t + noise.eps_z.cwiseProduct(sigma_t);

  const Matrix v = fuse(mu_b, z_t, d_bar);
  Matrix a = v;
  for (auto& layer : dec_b_) a = layer.forward(a);
  if (!a.allFinite())
    throw tensor::DivergenceError("non-finite rating logits");
  const Matrix logp = tensor::softmax_logprob(a);
  terms.rating_nll = multinomial_nll(logp, batch.targets) / B;

  Matrix recon = dec_t_in_.forward(z_t);
  for (auto& layer : dec_t_tied_) recon = layer.forward(recon);
  const Matrix xc = recon.array().max(kProbClampLo).min(1.0 - kProbClampLo);
  terms.feature_nll =
      -(x.array() * xc.array().log() +
        (1.0 - x.array()) * (1.0 - xc.array()).log())
           .sum() /
      B;

  double kl_z = 0.0;
  for (int i = 0; i < B; ++i)
    kl_z += stoch::kl_gaussian_vs_prior(mu_t.row(i).transpose(),
                                        logsig_t.row(i).transpose(),
                                        cfg_.lambda_t);
  terms.kl_z = kl_z / B;
  terms.penalty = params_t_.apply_l2(cfg_.lambda_w, "t.", accumulate_grads);
  terms.loss =
      terms.rating_nll + terms.feature_nll + terms.kl_z + terms.penalty;
  if (!std::isfinite(terms.loss))
    throw tensor::DivergenceError("non-finite feature loss");
  if (!accumulate_grads) return terms;

  // ---- backward (feature tower only; decoder weights stay frozen) ----
  const Matrix dlogits = multinomial_nll_grad(logp, batch.targets, 1.0 / B);
  Matrix dv = dlogits;
  for (std::size_t li = dec_b_.size(); li-- > 0;)
    dv = dec_b_[li].backward(dv, /*accumulate_params=*/false);
  Matrix dz = d_bar.asDiagonal() * dv;

  Matrix drecon =
      (((xc.array() - x.array()) / (xc.array() * (1.0 - xc.array()))) / B)
          .matrix();
  // No gradient where the output clamp is active.
  for (Eigen::Index c = 0; c < recon.cols(); ++c)
    for (Eigen::Index r = 0; r < recon.rows(); ++r)
      if (recon(r, c) <= kProbClampLo || recon(r, c) >= 1.0 - kProbClampLo)
        drecon(r, c) = 0.0;
  Matrix dg = drecon;
  for (std::size_t li = dec_t_tied_.size(); li-- > 0;)
    dg = dec_t_tied_[li].backward(dg);
  dz += dec_t_in_.backward(dg);

  Matrix dmu = dz + (cfg_.lambda_t / B) * mu_t;
  Matrix dlogsig = dz.cwiseProduct(noise.eps_z).cwiseProduct(sigma_t);
  dlogsig.array() += (cfg_.lambda_t * sigma_t.array().square() - 1.0) / B;

  Matrix dmusig(B, 2 * K);
  dmusig.leftCols(K) = dmu;
  dmusig.rightCols(K) = dlogsig;
  Matrix dact = gauss_t_.backward(dmusig);
  for (std::size_t li = enc_t_.size(); li-- > 0;)
    dact = enc_t_[li].backward(dact);
  return terms;
}

double VbaeModel::joint_objective_reference(const Batch& batch,
                                            const BStepNoise& bnoise,
                                            const TStepNoise& tnoise,
                                            double tau, bool training_bn) {
  const int B = batch.size();
  const int K = cfg_.latent_dim;
  const bool gated = has_feature_tower();

  CollabEncoding enc;
  Matrix mu_b, logsig_b;
  if (cfg_.channel == ChannelKind::Concat) {
    const Matrix in = concat_input(batch);
    const Matrix musig = gauss_b_.infer(emb_.infer(in));
    mu_b = musig.leftCols(K);
    logsig_b = musig.rightCols(K);
    enc.empty_row.assign(static_cast<std::size_t>(B), 0);
  } else {
    enc = encode_ratings(batch.rows, false);
    mu_b = enc.mu;
    logsig_b = enc.log_sigma;
  }
  const Matrix z_b =
      mu_b + bnoise.eps_z.cwiseProduct(logsig_b.array().exp().matrix());

  Vector d = Vector::Zero(B);
  Vector alpha_logit;
  double kl_channel = 0.0;
  if (has_channel()) {
    const Vector normed =
        training_bn ? bn_.forward(enc.norm, true) : bn_.eval(enc.norm);
    const double w = params_b_.at("b.alpha.w").value(0, 0);
    const double b0 = params_b_.at("b.alpha.b").value(0, 0);
    alpha_logit = normed.array() * w + b0;
    for (int i = 0; i < B; ++i) {
      if (cfg_.channel == ChannelKind::Hard) {
        d(i) = sigmoid((alpha_logit(i) + bnoise.ch1(i) - bnoise.ch2(i)) / tau);
        const double a_i = sigmoid(alpha_logit(i));
        kl_channel += stoch::kl_bernoulli(a_i, cfg_.prior_bernoulli);
      } else {
        d(i) = sigmoid(alpha_logit(i) +
                       cfg_.sigma_logit * (bnoise.ch1(i) - bnoise.ch2(i)));
        kl_channel += square(alpha_logit(i)) / (4.0 * square(cfg_.sigma_logit));
      }
    }
  } else if (cfg_.channel == ChannelKind::Pass) {
    d.setOnes();
  }

  double total = 0.0;
  Matrix v = z_b;
  double kl_zt = 0.0, feature_nll = 0.0;
  if (gated) {
    const GaussianBatch post_t = encode_features(batch.features, false);
    const Matrix z_t =
        post_t.mu + tnoise.eps_z.cwiseProduct(post_t.log_sigma.array().exp().matrix());
    v = fuse(z_b, z_t, d);
    const Matrix recon = decode_features(z_t);
    const Matrix xc = recon.array().max(kProbClampLo).min(1.0 - kProbClampLo);
    feature_nll = -(batch.features.array() * xc.array().log() +
                    (1.0 - batch.features.array()) *
                        (1.0 - xc.array()).log())
                       .sum();
    for (int i = 0; i < B; ++i)
      kl_zt += stoch::kl_gaussian_vs_prior(post_t.mu.row(i).transpose(),
                                           post_t.log_sigma.row(i).transpose(),
                                           cfg_.lambda_t);
  }
  const Matrix logp = tensor::softmax_logprob(decode_ratings(v));
  total += multinomial_nll(logp, batch.targets);
  total += feature_nll;
  for (int i = 0; i < B; ++i)
    total += stoch::kl_gaussian_vs_prior(mu_b.row(i).transpose(),
                                         logsig_b.row(i).transpose(),
                                         cfg_.lambda_b);
  total += kl_zt + kl_channel;
  return total / B;
}

VbaeModel::Prediction VbaeModel::predict(const std::vector<int>& observed,
                                         const std::vector<double>& x_row,
                                         std::uint64_t draw_key) const {
  Matrix features(1, n_features_);
  if (has_feature_tower() || cfg_.channel == ChannelKind::Concat) {
    if (static_cast<int>(x_row.size()) != n_features_)
      throw std::invalid_argument("feature row width mismatch");
    for (int s = 0; s < n_features_; ++s) features(0, s) = x_row[static_cast<std::size_t>(s)];
  } else {
    features.resize(1, 0);
  }
  std::vector<std::vector<int>> rows{observed};
  return predict_batch(rows, features, {draw_key}, 1).front();
}

std::vector<VbaeModel::Prediction> VbaeModel::predict_batch(
    const std::vector<std::vector<int>>& observed, const Matrix& features,
    const std::vector<std::uint64_t>& draw_keys, int threads) const {
  const int n = static_cast<int>(observed.size());
  std::vector<Prediction> out(static_cast<std::size_t>(n));
  const int K = cfg_.latent_dim;

  auto work = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const auto& row = observed[static_cast<std::size_t>(i)];
      std::vector<std::vector<int>> one{row};
      Prediction& pred = out[static_cast<std::size_t>(i)];

      Matrix mu_b;
      double alpha = std::numeric_limits<double>::quiet_NaN();
      if (cfg_.channel == ChannelKind::Concat) {
        Batch b;
        b.rows = one;
        b.features = features.row(i);
        const Matrix in = concat_input(b);
        mu_b = gauss_b_.infer(emb_.infer(in)).leftCols(K);
      } else if (cfg_.channel == ChannelKind::CollabOnly) {
        std::vector<double> scale{
            row.empty() ? 0.0 : 1.0 / std::sqrt(static_cast<double>(row.size()))};
        const Matrix h = emb_.infer_rows(one, scale);
        mu_b = gauss_b_.infer(h).leftCols(K);
      } else {
        const Matrix h = emb_.infer_rows(one);
        const double norm = h.row(0).norm();
        Matrix dir = Matrix::Zero(1, h.cols());
        if (norm > 0.0) dir = h / norm;
        mu_b = gauss_b_.infer(dir).leftCols(K);
        if (row.empty()) mu_b.setZero();
        if (has_channel()) {
          Vector norms(1);
          norms(0) = norm;
          const Vector normed = bn_.eval(norms);
          const double w = params_b_.at("b.alpha.w").value(0, 0);
          const double b0 = params_b_.at("b.alpha.b").value(0, 0);
          alpha = sigmoid(normed(0) * w + b0);
        }
      }

      double d_used = 0.0;
      Matrix v = mu_b;
      if (has_feature_tower()) {
        Matrix act = features.row(i);
        for (const auto& layer : enc_t_) act = layer.infer(act);
        const Matrix mu_t = gauss_t_.infer(act).leftCols(K);
        switch (cfg_.channel) {
          case ChannelKind::Soft:
            d_used = alpha;
            break;
          case ChannelKind::Hard: {
            StreamRng rng(cfg_.seed, kStreamPredictDraw,
                          draw_keys[static_cast<std::size_t>(i)]);
            d_used = rng.uniform() < alpha ? 1.0 : 0.0;
            break;
          }
          case ChannelKind::Stop:
            d_used = 0.0;
            break;
          case ChannelKind::Pass:
            d_used = 1.0;
            break;
          default:
            break;
        }
        v = mu_b + d_used * mu_t;
      }

      const Matrix logits = decode_ratings(v);
      std::vector<int> order;
      order.reserve(static_cast<std::size_t>(n_items_) - row.size());
      std::vector<char> is_observed(static_cast<std::size_t>(n_items_), 0);
      for (int j : row) is_observed[static_cast<std::size_t>(j)] = 1;
      for (int j = 0; j < n_items_; ++j)
        if (!is_observed[static_cast<std::size_t>(j)]) order.push_back(j);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = logits(0, a), sb = logits(0, b);
        if (sa != sb) return sa > sb;
        return a < b;  // deterministic tie-break
      });
      pred.ranking = std::move(order);
      pred.alpha = alpha;
      pred.d = d_used;
    }
  };

  if (threads <= 1 || n < 2 * threads) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int lo = t * chunk;
      const int hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

Matrix gather_features(const ingest::UserFeatureMatrix& features,
                       const std::vector<int>& users) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(users.size()),
                            features.vocab_size);
  for (std::size_t i = 0; i < users.size(); ++i)
    for (const auto& [col, val] :
         features.values[static_cast<std::size_t>(users[i])])
      out(static_cast<Eigen::Index>(i), col) = val;
  return out;
}

}  // namespace vbae::model
