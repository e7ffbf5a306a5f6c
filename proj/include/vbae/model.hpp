#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vbae/ingest.hpp"
#include "vbae/linalg.hpp"
#include "vbae/metrics.hpp"
#include "vbae/stochastic.hpp"
#include "vbae/tensor.hpp"

namespace vbae::model {

// Channel between the feature embedding and the fused user variable.
//   Hard   - Bernoulli gate, trained through the Concrete relaxation
//   Soft   - Beta-mean gate, trained through a logistic-normal
//   Stop   - gate forced to 0 (collaborative tower plus a feature
//            reconstruction VAE that never reaches the ratings)
//   Pass   - gate forced to 1
//   Concat - ratings and features concatenated into one Gaussian tower
//   CollabOnly - ratings only, L2-normalized at the input
enum class ChannelKind { Hard, Soft, Stop, Pass, Concat, CollabOnly };

std::string to_string(ChannelKind kind);
ChannelKind channel_from_string(const std::string& name);

struct VbaeConfig {
  int latent_dim = 32;               // K, shared by both embeddings
  int collab_hidden = 64;            // width of the rating embedding layer
  std::vector<int> feature_hidden = {64};
  std::vector<int> decoder_hidden = {};  // rating decoder hidden widths
  ChannelKind channel = ChannelKind::Soft;

  double beta_max = 0.2;
  long beta_anneal_steps = -1;  // <0: half of the total collaborative steps
  double tau_start = 1.0;
  double tau_end = 0.1;

  double lambda_w = 1e-4;
  double lambda_b = 1.0;
  double lambda_t = 1.0;
  double bandwidth_decay_mult = 10.0;  // extra decay on the bandwidth head
  double sigma_logit = 0.1;
  double prior_bernoulli = 0.5;
  double init_std = 0.1;

  int epochs = 100;
  int batch_size = 500;
  int pretrain_epochs = 0;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 1;
};

// One mini-batch of users. `rows` feed the encoder; `targets` are the
// multinomial targets (identical to `rows` for training users). `features`
// is dense, one row per user, and may be 0x0 for feature-free variants.
struct Batch {
  std::vector<std::vector<int>> rows;
  std::vector<std::vector<int>> targets;
  Matrix features;

  int size() const { return static_cast<int>(rows.size()); }
};

// Frozen noise draws, one per user. For the hard channel ch1/ch2 are Gumbel;
// for the soft channel they are standard normal.
struct BStepNoise {
  Matrix eps_z;  // batch x K
  Vector ch1;
  Vector ch2;
};
struct TStepNoise {
  Matrix eps_z;  // batch x K
};

struct BStepTerms {
  double loss = 0.0;
  double nll = 0.0;
  double kl_z = 0.0;
  double kl_channel = 0.0;
  double penalty = 0.0;
  Vector alpha;  // per-user bandwidth (empty for channel-free variants)
  Vector d;      // per-user gate value used in the fusion
};

struct TStepTerms {
  double loss = 0.0;
  double rating_nll = 0.0;
  double feature_nll = 0.0;
  double kl_z = 0.0;
  double penalty = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double b_loss = 0.0, t_loss = 0.0;
  double nll = 0.0, kl_zb = 0.0, kl_channel = 0.0, kl_zt = 0.0;
  double alpha_mean = 0.0, alpha_std = 0.0;
  double beta = 0.0, tau = 0.0;
  double val_recall20 = 0.0, val_recall40 = 0.0, val_ndcg100 = 0.0;
  bool lr_halved = false;
};

class VbaeModel {
 public:
  VbaeModel(VbaeConfig cfg, int n_items, int n_features);

  const VbaeConfig& config() const { return cfg_; }
  int n_items() const { return n_items_; }
  int n_features() const { return n_features_; }
  bool has_feature_tower() const;
  bool has_channel() const;

  tensor::ParamStore& collab_params() { return params_b_; }
  tensor::ParamStore& feature_params() { return params_t_; }
  const tensor::ParamStore& collab_params() const { return params_b_; }
  const tensor::ParamStore& feature_params() const { return params_t_; }
  tensor::ScalarBatchNorm& norm_bn() { return bn_; }
  const tensor::ScalarBatchNorm& norm_bn() const { return bn_; }

  struct CollabEncoding {
    Matrix h;          // batch x K_h rating embeddings
    Vector norm;       // L2 norms of h
    Matrix direction;  // h / norm (zero rows stay zero)
    Matrix mu;         // batch x K
    Matrix log_sigma;  // batch x K
    std::vector<char> empty_row;
    int n_empty = 0;
  };

  // Rating-side encoding. In training mode the forward is cached so the step
  // losses can run backward; inference mode leaves the model untouched.
  CollabEncoding encode_ratings(const std::vector<std::vector<int>>& rows,
                                bool training);

  // alpha = sigmoid(BN(norm) * w + b), elementwise in (0,1). Training mode
  // uses batch statistics and advances the running averages.
  Vector infer_bandwidth(const Vector& norms, bool training);

  struct GaussianBatch {
    Matrix mu;
    Matrix log_sigma;
  };
  GaussianBatch encode_features(const Matrix& x, bool training);

  // v = z_b + d .* z_t with a per-user scalar gate.
  static Matrix fuse(const Matrix& z_b, const Matrix& z_t, const Vector& d);

  // Generation-side forwards on the inference path (no caches, const).
  Matrix decode_ratings(const Matrix& v) const;
  Matrix decode_features(const Matrix& z_t) const;

  // Collaborative-step objective: rating NLL + beta * KL(z_b) + KL(channel)
  // + weight penalty on the collaborative tower. The feature embedding is
  // frozen at its mean. Gradients land in collab_params() only.
  BStepTerms b_step_loss(const Batch& batch, double beta, double tau,
                         const BStepNoise& noise, bool accumulate_grads);

  // Feature-step objective: rating NLL + feature NLL + KL(z_t) + weight
  // penalty on the feature tower, with z_b and the gate frozen at their
  // estimated means. Gradients land in feature_params() only.
  TStepTerms t_step_loss(const Batch& batch, const TStepNoise& noise,
                         bool accumulate_grads);

  // Joint single-sample evidence bound (value only); used to cross-check the
  // decomposed step objectives in tests. `training_bn` picks whether the
  // bandwidth normalization runs on batch or running statistics, matching the
  // step being reconciled.
  double joint_objective_reference(const Batch& batch, const BStepNoise& bn,
                                   const TStepNoise& tn, double tau,
                                   bool training_bn);

  struct Prediction {
    std::vector<int> ranking;  // unobserved items, best first
    double alpha = std::numeric_limits<double>::quiet_NaN();
    double d = 0.0;
  };

  // Fold-in prediction for one user. `draw_key` seeds the fixed Bernoulli
  // draw of the hard channel; everything else is deterministic.
  Prediction predict(const std::vector<int>& observed,
                     const std::vector<double>& x_row,
                     std::uint64_t draw_key) const;
  std::vector<Prediction> predict_batch(
      const std::vector<std::vector<int>>& observed,
      const Matrix& features, const std::vector<std::uint64_t>& draw_keys,
      int threads = 1) const;

  // Layer access for the greedy pretraining pass. The decoder accessor maps
  // an encoder layer to its weight-tied reconstruction counterpart.
  tensor::DenseLayer& feature_encoder_layer(int i);
  tensor::DenseLayer& feature_decoder_tied_layer(int enc_layer);
  tensor::DenseLayer& feature_gauss_layer() { return gauss_t_; }
  tensor::DenseLayer& feature_decoder_input_layer() { return dec_t_in_; }

  // Test hook: run the collaborative objective with the gate forced to a
  // constant and the channel KL optionally dropped. Stop/Pass route through
  // this with 0/1.
  BStepTerms b_step_loss_impl(const Batch& batch, double beta, double tau,
                              const BStepNoise& noise,
                              std::optional<double> forced_d,
                              bool include_channel_kl, bool accumulate_grads);

 private:
  friend class Trainer;

  Matrix concat_input(const Batch& batch) const;
  Matrix feature_mu_frozen(const Matrix& x) const;
  void collab_encode_core(const std::vector<std::vector<int>>& rows,
                          bool training, CollabEncoding& out) const;

  VbaeConfig cfg_;
  int n_items_ = 0;
  int n_features_ = 0;

  tensor::ParamStore params_b_;
  tensor::ParamStore params_t_;
  tensor::ScalarBatchNorm bn_;

  // collaborative tower
  tensor::DenseLayer emb_;    // ratings (or concat input) -> K_h, identity
  tensor::DenseLayer gauss_b_;
  std::vector<tensor::DenseLayer> dec_b_;  // hidden sigmoid, last identity

  // feature tower
  std::vector<tensor::DenseLayer> enc_t_;
  tensor::DenseLayer gauss_t_;
  tensor::DenseLayer dec_t_in_;
  std::vector<tensor::DenseLayer> dec_t_tied_;  // transposed encoder weights
};

// Everything the trainer needs, assembled by the experiment layer. Feature
// rows must already be leakage-free for val/test users.
struct TrainData {
  const std::vector<std::vector<int>>* rows = nullptr;  // per-user fold-in rows
  const ingest::UserFeatureMatrix* features = nullptr;  // may be null
  std::vector<int> train_users;
  std::vector<int> val_users;
  const std::map<int, std::vector<int>>* heldout = nullptr;  // val/test users
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_ndcg = 0.0;
};

// Greedy layerwise pretraining of the feature encoder/decoder stack.
// Returns the per-epoch reconstruction losses, one vector per layer.
std::vector<std::vector<double>> pretrain_features(VbaeModel& model,
                                                   const TrainData& data,
                                                   int epochs);

// Alternates one collaborative epoch and one feature epoch, tracks NDCG@100
// on the validation users, and leaves the model at the best checkpoint.
// On a divergence signal the learning rate is halved once; a second signal
// aborts with tensor::DivergenceError.
TrainResult train(VbaeModel& model, const TrainData& data, int threads = 1);

// Gathers a dense feature sub-matrix for the given users.
Matrix gather_features(const ingest::UserFeatureMatrix& features,
                       const std::vector<int>& users);

// Noise draws keyed by (seed, user, epoch); identical keys give identical
// draws, so batches can be replayed or evaluated in parallel.
BStepNoise make_b_step_noise(const VbaeConfig& cfg,
                             const std::vector<int>& users, int epoch);
TStepNoise make_t_step_noise(const VbaeConfig& cfg,
                             const std::vector<int>& users, int epoch);

}  // namespace vbae::model
