#pragma once

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vbae/linalg.hpp"
#include "vbae/rng.hpp"

namespace vbae::tensor {

enum class Activation { Identity, Sigmoid };

// One named trainable tensor. Vectors are stored as 1 x n row matrices so the
// optimizer and the checkpoint writer can treat every block uniformly.
struct ParamBlock {
  std::string name;
  Matrix value;
  Matrix grad;
  double decay_mult = 1.0;  // multiplies the global weight-decay coefficient
};

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  ParamBlock& add(const std::string& name, Eigen::Index rows,
                  Eigen::Index cols, double decay_mult = 1.0);
  ParamBlock& at(const std::string& name);
  const ParamBlock& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return blocks_.size(); }
  ParamBlock& block(std::size_t i) { return *blocks_[i]; }
  const ParamBlock& block(std::size_t i) const { return *blocks_[i]; }

  void zero_grad();
  // Adds decay_mult * lambda_w * value to every block's gradient and returns
  // the corresponding penalty value (lambda_w/2) * sum decay_mult*|block|^2,
  // restricted to blocks whose name starts with `prefix`.
  double apply_l2(double lambda_w, const std::string& prefix,
                  bool accumulate_grads);

 private:
  std::vector<std::unique_ptr<ParamBlock>> blocks_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Affine layer over blocks held in a ParamStore. `transpose_w` makes the layer
// apply W^T instead of W, sharing the weight block with another layer; the
// bias block is always the layer's own.
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(ParamBlock* W, ParamBlock* b, Activation act,
             bool transpose_w = false)
      : W_(W), b_(b), act_(act), transpose_w_(transpose_w) {}

  // Creates the blocks `<name>.W` (in x out) and `<name>.b` (1 x out).
  static DenseLayer create(ParamStore& store, const std::string& name,
                           Eigen::Index in, Eigen::Index out, Activation act,
                           double decay_mult = 1.0);

  Eigen::Index in_dim() const;
  Eigen::Index out_dim() const;

  void init_gaussian(double stddev, StreamRng& rng);  // biases stay zero

  // Dense forward; caches inputs for backward.
  Matrix forward(const Matrix& h);
  // Forward over sparse binary rows: row i of the output is
  // scale[i] * sum_{j in rows[i]} W.row(j) + b. Only valid when the layer is
  // not transposed. An empty scale means all ones. Empty rows carry no
  // evidence and map to zero pre-activations with no bias, so they produce
  // and receive nothing.
  Matrix forward_rows(std::span<const std::vector<int>> rows,
                      std::span<const double> scale = {});
  // Forward without touching caches or gradients (prediction / frozen towers).
  Matrix infer(const Matrix& h) const;
  Matrix infer_rows(std::span<const std::vector<int>> rows,
                    std::span<const double> scale = {}) const;

  // Accumulates parameter gradients (unless accumulate_params is false) and
  // returns the gradient w.r.t. the dense input of the last forward call.
  Matrix backward(const Matrix& upstream, bool accumulate_params = true);
  // Variant for forward_rows; there is no input gradient to return.
  void backward_rows(const Matrix& upstream);

  Activation activation() const { return act_; }
  ParamBlock& weights() { return *W_; }
  ParamBlock& bias() { return *b_; }

 private:
  Matrix apply_weights(const Matrix& h) const;
  Matrix activate(const Matrix& z) const;
  Matrix grad_through_activation(const Matrix& upstream) const;

  ParamBlock* W_ = nullptr;
  ParamBlock* b_ = nullptr;
  Activation act_ = Activation::Identity;
  bool transpose_w_ = false;

  Matrix in_cache_;
  Matrix out_cache_;
  std::vector<std::vector<int>> rows_cache_;
  std::vector<double> scale_cache_;
  bool has_forward_ = false;
  bool sparse_forward_ = false;
};

// Batch normalization of a scalar per sample. Training mode normalizes by the
// batch statistics (population variance) and updates the running averages;
// eval mode uses the running averages.
class ScalarBatchNorm {
 public:
  double running_mean = 0.0;
  double running_var = 1.0;
  double momentum = 0.99;
  double eps = 1e-8;

  Vector forward(const Vector& x, bool training);
  // Eval-mode normalization without touching any state.
  Vector eval(const Vector& x) const;
  // Gradient through the batch statistics of the last training forward (or
  // the running stats in eval mode).
  Vector backward(const Vector& upstream) const;

 private:
  Vector y_cache_;
  double inv_std_cache_ = 1.0;
  bool training_cache_ = false;
  bool has_forward_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // scaled per block by ParamBlock::decay_mult
};

// Raised when a step sees non-finite gradients or a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }
  long step_count() const { return step_; }

  // One update over every block in the store from its accumulated gradient.
  // Non-finite gradients leave all parameters unchanged and throw
  // DivergenceError.
  void step(ParamStore& params);

  void reset();

 private:
  struct Slot {
    Matrix m, v;
  };
  AdamConfig cfg_;
  std::unordered_map<std::string, Slot> slots_;
  long step_ = 0;
};

// Row-wise log-softmax, log-sum-exp stabilized. Throws on non-finite input.
Matrix softmax_logprob(const Matrix& logits);

// Central finite differences of `loss` against the accumulated analytic
// gradients, per block. `loss` must be deterministic (noise frozen) and must
// not mutate gradients.
struct GradCheckEntry {
  std::string block;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};
struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool within(double tol) const { return max_rel_err <= tol; }
};

GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  ParamStore& params, double step = 1e-5);

}  // namespace vbae::tensor
