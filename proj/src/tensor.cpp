#include "vbae/tensor.hpp"

#include <cmath>

namespace vbae::tensor {

ParamBlock& ParamStore::add(const std::string& name, Eigen::Index rows,
                            Eigen::Index cols, double decay_mult) {
  if (index_.count(name))
    throw std::invalid_argument("duplicate parameter block: " + name);
  auto block = std::make_unique<ParamBlock>();
  block->name = name;
  block->value = Matrix::Zero(rows, cols);
  block->grad = Matrix::Zero(rows, cols);
  block->decay_mult = decay_mult;
  index_[name] = blocks_.size();
  blocks_.push_back(std::move(block));
  return *blocks_.back();
}

ParamBlock& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::out_of_range("no parameter block named " + name);
  return *blocks_[it->second];
}

const ParamBlock& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::out_of_range("no parameter block named " + name);
  return *blocks_[it->second];
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

void ParamStore::zero_grad() {
  for (auto& b : blocks_) b->grad.setZero();
}

double ParamStore::apply_l2(double lambda_w, const std::string& prefix,
                            bool accumulate_grads) {
  double penalty = 0.0;
  if (lambda_w == 0.0) return penalty;
  for (auto& b : blocks_) {
    if (b->name.rfind(prefix, 0) != 0) continue;
    const double c = lambda_w * b->decay_mult;
    penalty += 0.5 * c * b->value.squaredNorm();
    if (accumulate_grads) b->grad += c * b->value;
  }
  return penalty;
}

DenseLayer DenseLayer::create(ParamStore& store, const std::string& name,
                              Eigen::Index in, Eigen::Index out,
                              Activation act, double decay_mult) {
  ParamBlock& W = store.add(name + ".W", in, out, decay_mult);
  ParamBlock& b = store.add(name + ".b", 1, out, decay_mult);
  return DenseLayer(&W, &b, act);
}

Eigen::Index DenseLayer::in_dim() const {
  return transpose_w_ ? W_->value.cols() : W_->value.rows();
}

Eigen::Index DenseLayer::out_dim() const {
  return transpose_w_ ? W_->value.rows() : W_->value.cols();
}

void DenseLayer::init_gaussian(double stddev, StreamRng& rng) {
  for (Eigen::Index j = 0; j < W_->value.cols(); ++j)
    for (Eigen::Index i = 0; i < W_->value.rows(); ++i)
      W_->value(i, j) = stddev * rng.normal();
  b_->value.setZero();
}

Matrix DenseLayer::apply_weights(const Matrix& h) const {
  Matrix z = transpose_w_ ? (h * W_->value.transpose()).eval()
                          : (h * W_->value).eval();
  z.rowwise() += b_->value.row(0);
  return z;
}

Matrix DenseLayer::activate(const Matrix& z) const {
  return act_ == Activation::Sigmoid ? sigmoid(z) : z;
}

Matrix DenseLayer::forward(const Matrix& h) {
  if (h.cols() != in_dim())
    throw std::invalid_argument("dense forward: input width " +
                                std::to_string(h.cols()) + " != " +
                                std::to_string(in_dim()));
  in_cache_ = h;
  out_cache_ = activate(apply_weights(h));
  has_forward_ = true;
  sparse_forward_ = false;
  return out_cache_;
}

Matrix DenseLayer::infer(const Matrix& h) const {
  if (h.cols() != in_dim())
    throw std::invalid_argument("dense infer: input width mismatch");
  return activate(apply_weights(h));
}

Matrix DenseLayer::infer_rows(std::span<const std::vector<int>> rows,
                              std::span<const double> scale) const {
  if (transpose_w_)
    throw std::logic_error("sparse forward is not defined for tied layers");
  const Eigen::Index batch = static_cast<Eigen::Index>(rows.size());
  Matrix z = Matrix::Zero(batch, out_dim());
  for (Eigen::Index i = 0; i < batch; ++i) {
    if (rows[i].empty()) continue;  // all-zero inputs stay zero, bias and all
    for (int j : rows[i]) z.row(i) += W_->value.row(j);
    if (!scale.empty()) z.row(i) *= scale[i];
    z.row(i) += b_->value.row(0);
  }
  return activate(z);
}

Matrix DenseLayer::forward_rows(std::span<const std::vector<int>> rows,
                                std::span<const double> scale) {
  out_cache_ = infer_rows(rows, scale);
  rows_cache_.assign(rows.begin(), rows.end());
  scale_cache_.assign(scale.begin(), scale.end());
  has_forward_ = true;
  sparse_forward_ = true;
  return out_cache_;
}

Matrix DenseLayer::grad_through_activation(const Matrix& upstream) const {
  if (act_ == Activation::Sigmoid)
    return upstream.array() * out_cache_.array() *
           (1.0 - out_cache_.array());
  return upstream;
}

Matrix DenseLayer::backward(const Matrix& upstream, bool accumulate_params) {
  if (!has_forward_ || sparse_forward_)
    throw std::logic_error("dense backward without a matching forward");
  const Matrix dz = grad_through_activation(upstream);
  if (accumulate_params) {
    if (transpose_w_)
      W_->grad += dz.transpose() * in_cache_;
    else
      W_->grad += in_cache_.transpose() * dz;
    b_->grad.row(0) += dz.colwise().sum();
  }
  return transpose_w_ ? (dz * W_->value).eval()
                      : (dz * W_->value.transpose()).eval();
}

void DenseLayer::backward_rows(const Matrix& upstream) {
  if (!has_forward_ || !sparse_forward_)
    throw std::logic_error("sparse backward without a matching forward");
  const Matrix dz = grad_through_activation(upstream);
  for (std::size_t i = 0; i < rows_cache_.size(); ++i) {
    if (rows_cache_[i].empty()) continue;
    const double s = scale_cache_.empty() ? 1.0 : scale_cache_[i];
    for (int j : rows_cache_[i])
      W_->grad.row(j) += s * dz.row(static_cast<Eigen::Index>(i));
    b_->grad.row(0) += dz.row(static_cast<Eigen::Index>(i));
  }
}

Vector ScalarBatchNorm::forward(const Vector& x, bool training) {
  training_cache_ = training;
  has_forward_ = true;
  if (training) {
    if (x.size() < 2)
      throw std::invalid_argument(
          "batch norm needs at least 2 samples in training mode");
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    inv_std_cache_ = 1.0 / std::sqrt(var + eps);
    y_cache_ = (x.array() - mu) * inv_std_cache_;
    running_mean = momentum * running_mean + (1.0 - momentum) * mu;
    running_var = momentum * running_var + (1.0 - momentum) * var;
    return y_cache_;
  }
  inv_std_cache_ = 1.0 / std::sqrt(running_var + eps);
  y_cache_ = (x.array() - running_mean) * inv_std_cache_;
  return y_cache_;
}

Vector ScalarBatchNorm::eval(const Vector& x) const {
  return (x.array() - running_mean) / std::sqrt(running_var + eps);
}

Vector ScalarBatchNorm::backward(const Vector& upstream) const {
  if (!has_forward_) throw std::logic_error("batch norm backward before forward");
  if (!training_cache_) return upstream * inv_std_cache_;
  const double mean_dy = upstream.mean();
  const double mean_dy_y = (upstream.array() * y_cache_.array()).mean();
  return inv_std_cache_ *
         (upstream.array() - mean_dy - y_cache_.array() * mean_dy_y);
}

void Adam::step(ParamStore& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.block(i).grad.allFinite())
      throw DivergenceError("non-finite gradient in block " +
                            params.block(i).name);
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ParamBlock& p = params.block(i);
    Matrix g = p.grad;
    if (cfg_.weight_decay != 0.0)
      g += cfg_.weight_decay * p.decay_mult * p.value;
    Slot& slot = slots_[p.name];
    if (slot.m.size() == 0) {
      slot.m = Matrix::Zero(g.rows(), g.cols());
      slot.v = Matrix::Zero(g.rows(), g.cols());
    }
    slot.m = cfg_.beta1 * slot.m + (1.0 - cfg_.beta1) * g;
    slot.v = cfg_.beta2 * slot.v.array().matrix() +
             (1.0 - cfg_.beta2) * g.array().square().matrix();
    const Matrix m_hat = slot.m / bc1;
    const Matrix v_hat = slot.v / bc2;
    p.value.array() -=
        cfg_.lr * m_hat.array() / (v_hat.array().sqrt() + cfg_.eps);
  }
}

void Adam::reset() {
  slots_.clear();
  step_ = 0;
}

Matrix softmax_logprob(const Matrix& logits) {
  if (!logits.allFinite())
    throw std::domain_error("softmax_logprob: non-finite logits");
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse =
        std::log((logits.row(i).array() - mx).exp().sum()) + mx;
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  ParamStore& params, double step) {
  GradCheckReport report;
  for (std::size_t bi = 0; bi < params.size(); ++bi) {
    ParamBlock& p = params.block(bi);
    GradCheckEntry entry;
    entry.block = p.name;
    for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
      for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
        const double saved = p.value(i, j);
        p.value(i, j) = saved + step;
        const double up = loss();
        p.value(i, j) = saved - step;
        const double down = loss();
        p.value(i, j) = saved;
        const double fd = (up - down) / (2.0 * step);
        const double an = p.grad(i, j);
        const double abs_err = std::abs(fd - an);
        const double rel_err =
            abs_err / std::max({std::abs(fd), std::abs(an), 1e-8});
        entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
        entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace vbae::tensor
