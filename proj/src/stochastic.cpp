#include "vbae/stochastic.hpp"

#include <cmath>
#include <stdexcept>

namespace vbae::stoch {

Vector sample_gaussian(const GaussianPosterior& post, const Vector& eps) {
  return post.mu.array() + eps.array() * post.log_sigma.array().exp();
}

double kl_gaussian_vs_prior(const Vector& mu, const Vector& log_sigma,
                            double lambda) {
  if (lambda <= 0.0) throw std::invalid_argument("prior precision must be > 0");
  // KL(N(mu,s^2) || N(0,1/lambda)) per dim:
  //   -0.5*ln(lambda) - ln(s) + lambda*(s^2 + mu^2)/2 - 0.5
  const auto s2 = (2.0 * log_sigma.array()).exp();
  return (-0.5 * std::log(lambda) - log_sigma.array() +
          0.5 * lambda * (s2 + mu.array().square()) - 0.5)
      .sum();
}

double kl_gaussian_vs_prior(const GaussianPosterior& post, double lambda) {
  return kl_gaussian_vs_prior(post.mu, post.log_sigma, lambda);
}

double sample_concrete(const HardChannelPosterior& post, double g1, double g2) {
  if (post.tau <= 0.0) throw std::invalid_argument("temperature must be > 0");
  const double a = clamp_prob(post.alpha);
  return sigmoid((logit(a) + g1 - g2) / post.tau);
}

double kl_bernoulli(double alpha, double prior_p) {
  return alpha * std::log(alpha / prior_p) +
         (1.0 - alpha) * std::log((1.0 - alpha) / (1.0 - prior_p));
}

LogisticNormalParams beta_to_logistic_normal(double alpha,
                                             double sigma_target) {
  return {0.5 * logit(clamp_prob(alpha)), sigma_target};
}

double sample_logistic_normal(const SoftChannelPosterior& post, double eps1,
                              double eps2) {
  const double mu1 = 0.5 * logit(clamp_prob(post.alpha));
  return sigmoid(2.0 * mu1 + post.sigma_logit * (eps1 - eps2));
}

double kl_soft_channel(const SoftChannelPosterior& q,
                       const SoftChannelPosterior& p) {
  if (q.sigma_logit <= 0.0 || p.sigma_logit <= 0.0)
    throw std::invalid_argument("sigma_logit must be > 0");
  const double mq = logit(clamp_prob(q.alpha));
  const double mp = logit(clamp_prob(p.alpha));
  const double vq = 2.0 * q.sigma_logit * q.sigma_logit;
  const double vp = 2.0 * p.sigma_logit * p.sigma_logit;
  return 0.5 * std::log(vp / vq) + (vq + (mq - mp) * (mq - mp)) / (2.0 * vp) -
         0.5;
}

}  // namespace vbae::stoch
