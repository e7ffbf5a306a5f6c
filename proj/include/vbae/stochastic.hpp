#pragma once

#include "vbae/linalg.hpp"

namespace vbae::stoch {

// Per-user diagonal-Gaussian posterior over a latent embedding.
struct GaussianPosterior {
  Vector mu;
  Vector log_sigma;
};

// Bernoulli channel trained through its Concrete relaxation.
struct HardChannelPosterior {
  double alpha = 0.5;  // gate probability, strictly in (0,1)
  double tau = 1.0;    // relaxation temperature, > 0
};

// Beta-mean channel trained through a logistic-normal with fixed logit-space
// spread. `alpha` is the gate mean, recovered exactly as sigmoid(2*mu1).
struct SoftChannelPosterior {
  double alpha = 0.5;
  double sigma_logit = 0.1;
};

inline double clamp_prob(double p, double lo = 1e-6) {
  return std::min(std::max(p, lo), 1.0 - lo);
}

// z = mu + eps .* sigma
Vector sample_gaussian(const GaussianPosterior& post, const Vector& eps);

// KL( N(mu, diag sigma^2) || N(0, lambda^{-1} I) ), summed over dimensions.
double kl_gaussian_vs_prior(const GaussianPosterior& post, double lambda);
double kl_gaussian_vs_prior(const Vector& mu, const Vector& log_sigma,
                            double lambda);

// d = sigmoid((logit(alpha) + g1 - g2) / tau), g ~ Gumbel(0,1).
double sample_concrete(const HardChannelPosterior& post, double g1, double g2);

// KL( Bernoulli(alpha) || Bernoulli(prior_p) ).
double kl_bernoulli(double alpha, double prior_p);

// Mean parameter of the logit-space Gaussian equivalent to a two-class
// Dirichlet with mean alpha; the spread stays at the configured constant.
// Returns (mu1, sigma1) with mu1 = logit(alpha) / 2.
struct LogisticNormalParams {
  double mu1;
  double sigma1;
};
LogisticNormalParams beta_to_logistic_normal(double alpha, double sigma_target);

// d = sigmoid(2*mu1 + sigma1 * (eps1 - eps2)), eps ~ N(0,1).
double sample_logistic_normal(const SoftChannelPosterior& post, double eps1,
                              double eps2);

// KL between the logit-space Gaussians of two soft channels. logit(d) is
// distributed N(logit(alpha), 2*sigma_logit^2), and sigmoid is a fixed
// bijection, so this KL is exact for the family.
double kl_soft_channel(const SoftChannelPosterior& q,
                       const SoftChannelPosterior& p);

}  // namespace vbae::stoch
