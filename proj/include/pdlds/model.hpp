#ifndef PDLDS_MODEL_HPP_
#define PDLDS_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pdlds/core.hpp"

namespace pdlds {

/// Learned quantities of the decomposed model
///
///   y_t     = D x_t + d + e_y,          e_y ~ N(0, diag(obs_noise_var))
///   x_t     = l_t + b_t
///   l_{t+1} = (I + F_t) l_t + e_l,      e_l ~ N(0, diag(state_noise_var))
///   F_t     = sum_k f_k c_{t,k}
///
/// Row t of a coefficient array drives the transition t -> t+1.
template <typename Scalar>
struct ModelParameters {
  std::vector<Mat<Scalar>> dynamic_operators;  // K matrices, N x N
  Mat<Scalar> obs_matrix;                      // M x N
  Vec<Scalar> obs_offset;                      // M
  Vec<Scalar> obs_noise_var;                   // M, diagonal
  Vec<Scalar> state_noise_var;                 // N, diagonal
  Vec<Scalar> coef_smooth_var;                 // K, one per operator
  Vec<Scalar> init_state_mean;                 // N
  Vec<Scalar> init_state_var;                  // N, diagonal

  Index num_operators() const { return static_cast<Index>(dynamic_operators.size()); }
  Index latent_dim() const { return obs_matrix.cols(); }
  Index obs_dim() const { return obs_matrix.rows(); }

  void validate() const {
    const Index k = num_operators(), n = latent_dim(), m = obs_dim();
    require(k >= 1, "model needs at least one dynamic operator");
    require(n >= 1, "latent dimension must be positive");
    require(m >= n, "observation dimension must be at least the latent dimension");
    for (const auto& f : dynamic_operators) {
      require(f.rows() == n && f.cols() == n, "dynamic operator must be N x N");
      require(f.allFinite(), "dynamic operator has non-finite entries");
    }
    require(obs_offset.size() == m, "obs_offset length must equal M");
    require(obs_noise_var.size() == m, "obs_noise_var length must equal M");
    require(state_noise_var.size() == n, "state_noise_var length must equal N");
    require(coef_smooth_var.size() == k, "coef_smooth_var length must equal K");
    require(init_state_mean.size() == n, "init_state_mean length must equal N");
    require(init_state_var.size() == n, "init_state_var length must equal N");
    auto positive = [](const Vec<Scalar>& v) {
      return v.allFinite() && (v.array() > Scalar(0)).all();
    };
    require(positive(obs_noise_var) && positive(state_noise_var) && positive(coef_smooth_var) &&
                positive(init_state_var),
            "all variances must be strictly positive and finite");
  }
};

using Params = ModelParameters<double>;

/// Smoothed Gaussian marginals of the fast latent plus deterministic offsets.
template <typename Scalar>
struct StatePosterior {
  Mat<Scalar> smooth_mean;             // T x N, E[l_t]
  std::vector<Mat<Scalar>> smooth_var;  // T covariances, N x N
  std::vector<Mat<Scalar>> pair_cov;    // T-1, Cov(l_t, l_{t+1})
  Mat<Scalar> offsets;                 // T x N
  Mat<Scalar> reconstructed_state;     // smooth_mean + offsets
  Scalar log_likelihood = Scalar(0);   // from the forward pass

  Index length() const { return smooth_mean.rows(); }
};

/// q(c_{t,k}) = N(means, variances). Entries outside the active support
/// keep their mean at exactly zero.
struct CoefficientPosterior {
  Matrix means;      // T x K
  Matrix variances;  // T x K
  BoolMatrix active;  // T x K
};

/// One inverse-gamma IG(shape, scale) per (t, k).
struct GammaPosterior {
  Matrix shape;  // T x K
  Matrix scale;  // T x K

  /// scale / (shape - 1); throws when any shape <= 1.
  Matrix mean() const;
  /// E[1 / gamma] = shape / scale.
  Matrix inverse_mean() const;
};

/// Evaluated factors of the joint density, summed over time.
struct LogJointTerms {
  double initial = 0.0;      // log N(x_1; mu_1, Sigma_1)
  double observation = 0.0;  // sum_t log N(y_t; D x_t + d, Sigma_y)
  double dynamics = 0.0;     // sum_t log N(l_{t+1}; (I + F_t) l_t, Sigma_x)
  double coef_smooth = 0.0;  // sum log N(c_{t+1,k}; c_{t,k}, sigma_k^2)
  double coef_sparse = 0.0;  // sum log N(c_{t+1,k}; 0, gamma_{t+1,k})
  double hyperprior = 0.0;   // sum log IG(gamma_{t+1,k}; xi, xi c_{t,k}^2)

  double total() const {
    return initial + observation + dynamics + coef_smooth + coef_sparse + hyperprior;
  }
};

struct ElboEstimate {
  double value = 0.0;
  double std_error = 0.0;  // infinite when n_samples == 1
  double sample_sd = 0.0;
  int n_samples = 0;
};

/// F = sum_k f_k coefs_k.
template <typename Scalar, typename Derived>
Mat<Scalar> compose_transition(const ModelParameters<Scalar>& params,
                               const Eigen::MatrixBase<Derived>& coefs) {
  const Index k = params.num_operators();
  if (coefs.size() != k) throw DimensionError("compose_transition: coefficient length must equal K");
  const Index n = params.latent_dim();
  Mat<Scalar> f = Mat<Scalar>::Zero(n, n);
  for (Index j = 0; j < k; ++j) f += params.dynamic_operators[j] * coefs(j);
  return f;
}

inline double log_normal_scalar(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (std::log(2.0 * M_PI * var) + r * r / var);
}

/// log N(x; mean, diag(var)).
double log_normal_diag(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const Eigen::Ref<const Vector>& var);

/// log IG(gamma; shape, scale) with the scale floored at kBetaFloor.
double log_inverse_gamma(double gamma, double shape, double scale);

/// Factor-by-factor log p(x, y, c, gamma | theta). `fast` and `offsets`
/// are T x N with x = fast + offsets; the dynamics factor acts on the fast
/// part. Gamma row 0 is unused (no transition generates it).
LogJointTerms log_joint_terms(const Params& params, const Matrix& fast, const Matrix& offsets,
                              const Matrix& coefs, const Matrix& gammas, const Matrix& obs,
                              double xi);

double log_joint(const Params& params, const Matrix& fast, const Matrix& offsets,
                 const Matrix& coefs, const Matrix& gammas, const Matrix& obs, double xi);

/// Monte-Carlo estimate of E_q[log p - log q] from n_samples draws using an
/// engine seeded by `seed`. Each draw samples the fast latent path and the
/// coefficients inside the hyperprior's log-scale term; all other coefficient
/// and gamma expectations are exact. Offsets contribute no entropy.
ElboEstimate elbo(const Params& params, const StatePosterior<double>& q_state,
                  const CoefficientPosterior& q_coef, const GammaPosterior& q_gamma,
                  const Matrix& obs, double xi, int n_samples, std::uint64_t seed);

/// Draws one joint sample of the fast latent path from the Markov-chain
/// smoothed posterior and returns it with its log density under q.
struct StatePathSampler {
  explicit StatePathSampler(const StatePosterior<double>& q);
  Matrix sample(Rng& rng, double* log_density) const;

 private:
  Vector first_mean_;
  Matrix first_chol_;
  std::vector<Matrix> gain_;  // regression of l_{t+1} on l_t
  std::vector<Matrix> chol_;  // conditional covariance factors
  const StatePosterior<double>* q_;
};

}  // namespace pdlds

#endif  // PDLDS_MODEL_HPP_
