#ifndef PDLDS_COEF_INFERENCE_HPP_
#define PDLDS_COEF_INFERENCE_HPP_

#include <vector>

#include "pdlds/core.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

/// How the SBL loop moves gamma given E[c^2]: the mode of
/// IG(xi + 1/2, xi prev^2 + E[c^2]/2), or the reciprocal of its mean
/// precision 1/E[1/gamma], which is how gamma enters a Gaussian update.
enum class GammaStep { map, mean, harmonic };

/// One time step of the sparse regression
///   target = design * c + e,  e ~ N(0, diag(noise_var)),
///   c_k ~ N(0, gamma_k),      gamma_k ~ IG(xi, xi prev_k^2).
struct SparseRegressionProblem {
  Matrix design;      // N x K, column k = f_k l_t
  Vector target;      // N, l_{t+1} - l_t
  Vector noise_var;   // N
  Vector prev_coefs;  // K, c_{t-1}
  double xi = 1.0;
  // No previous estimate exists: the hyperprior is dropped and the update
  // becomes the plain evidence step gamma_k <- E[c_k^2].
  bool cold_start = false;
  GammaStep gamma_step = GammaStep::map;

  void validate() const;
};

/// Build the regression for transition t -> t+1 of a fast-latent path.
SparseRegressionProblem make_sparse_problem(const Params& params, const Matrix& fast, Index t,
                                            const Vector& prev_coefs, double xi);

struct SblResult {
  Vector coef_mean;  // K
  Vector coef_var;   // K, diagonal of the posterior covariance
  Vector gamma;      // K, prior variances at the fixed point
  int iterations = 0;
  bool converged = false;
};

/// Evidence maximization with the previous-step-centered hyperprior.
/// Starts from gamma = 1 and alternates the Gaussian posterior of c with
/// gamma_k <- (E[c_k^2] + 2 xi prev_k^2) / (2 xi + 3) (GammaStep::map), the
/// same numerator over 2 xi - 1 (GammaStep::mean, needs xi > 1/2) or over
/// 2 xi + 1 (GammaStep::harmonic).
SblResult sbl_df_init(const SparseRegressionProblem& problem, int max_iter = 50, double tol = 1e-6,
                      double jitter = 1e-9);

/// Objective over a T x K coefficient array with fast latent path `fast`:
///   sum_t -1/2 |l_{t+1} - (I + F(c_t)) l_t|^2_{Sigma_x^-1}
///   + sum_{t>=1} [ -c_t^2 / (2 gamma_t) - (c_t - c_{t-1})^2 / (2 sigma^2) ]
///   + sum_{t<T-1, active} [ 2 xi log|c_t| - xi c_t^2 / gamma_{t+1} ]
/// Inactive entries are held at zero; their log term is a constant and is
/// left out. xi = 0 drops the hyperprior part entirely.
double coef_objective(const Params& params, const Matrix& fast, const Matrix& coefs,
                      const Matrix& gamma_hat, const BoolMatrix& active, double xi);

/// Gradient of coef_objective; zero on inactive entries. Throws
/// NumericalError naming (t, k) on a non-finite entry.
Matrix coef_objective_gradient(const Params& params, const Matrix& fast, const Matrix& coefs,
                               const Matrix& gamma_hat, const BoolMatrix& active, double xi);

/// Negative second derivative of the coefficient objective at every entry;
/// inactive entries sit at zero where the log term is floored and contributes
/// no curvature. Its inverse is the variance of the fully factorized
/// Gaussian that best matches the objective locally.
Matrix coef_curvature(const Params& params, const Matrix& fast, const Matrix& coefs,
                      const Matrix& gamma_hat, const BoolMatrix& active, double xi);

struct RefineResult {
  Matrix coefs;
  int iterations = 0;
  bool converged = false;
};

/// Ascent on coef_objective over the active entries only. Each iteration
/// takes a Newton direction (the objective is concave on each sign orthant)
/// with a backtracking step that starts at `step`, never lets an active
/// entry change sign when xi > 0, and stops once the Newton decrement falls
/// below tolerance or `iters` is reached. Inactive entries stay exactly 0.
RefineResult refine_coefs(const Params& params, const Matrix& fast, const Matrix& coef_init,
                          const Matrix& gamma_hat, const BoolMatrix& active, double xi,
                          double step = 1.0, int iters = 50);

inline Matrix refine_coefs_sgd(const Params& params, const Matrix& fast, const Matrix& coef_init,
                               const Matrix& gamma_hat, const BoolMatrix& active, double xi,
                               double step = 1.0, int iters = 50) {
  return refine_coefs(params, fast, coef_init, gamma_hat, active, xi, step, iters).coefs;
}

/// q(gamma) = IG(xi + n/2, max(xi prev^2 + 1/2 sum_i (sample_i - mean)^2, beta_floor)),
/// elementwise over T x K arrays. `prev_coefs` is already aligned so that
/// row t holds c_{t-1}.
GammaPosterior update_gamma(double xi, const Matrix& prev_coefs, const Matrix& coef_mean,
                            const std::vector<Matrix>& coef_samples);

/// Exact coordinate-ascent q(gamma) for Gaussian q(c) = N(means, variances):
/// IG(xi + 1/2, max(xi E[c_{t-1}^2] + E[c_t^2] / 2, beta_floor)). Row 0 has
/// no predecessor and uses E[c_{-1}^2] = 0.
GammaPosterior expected_gamma_update(double xi, const Matrix& means, const Matrix& variances);

struct SupportResult {
  BoolMatrix mask;
  Matrix coefs;  // zeroed where the mask is false
};

/// mask = |c| > eta (strict).
SupportResult support_mask(const Matrix& coef_mean, double eta);

}  // namespace pdlds

#endif  // PDLDS_COEF_INFERENCE_HPP_
