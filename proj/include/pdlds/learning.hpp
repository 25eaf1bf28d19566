#ifndef PDLDS_LEARNING_HPP_
#define PDLDS_LEARNING_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pdlds/coef_inference.hpp"
#include "pdlds/core.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

enum class CoefSource { sample, mean };

/// Variance attached to q(c): the inverse curvature of the coefficient
/// objective (mean_field) or 1/E[1/gamma] under q(gamma) (gamma_hat).
enum class CoefVariance { mean_field, gamma_hat };

/// q(gamma) step of the outer loop: the sample-based update around the
/// coefficient mean, or the exact expectation under Gaussian q(c).
enum class GammaUpdate { sampled, expected };

struct FitConfig {
  int num_operators = 4;  // K
  int latent_dim = 2;     // N
  int window = 0;         // S; 0 means S = T for every trial
  double xi = 1.0;
  double eta = 1e-4;
  int n_samples = 1;  // coefficient draws per gamma update
  int max_outer_iters = 100;
  double elbo_tol = 1e-5;
  int converge_patience = 3;
  double mstep_step = 1.0;
  int mstep_iters = 20;
  std::uint64_t seed = 0;
  double sigma_init = 0.1;
  int elbo_samples = 16;
  CoefSource state_coef_source = CoefSource::sample;
  CoefVariance coef_variance = CoefVariance::mean_field;
  bool sequential_sweep = false;
  GammaStep sbl_gamma_step = GammaStep::mean;
  GammaUpdate gamma_update = GammaUpdate::expected;
  int sbl_max_iter = 50;
  double sbl_tol = 1e-6;
  double refine_step = 1.0;
  int refine_iters = 50;
  int threads = 0;  // 0 reads PDLDS_THREADS

  /// Throws std::invalid_argument / std::domain_error on a bad setting.
  void validate() const;
  int window_for(Index t_len) const { return window <= 0 ? static_cast<int>(t_len) : window; }
  int workers() const;
};

std::string to_string(CoefSource source);
CoefSource coef_source_from_string(const std::string& name);
std::string to_string(CoefVariance variance);
CoefVariance coef_variance_from_string(const std::string& name);
std::string to_string(GammaStep step);
GammaStep gamma_step_from_string(const std::string& name);
std::string to_string(GammaUpdate update);
GammaUpdate gamma_update_from_string(const std::string& name);

/// Variational factors for one trial.
struct TrialPosterior {
  StatePosterior<double> state;
  CoefficientPosterior coef;
  GammaPosterior gamma;
};

struct IterationReport {
  int iteration = 0;
  double elbo = 0.0;
  double elbo_se = 0.0;
  double active_fraction = 0.0;
  double relative_change = 0.0;
};

using IterationCallback = std::function<void(const IterationReport&)>;

struct FitResult {
  Params params;
  std::vector<TrialPosterior> trials;
  std::vector<double> elbo_trace;
  std::vector<double> elbo_se;  // standard error of each trace entry
  bool converged = false;
  int iterations_run = 0;
};

struct Initialization {
  Params params;
  std::vector<Matrix> states;  // T x N per trial, D^+ (y_t - d)
};

/// PCA initialization: d = observation mean, D = top-N principal directions,
/// x_t = D^T (y_t - d), operators i.i.d. N(0, sigma_init^2), noise variances
/// from the residuals. Throws NumericalError when fewer than N directions
/// carry variance.
Initialization initialize(const std::vector<Matrix>& obs, const FitConfig& config);

/// Variational EM. Per outer iteration: offsets, coefficient draw, smoother,
/// SBL initialization, coefficient refinement, gamma update, M-step, ELBO.
FitResult fit(const std::vector<Matrix>& obs, const FitConfig& config,
              const IterationCallback& on_iteration = {});

/// E-step loop only, with `params` frozen.
FitResult infer_on_heldout(const Params& params, const std::vector<Matrix>& obs,
                           const FitConfig& config, const IterationCallback& on_iteration = {});

/// Rescales every operator to unit Frobenius norm and moves the factor into
/// the coefficient posteriors, the gamma scales and the smoothness variances,
/// so F(c) is unchanged. Operators with zero norm are left alone.
void normalize_operators(Params& params, std::vector<TrialPosterior>& posteriors);

/// Expected sufficient statistics of the parameter objective under q,
/// summed over trials.
struct MStepStats {
  double obs_count = 0.0;  // sum of T
  Matrix sxx;              // N x N, sum E[x x^T]
  Vector sx;               // N
  Matrix syx;              // M x N
  Vector sy;               // M
  Vector syy;              // M, sum y^2
  double transition_count = 0.0;
  Matrix feature_gram;   // KN x KN, sum E[(c (x) l)(c (x) l)^T]
  Matrix feature_cross;  // KN x N, column i = sum E[(c (x) l) dl_i]
  Vector sdd;            // N, sum E[dl_i^2]
  Vector scc;            // K, sum E[(c_{t+1} - c_t)^2]
};

MStepStats mstep_stats(const std::vector<Matrix>& obs, const std::vector<TrialPosterior>& q,
                       Index num_operators, int workers = 1);

/// Packed parameter vector: operators (column-major, k-major), D, d,
/// log obs_noise_var, log state_noise_var, log coef_smooth_var.
/// init_state_mean and init_state_var are not part of the M-step.
Vector pack_params(const Params& params);
Params unpack_params(const Vector& packed, const Params& layout);

/// Expected log joint terms that depend on the packed parameters.
double mstep_objective(const Params& params, const MStepStats& stats);
/// Gradient of mstep_objective with respect to pack_params(params).
Vector mstep_gradient(const Params& params, const MStepStats& stats);

struct MStepOptions {
  double step = 1.0;
  int iters = 20;
  // Blocks left at their current values.
  bool fix_operators = false;
  bool fix_obs_matrix = false;
  bool fix_obs_offset = false;
  bool fix_obs_noise = false;
  bool fix_state_noise = false;
  bool fix_coef_smooth = false;
};

/// Fisher-preconditioned gradient ascent on mstep_objective with
/// backtracking; variances move in log space and are floored at
/// kVarianceFloor.
Params m_step(const Params& params, const MStepStats& stats, const MStepOptions& options);

Params m_step(const Params& params, const std::vector<Matrix>& obs,
              const std::vector<TrialPosterior>& q, const FitConfig& config);

}  // namespace pdlds

#endif  // PDLDS_LEARNING_HPP_
