#ifndef PDLDS_BASELINE_HPP_
#define PDLDS_BASELINE_HPP_

#include <cstdint>
#include <vector>

#include "pdlds/core.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

/// Weights of the sequential point-estimate objective solved at every step
///   |y_t - D x_t - d|^2 + lambda0 |x_t - (I + F(c_t)) x_{t-1}|^2
///   + lambda1 |c_t|_1 + lambda2 |c_t - c_{t-1}|^2.
struct BpdnDfConfig {
  double lambda0 = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  int solver_iters = 10000;
  double solver_tol = 1e-9;

  void validate() const;
};

struct BpdnStepResult {
  Vector x;  // N
  Vector c;  // K
  double objective = 0.0;
  double violation = 0.0;  // max subgradient optimality violation in c
  int iterations = 0;
  bool converged = false;
};

/// One step. x is eliminated in closed form (ridge normal equations) and c
/// is solved by accelerated proximal gradient with soft-thresholding on the
/// resulting smooth part, whose design has columns f_k x_prev.
BpdnStepResult bpdn_df_step(const Params& params, const Vector& y, const Vector& x_prev,
                            const Vector& c_prev, const BpdnDfConfig& config);

/// Value of the step objective at (x, c).
double bpdn_df_objective(const Params& params, const Vector& y, const Vector& x, const Vector& c,
                         const Vector& x_prev, const Vector& c_prev, const BpdnDfConfig& config);

struct BpdnTrace {
  Matrix states;      // T x N
  Matrix step_coefs;  // T x K, row t solved at step t; drives t-1 -> t
  double objective = 0.0;
  int unconverged_steps = 0;
};

/// Forward pass over one trial starting from x_{-1} = 0, c_{-1} = 0.
BpdnTrace bpdn_df_infer(const Params& params, const Matrix& obs, const BpdnDfConfig& config);

/// Coefficients re-indexed so that row t drives t -> t+1 (the convention of
/// the metrics module); the last row repeats its predecessor.
Matrix transition_coefs(const BpdnTrace& trace);

struct DldsConfig {
  BpdnDfConfig bpdn;
  int num_operators = 4;
  int latent_dim = 2;
  int outer_iters = 20;
  std::uint64_t seed = 0;
  double sigma_init = 0.1;
  int threads = 0;  // 0 reads PDLDS_THREADS

  void validate() const;
};

struct DldsResult {
  Params params;
  std::vector<BpdnTrace> traces;        // inference with the final parameters
  std::vector<double> objective_trace;  // summed objective after each inference pass
  int singular_solves = 0;              // least-squares systems that needed jitter
};

/// Alternates inference over all trials with least-squares updates of the
/// operators and of (D, d). Operators are rescaled to unit Frobenius norm
/// after each update. Noise variances of the returned parameters are the
/// residual variances of the final pass, so the checkpoint is a valid model.
DldsResult dlds_learn(const std::vector<Matrix>& obs, const DldsConfig& config);

}  // namespace pdlds

#endif  // PDLDS_BASELINE_HPP_
