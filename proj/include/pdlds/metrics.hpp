#ifndef PDLDS_METRICS_HPP_
#define PDLDS_METRICS_HPP_

#include <string>
#include <vector>

#include "pdlds/core.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

/// Least-squares map U with truth_t ~ U est_t pooled over all trials,
/// U = (sum x xhat^T)(sum xhat xhat^T + jitter)^-1. `degenerate` reports a
/// rank-deficient estimate (the solve is jittered either way).
Matrix align_latents(const std::vector<Matrix>& truth, const std::vector<Matrix>& est,
                     bool* degenerate = nullptr);

/// Mean over t of |(x_{t+1} - x_t) - U (xhat_{t+1} - xhat_t)|^2, averaged
/// over trials.
double mse_dynamics(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, const Matrix& u);

/// Same with explicit predicted speeds: row t of speeds[i] is the model's
/// one-step prediction of xhat_{t+1} - xhat_t (T-1 rows).
double mse_speed(const std::vector<Matrix>& truth, const std::vector<Matrix>& speeds, const Matrix& u);

/// Mean over t of |x_t - U xhat_t|^2, averaged over trials.
double mse_state(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, const Matrix& u);

enum class SwitchMode { dominant, active_set, discrete };

SwitchMode switch_mode_from_string(const std::string& name);

/// Event at t when the dominant operator (ties to the lowest index) or the
/// active set {k : |c_tk| > eta} differs from t-1. Entry 0 is never an event.
std::vector<bool> switch_events(const Matrix& coefs, SwitchMode mode, double eta = 1e-4);

/// Event at t when the label differs from t-1.
std::vector<bool> switch_events(const IntVector& labels);

/// Number of events divided by the sequence length.
double switch_rate(const std::vector<bool>& events);

/// Mean over trials of (true_rate - est_rate)^2.
double mse_switch(const std::vector<double>& true_rates, const std::vector<double>& est_rates);

/// Pieces of a k-step R^2 so that several trials can be pooled.
struct R2Parts {
  double sse = 0.0;  // sum |y_{t+k} - yhat_{t+k}|^2
  double sst = 0.0;  // sum |y_{t+k} - ybar|^2, ybar the trial mean
  Index count = 0;

  double r2() const { return 1.0 - sse / sst; }
  R2Parts& operator+=(const R2Parts& o) {
    sse += o.sse;
    sst += o.sst;
    count += o.count;
    return *this;
  }
};

/// Rolls the fast latent k steps from every origin t with
/// l <- (I + F(coefs_{t+j})) l, adds the offset at the landing time and
/// projects through (D, d). Row t of `coefs` drives t -> t+1. With
/// `freeze_coefs` the coefficients stay at row t for the whole rollout.
/// Throws when k >= T or k < 1.
R2Parts multistep_r2_parts(const Params& params, const Matrix& obs, const Matrix& fast,
                           const Matrix& offsets, const Matrix& coefs, Index k,
                           bool freeze_coefs = false);

/// R^2 from arbitrary predictions: pred row j is the prediction of obs row
/// first + j.
R2Parts r2_parts(const Matrix& obs, const Matrix& pred, Index first);

/// Ridge fit of x_next - x_t = F x_t + b with the penalty on F only and b
/// unpenalized, solved by centering. A single transition centers to zero,
/// so F = 0 and b = x_next - x_t.
struct TransitionFit {
  Matrix transition;  // F
  Vector offset;      // b
};
TransitionFit ridge_transition_fit(const Matrix& x_t, const Matrix& x_next, double lambda);
TransitionFit ridge_transition_fit(const Vector& x_t, const Vector& x_next, double lambda);

}  // namespace pdlds

#endif  // PDLDS_METRICS_HPP_
