#ifndef PDLDS_DATAGEN_HPP_
#define PDLDS_DATAGEN_HPP_

#include <array>
#include <cstdint>
#include <functional>

#include "pdlds/core.hpp"
#include "pdlds/dataset.hpp"

namespace pdlds {

/// Matrix exponential by scaling and squaring around a 13-term Taylor core.
Matrix expm(const Matrix& a);

// ---------------------------------------------------------------- NASCAR

struct NascarConfig {
  int n_trials = 30;
  Index length = 1000;
  Index obs_dim = 10;
  double process_noise_var = 1e-4;
  double speed_min = 0.1;
  double speed_max = 1.0;
  double obs_noise_var = 1e-2;
  double init_box = 2.0;  // initial state uniform on [-init_box, init_box]^2
  std::uint64_t seed = 0;

  void validate() const;
};

/// Region of a planar point: 1 right of x1 = 1, 2 left of x1 = -1, 3 the
/// upper straight (|x1| <= 1, x2 >= 0), 4 the lower straight.
int nascar_region(const Vector& x);
Matrix nascar_dynamics(int region);  // 2 x 2
Vector nascar_offset(int region);    // 2

/// One step x_next = expm(tau A_z) x + tau b_z + noise with z = region of x.
Vector nascar_step(const Vector& x, double tau, const Vector& noise);

Dataset nascar_generate(const NascarConfig& config);

// ---------------------------------------------------------------- Lorenz

struct LorenzConfig {
  int n_trials = 30;
  Index length = 1000;
  Index n_eval = 100;  // points per ramp
  double ramp_min = 0.25;
  double ramp_max = 1.5;
  Index obs_dim = 10;
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double obs_noise_var = 1.0;
  double burn_in = 5.0;        // integration time before recording
  double hysteresis = 0.5;     // |x1| below this keeps the previous lobe
  std::uint64_t seed = 0;

  void validate() const;
};

Vector lorenz_field(const Vector& x, double sigma, double rho, double beta);

/// Ramp evaluation times exp(linspace(0, tau, n)) - 1.
Vector ramp_times(double tau, Index n);

using OdeRhs = std::function<Vector(double, const Vector&)>;

struct OdeOptions {
  double abs_tol = 1e-9;
  double rel_tol = 1e-8;
  double first_step = 1e-3;
  long max_steps = 10000000;
};

/// Adaptive Dormand-Prince 5(4). Integrates through `times` (strictly
/// increasing, times[0] is the start) landing exactly on each of them and
/// returns one state per row. Throws NumericalError on step-size underflow
/// or step budget exhaustion.
Matrix dopri5(const OdeRhs& rhs, const Vector& x0, const Vector& times,
              const OdeOptions& options = {});

Dataset lorenz_generate(const LorenzConfig& config);

// ---------------------------------------------------------------- lift

struct Lift {
  Matrix obs;         // T x M
  Matrix obs_matrix;  // M x N
};

/// y_t = D x_t + noise with D_ij ~ N(0, 1) and isotropic Gaussian noise,
/// both from engines derived from `seed`.
Lift obs_lift(const Matrix& latents, Index m, double noise_var, std::uint64_t seed);

/// Same with a given emission matrix.
Matrix obs_lift(const Matrix& latents, const Matrix& obs_matrix, double noise_var,
                std::uint64_t seed);

}  // namespace pdlds

#endif  // PDLDS_DATAGEN_HPP_
