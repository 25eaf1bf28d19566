#include "pdlds/datagen.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "pdlds/parallel.hpp"

namespace pdlds {

namespace {

constexpr std::uint64_t kEmissionStream = 0x454d4954;
constexpr std::uint64_t kTrialStream = 0x5452494c;
constexpr std::uint64_t kNoiseStream = 0x4e4f4953;

}  // namespace

Matrix expm(const Matrix& a) {
  require(a.rows() == a.cols(), "expm: matrix must be square");
  const Index n = a.rows();
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix b = a / std::ldexp(1.0, squarings);
  Matrix term = Matrix::Identity(n, n), sum = Matrix::Identity(n, n);
  for (int k = 1; k <= 13; ++k) {
    term = term * b / static_cast<double>(k);
    sum += term;
  }
  for (int s = 0; s < squarings; ++s) sum = sum * sum;
  return sum;
}

// ---------------------------------------------------------------- NASCAR

void NascarConfig::validate() const {
  if (n_trials < 0) throw std::invalid_argument("nascar: n_trials must be nonnegative");
  if (length < 2) throw std::invalid_argument("nascar: length must be at least 2");
  if (obs_dim < 2) throw std::invalid_argument("nascar: obs_dim must be at least 2");
  if (!(process_noise_var >= 0.0) || !(obs_noise_var >= 0.0))
    throw std::invalid_argument("nascar: noise variances must be nonnegative");
  if (!(speed_min > 0.0) || !(speed_max >= speed_min) || !std::isfinite(speed_max))
    throw std::invalid_argument("nascar: speed range must lie in (0, inf)");
  if (!(init_box > 0.0)) throw std::invalid_argument("nascar: init_box must be positive");
}

int nascar_region(const Vector& x) {
  require(x.size() == 2, "nascar_region: state must be two-dimensional");
  if (x(0) > 1.0) return 1;
  if (x(0) < -1.0) return 2;
  return x(1) >= 0.0 ? 3 : 4;
}

Matrix nascar_dynamics(int region) {
  Matrix a = Matrix::Zero(2, 2);
  if (region == 1 || region == 2) {
    a(0, 1) = 0.1;
    a(1, 0) = -0.1;
  } else if (region != 3 && region != 4) {
    throw std::invalid_argument("nascar_dynamics: region must be 1..4");
  }
  return a;
}

Vector nascar_offset(int region) {
  switch (region) {
    case 1: return Vector{{0.0, 0.005}};
    case 2: return Vector{{0.0, -0.005}};
    case 3: return Vector{{0.1, 0.0}};
    case 4: return Vector{{-0.1, 0.0}};
    default: throw std::invalid_argument("nascar_offset: region must be 1..4");
  }
}

Vector nascar_step(const Vector& x, double tau, const Vector& noise) {
  const int z = nascar_region(x);
  return expm(tau * nascar_dynamics(z)) * x + tau * nascar_offset(z) + noise;
}

Dataset nascar_generate(const NascarConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.system = "nascar";
  ds.latent_dim_true = 2;
  ds.num_operators_true = 4;
  ds.generator = {{"length", static_cast<double>(cfg.length)},
                  {"obs_dim", static_cast<double>(cfg.obs_dim)},
                  {"process_noise_var", cfg.process_noise_var},
                  {"speed_min", cfg.speed_min},
                  {"speed_max", cfg.speed_max},
                  {"obs_noise_var", cfg.obs_noise_var},
                  {"init_box", cfg.init_box},
                  {"seed", static_cast<double>(cfg.seed)}};
  ds.trials.resize(cfg.n_trials);
  Rng emission_rng = make_rng(cfg.seed, kEmissionStream);
  const Matrix d = standard_normal(emission_rng, cfg.obs_dim, 2);

  parallel_for(cfg.n_trials, worker_count_from_env(), [&](int i) {
    Rng rng = make_rng(cfg.seed, kTrialStream, i);
    std::uniform_real_distribution<double> init(-cfg.init_box, cfg.init_box);
    std::uniform_real_distribution<double> speed(cfg.speed_min, cfg.speed_max);
    const double noise_sd = std::sqrt(cfg.process_noise_var);
    Truth truth;
    truth.latent.resize(cfg.length, 2);
    truth.labels.resize(cfg.length);
    truth.tau.resize(cfg.length);
    Vector x(2);
    x(0) = init(rng);
    x(1) = init(rng);
    double tau = speed(rng);
    int region = nascar_region(x);
    truth.segment_starts.push_back(0);
    truth.latent.row(0) = x.transpose();
    truth.labels(0) = region;
    truth.tau(0) = tau;
    for (Index t = 1; t < cfg.length; ++t) {
      const int z = nascar_region(x);
      if (z != region) {
        // Entered a new segment of the track.
        region = z;
        tau = speed(rng);
        truth.segment_starts.push_back(t);
      }
      x = nascar_step(x, tau, noise_sd * standard_normal(rng, 2));
      truth.latent.row(t) = x.transpose();
      truth.labels(t) = nascar_region(x);
      truth.tau(t) = tau;
    }
    for (Index t = 1; t < cfg.length; ++t)
      if (truth.labels(t) != truth.labels(t - 1)) ++truth.switch_count;
    Trial trial;
    trial.obs = obs_lift(truth.latent, d, cfg.obs_noise_var, derive_seed(cfg.seed, kNoiseStream, i));
    trial.truth = std::move(truth);
    ds.trials[i] = std::move(trial);
  });
  return ds;
}

// ---------------------------------------------------------------- Lorenz

void LorenzConfig::validate() const {
  if (n_trials < 0) throw std::invalid_argument("lorenz: n_trials must be nonnegative");
  if (length < 2) throw std::invalid_argument("lorenz: length must be at least 2");
  if (n_eval < 2) throw std::invalid_argument("lorenz: n_eval must be at least 2");
  if (obs_dim < 3) throw std::invalid_argument("lorenz: obs_dim must be at least 3");
  if (!(ramp_min > 0.0) || !(ramp_max >= ramp_min) || !std::isfinite(ramp_max))
    throw std::invalid_argument("lorenz: ramp range must lie in (0, inf)");
  if (!(sigma > 0.0) || !(rho > 0.0) || !(beta > 0.0))
    throw std::invalid_argument("lorenz: sigma, rho, beta must be positive");
  if (!(obs_noise_var >= 0.0)) throw std::invalid_argument("lorenz: obs_noise_var must be nonnegative");
  if (!(burn_in >= 0.0) || !(hysteresis >= 0.0))
    throw std::invalid_argument("lorenz: burn_in and hysteresis must be nonnegative");
}

Vector lorenz_field(const Vector& x, double sigma, double rho, double beta) {
  require(x.size() == 3, "lorenz_field: state must be three-dimensional");
  return Vector{{sigma * (x(1) - x(0)), x(0) * (rho - x(2)) - x(1), x(0) * x(1) - beta * x(2)}};
}

Vector ramp_times(double tau, Index n) {
  require(n >= 2, "ramp_times: need at least two points");
  return (Vector::LinSpaced(n, 0.0, tau).array().exp() - 1.0).matrix();
}

Matrix dopri5(const OdeRhs& rhs, const Vector& x0, const Vector& times, const OdeOptions& opt) {
  require(times.size() >= 1, "dopri5: need at least one time point");
  for (Index i = 1; i < times.size(); ++i)
    if (!(times(i) > times(i - 1))) throw std::invalid_argument("dopri5: times must be strictly increasing");
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  const Index n = x0.size();
  Matrix out(times.size(), n);
  out.row(0) = x0.transpose();
  Vector x = x0;
  double t = times(0);
  double h_next = opt.first_step;
  Vector k1 = rhs(t, x);
  long steps = 0;
  for (Index seg = 1; seg < times.size(); ++seg) {
    const double target = times(seg);
    while (t < target) {
      if (++steps > opt.max_steps) throw NumericalError("dopri5: step budget exhausted");
      const double remaining = target - t;
      const bool clipped = h_next >= remaining;
      const double h = clipped ? remaining : h_next;
      const Vector k2 = rhs(t + c2 * h, x + h * a21 * k1);
      const Vector k3 = rhs(t + c3 * h, x + h * (a31 * k1 + a32 * k2));
      const Vector k4 = rhs(t + c4 * h, x + h * (a41 * k1 + a42 * k2 + a43 * k3));
      const Vector k5 = rhs(t + c5 * h, x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
      const Vector k6 = rhs(t + h, x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
      const Vector next = x + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      const Vector k7 = rhs(t + h, next);
      const Vector err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
      const Vector scale =
          (opt.abs_tol + opt.rel_tol * x.cwiseAbs().cwiseMax(next.cwiseAbs()).array()).matrix();
      const double err_norm = std::sqrt(err.cwiseQuotient(scale).squaredNorm() / static_cast<double>(n));
      if (!std::isfinite(err_norm)) throw NumericalError("dopri5: non-finite state");
      const double factor =
          err_norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 5.0);
      if (err_norm <= 1.0) {
        t = clipped ? target : t + h;
        x = next;
        k1 = k7;
        // A step shortened only to land on a requested time says nothing
        // about the admissible size.
        h_next = clipped ? std::max(h_next, h * factor) : h * factor;
      } else {
        h_next = h * std::max(factor, 0.2);
        if (h_next < 1e-14 * std::max(1.0, std::abs(t)))
          throw NumericalError("dopri5: step size underflow");
      }
    }
    out.row(seg) = x.transpose();
  }
  return out;
}

Dataset lorenz_generate(const LorenzConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.system = "lorenz";
  ds.latent_dim_true = 3;
  ds.num_operators_true = 0;
  ds.generator = {{"length", static_cast<double>(cfg.length)},
                  {"n_eval", static_cast<double>(cfg.n_eval)},
                  {"ramp_min", cfg.ramp_min},
                  {"ramp_max", cfg.ramp_max},
                  {"obs_dim", static_cast<double>(cfg.obs_dim)},
                  {"sigma", cfg.sigma},
                  {"rho", cfg.rho},
                  {"beta", cfg.beta},
                  {"obs_noise_var", cfg.obs_noise_var},
                  {"burn_in", cfg.burn_in},
                  {"hysteresis", cfg.hysteresis},
                  {"seed", static_cast<double>(cfg.seed)}};
  ds.trials.resize(cfg.n_trials);
  Rng emission_rng = make_rng(cfg.seed, kEmissionStream);
  const Matrix d = standard_normal(emission_rng, cfg.obs_dim, 3);
  const OdeRhs rhs = [&](double, const Vector& x) { return lorenz_field(x, cfg.sigma, cfg.rho, cfg.beta); };

  parallel_for(cfg.n_trials, worker_count_from_env(), [&](int i) {
    Rng rng = make_rng(cfg.seed, kTrialStream, i);
    std::uniform_real_distribution<double> ux(-15.0, 15.0), uz(5.0, 40.0);
    std::uniform_real_distribution<double> ramp(cfg.ramp_min, cfg.ramp_max);
    Vector x{{ux(rng), ux(rng), uz(rng)}};
    if (cfg.burn_in > 0.0) x = dopri5(rhs, x, Vector{{0.0, cfg.burn_in}}).row(1).transpose();

    Truth truth;
    truth.latent.resize(cfg.length, 3);
    truth.tau.resize(cfg.length);
    Index filled = 0;
    int segment = 0;
    while (filled < cfg.length) {
      const double tau = ramp(rng);
      const Vector times = ramp_times(tau, cfg.n_eval);
      Matrix path;
      try {
        path = dopri5(rhs, x, times);
      } catch (const NumericalError& e) {
        throw NumericalError("lorenz: ramp segment " + std::to_string(segment) + ": " + e.what());
      }
      // Later ramps start at the previous ramp's last state; skip the repeat.
      const Index first = segment == 0 ? 0 : 1;
      const Index take = std::min<Index>(path.rows() - first, cfg.length - filled);
      truth.segment_starts.push_back(filled);
      truth.latent.middleRows(filled, take) = path.middleRows(first, take);
      truth.tau.segment(filled, take).setConstant(tau);
      filled += take;
      x = path.row(path.rows() - 1).transpose();
      ++segment;
    }

    truth.labels.resize(cfg.length);
    int lobe = truth.latent(0, 0) >= 0.0 ? 1 : 2;
    int lobe_switches = 0;
    for (Index t = 0; t < cfg.length; ++t) {
      const double x1 = truth.latent(t, 0);
      if (std::abs(x1) >= cfg.hysteresis) {
        const int next = x1 > 0.0 ? 1 : 2;
        if (t > 0 && next != lobe) ++lobe_switches;
        lobe = next;
      }
      truth.labels(t) = lobe;
    }
    truth.switch_count = lobe_switches + static_cast<int>(truth.segment_starts.size()) - 1;
    Trial trial;
    trial.obs = obs_lift(truth.latent, d, cfg.obs_noise_var, derive_seed(cfg.seed, kNoiseStream, i));
    trial.truth = std::move(truth);
    ds.trials[i] = std::move(trial);
  });
  return ds;
}

// ---------------------------------------------------------------- lift

Matrix obs_lift(const Matrix& latents, const Matrix& obs_matrix, double noise_var, std::uint64_t seed) {
  require(obs_matrix.cols() == latents.cols(), "obs_lift: emission matrix must be M x N");
  require(obs_matrix.rows() >= latents.cols(), "obs_lift: M must be at least N");
  if (!(noise_var >= 0.0)) throw std::invalid_argument("obs_lift: noise_var must be nonnegative");
  Matrix y = latents * obs_matrix.transpose();
  if (noise_var > 0.0) {
    Rng rng(seed);
    y += std::sqrt(noise_var) * standard_normal(rng, y.rows(), y.cols());
  }
  return y;
}

Lift obs_lift(const Matrix& latents, Index m, double noise_var, std::uint64_t seed) {
  require(m >= latents.cols(), "obs_lift: M must be at least N");
  Rng rng = make_rng(seed, kEmissionStream);
  Lift lift;
  lift.obs_matrix = standard_normal(rng, m, latents.cols());
  lift.obs = obs_lift(latents, lift.obs_matrix, noise_var, derive_seed(seed, kNoiseStream));
  return lift;
}

}  // namespace pdlds
