#include "pdlds/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pdlds/learning.hpp"
#include "pdlds/parallel.hpp"

namespace pdlds {

namespace {

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

// Solves a symmetric PSD system, adding diagonal jitter when it is singular.
Matrix psd_solve(const Matrix& a, const Matrix& b, bool* jittered) {
  const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a));
  const double low = es.eigenvalues().minCoeff(), high = es.eigenvalues().maxCoeff();
  Matrix sys = symmetrize(a);
  if (!(low > 1e-12 * std::max(high, 0.0)) || high <= 0.0) {
    sys.diagonal().array() += 1e-10 * scale;
    if (jittered) *jittered = true;
  }
  return sys.ldlt().solve(b);
}

}  // namespace

void BpdnDfConfig::validate() const {
  if (!(lambda0 >= 0.0) || !(lambda1 >= 0.0) || !(lambda2 >= 0.0))
    throw std::domain_error("BPDN-DF lambdas must be nonnegative");
  if (solver_iters < 1) throw std::invalid_argument("solver_iters must be at least 1");
  if (!(solver_tol > 0.0)) throw std::invalid_argument("solver_tol must be positive");
}

void DldsConfig::validate() const {
  bpdn.validate();
  if (num_operators < 1) throw std::invalid_argument("K must be at least 1");
  if (latent_dim < 1) throw std::invalid_argument("N must be at least 1");
  if (outer_iters < 1) throw std::invalid_argument("outer_iters must be at least 1");
  if (!(sigma_init > 0.0)) throw std::domain_error("sigma_init must be positive");
}

double bpdn_df_objective(const Params& params, const Vector& y, const Vector& x, const Vector& c,
                         const Vector& x_prev, const Vector& c_prev, const BpdnDfConfig& config) {
  const Vector pred = x_prev + compose_transition(params, c) * x_prev;
  return (y - params.obs_matrix * x - params.obs_offset).squaredNorm() +
         config.lambda0 * (x - pred).squaredNorm() + config.lambda1 * c.lpNorm<1>() +
         config.lambda2 * (c - c_prev).squaredNorm();
}

BpdnStepResult bpdn_df_step(const Params& params, const Vector& y, const Vector& x_prev,
                            const Vector& c_prev, const BpdnDfConfig& config) {
  config.validate();
  const Index n = params.latent_dim(), k = params.num_operators();
  require(y.size() == params.obs_dim(), "bpdn_df_step: observation length must equal M");
  require(x_prev.size() == n && c_prev.size() == k, "bpdn_df_step: previous estimates have wrong size");
  if (!x_prev.allFinite() || !c_prev.allFinite())
    throw std::domain_error("bpdn_df_step: previous estimates must be finite");
  const double l0 = config.lambda0, l1 = config.lambda1, l2 = config.lambda2;
  const Matrix& d = params.obs_matrix;

  Matrix design(n, k);
  for (Index j = 0; j < k; ++j) design.col(j) = params.dynamic_operators[j] * x_prev;
  Matrix h = d.transpose() * d;
  h.diagonal().array() += l0;
  Matrix rhs(n, 1 + k);
  rhs.col(0) = d.transpose() * (y - params.obs_offset) + l0 * x_prev;
  rhs.rightCols(k) = l0 * design;
  // x(c) = base + slope c
  const Matrix sol = psd_solve(h, rhs, nullptr);
  const Vector base = sol.col(0);
  const Matrix slope = sol.rightCols(k);

  auto x_of = [&](const Vector& c) -> Vector { return base + slope * c; };
  auto gradient = [&](const Vector& c) -> Vector {
    const Vector u = x_prev + design * c;
    return -2.0 * l0 * design.transpose() * (x_of(c) - u) + 2.0 * l2 * (c - c_prev);
  };
  auto violation = [&](const Vector& c) {
    const Vector g = gradient(c);
    double worst = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double v = c(j) != 0.0 ? std::abs(g(j) + l1 * (c(j) > 0.0 ? 1.0 : -1.0))
                                   : std::max(std::abs(g(j)) - l1, 0.0);
      worst = std::max(worst, v);
    }
    return worst;
  };

  // Hessian of the smooth part: 2 (l0 A^T (I - l0 H^-1) A + l2 I).
  Matrix hess = l0 * (design.transpose() * design - design.transpose() * slope);
  hess.diagonal().array() += l2;
  hess = 2.0 * symmetrize(hess);
  const double lip = Eigen::SelfAdjointEigenSolver<Matrix>(hess, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();

  BpdnStepResult out;
  Vector c = c_prev;
  if (!(lip > 1e-14)) {
    // Smooth part is flat in c: only the l1 term remains.
    if (l1 > 0.0) c.setZero();
    out.converged = true;
  } else {
    const double step = 1.0 / lip;
    Vector z = c, c_old = c;
    double momentum = 1.0;
    for (int it = 0; it < config.solver_iters; ++it) {
      out.iterations = it + 1;
      const Vector g = gradient(z);
      Vector next(k);
      for (Index j = 0; j < k; ++j) next(j) = soft_threshold(z(j) - step * g(j), l1 * step);
      // Restart the momentum when it points uphill.
      if ((z - next).dot(next - c_old) > 0.0) momentum = 1.0;
      const double m_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
      z = next + ((momentum - 1.0) / m_next) * (next - c_old);
      momentum = m_next;
      c_old = next;
      c = next;
      if (violation(c) < config.solver_tol) {
        out.converged = true;
        break;
      }
    }
  }
  out.c = c;
  out.x = x_of(c);
  out.violation = violation(c);
  out.objective = bpdn_df_objective(params, y, out.x, out.c, x_prev, c_prev, config);
  return out;
}

BpdnTrace bpdn_df_infer(const Params& params, const Matrix& obs, const BpdnDfConfig& config) {
  params.validate();
  const Index t_len = obs.rows(), n = params.latent_dim(), k = params.num_operators();
  require(t_len >= 1, "bpdn_df_infer: trial must have at least one step");
  require(obs.cols() == params.obs_dim(), "bpdn_df_infer: observation width must equal M");
  BpdnTrace trace;
  trace.states.resize(t_len, n);
  trace.step_coefs.resize(t_len, k);
  Vector x_prev = Vector::Zero(n), c_prev = Vector::Zero(k);
  for (Index t = 0; t < t_len; ++t) {
    const BpdnStepResult step = bpdn_df_step(params, obs.row(t).transpose(), x_prev, c_prev, config);
    trace.states.row(t) = step.x.transpose();
    trace.step_coefs.row(t) = step.c.transpose();
    trace.objective += step.objective;
    if (!step.converged) ++trace.unconverged_steps;
    x_prev = step.x;
    c_prev = step.c;
  }
  return trace;
}

Matrix transition_coefs(const BpdnTrace& trace) {
  const Index t_len = trace.step_coefs.rows();
  if (t_len < 2) return trace.step_coefs;
  Matrix out(t_len, trace.step_coefs.cols());
  out.topRows(t_len - 1) = trace.step_coefs.bottomRows(t_len - 1);
  out.row(t_len - 1) = out.row(t_len - 2);
  return out;
}

namespace {

// Least-squares operators given inferred (x, c): row i of every f_k solves
// one regression of the increments on the features c_t (x) x_{t-1}.
void update_operators(Params& params, const std::vector<BpdnTrace>& traces, int* singular) {
  const Index n = params.latent_dim(), k = params.num_operators(), p = n * k;
  Matrix gram = Matrix::Zero(p, p), cross = Matrix::Zero(p, n);
  Vector feature(p);
  for (const BpdnTrace& tr : traces) {
    for (Index t = 1; t < tr.states.rows(); ++t) {
      const Vector x = tr.states.row(t - 1).transpose();
      for (Index j = 0; j < k; ++j) feature.segment(j * n, n) = tr.step_coefs(t, j) * x;
      gram.noalias() += feature * feature.transpose();
      cross.noalias() += feature * (tr.states.row(t) - tr.states.row(t - 1));
    }
  }
  if (gram.diagonal().maxCoeff() <= 0.0) return;  // all coefficients zero: nothing to learn
  bool jittered = false;
  const Matrix theta = psd_solve(gram, cross, &jittered);
  if (jittered) ++*singular;
  for (Index j = 0; j < k; ++j) {
    Matrix f(n, n);
    for (Index i = 0; i < n; ++i) f.row(i) = theta.block(j * n, i, n, 1).transpose();
    const double norm = f.norm();
    if (norm > 0.0 && std::isfinite(norm)) params.dynamic_operators[j] = f / norm;
  }
}

void update_observation(Params& params, const std::vector<Matrix>& obs,
                        const std::vector<BpdnTrace>& traces, int* singular) {
  const Index n = params.latent_dim(), m = params.obs_dim();
  Matrix gram = Matrix::Zero(n + 1, n + 1), cross = Matrix::Zero(n + 1, m);
  Vector z(n + 1);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    for (Index t = 0; t < obs[i].rows(); ++t) {
      z.head(n) = traces[i].states.row(t).transpose();
      z(n) = 1.0;
      gram.noalias() += z * z.transpose();
      cross.noalias() += z * obs[i].row(t);
    }
  }
  bool jittered = false;
  const Matrix sol = psd_solve(gram, cross, &jittered);
  if (jittered) ++*singular;
  params.obs_matrix = sol.topRows(n).transpose();
  params.obs_offset = sol.row(n).transpose();
}

// Residual variances of the last pass so the parameters form a valid model.
void fill_noise(Params& params, const std::vector<Matrix>& obs, const std::vector<BpdnTrace>& traces) {
  const Index n = params.latent_dim(), m = params.obs_dim(), k = params.num_operators();
  Vector r_obs = Vector::Zero(m), r_dyn = Vector::Zero(n), r_coef = Vector::Zero(k);
  Vector first_sum = Vector::Zero(n), first_sq = Vector::Zero(n);
  double c_obs = 0.0, c_dyn = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const Matrix& x = traces[i].states;
    const Matrix c = transition_coefs(traces[i]);
    for (Index t = 0; t < x.rows(); ++t) {
      const Vector pred = params.obs_matrix * x.row(t).transpose() + params.obs_offset;
      r_obs += (obs[i].row(t).transpose() - pred).array().square().matrix();
      c_obs += 1.0;
    }
    for (Index t = 0; t + 1 < x.rows(); ++t) {
      const Vector l = x.row(t).transpose();
      const Vector pred = l + compose_transition(params, c.row(t)) * l;
      r_dyn += (x.row(t + 1).transpose() - pred).array().square().matrix();
      r_coef += (c.row(t + 1) - c.row(t)).array().square().matrix().transpose();
      c_dyn += 1.0;
    }
    first_sum += x.row(0).transpose();
    first_sq += x.row(0).transpose().array().square().matrix();
  }
  const double trials = static_cast<double>(obs.size());
  params.obs_noise_var = (r_obs / c_obs).cwiseMax(kVarianceFloor);
  params.state_noise_var = c_dyn > 0.0 ? Vector((r_dyn / c_dyn).cwiseMax(kVarianceFloor))
                                       : Vector::Constant(n, 1.0);
  params.coef_smooth_var = c_dyn > 0.0 ? Vector((r_coef / c_dyn).cwiseMax(kVarianceFloor))
                                       : Vector::Constant(k, 1.0);
  params.init_state_mean = first_sum / trials;
  const Vector spread = first_sq / trials - params.init_state_mean.array().square().matrix();
  params.init_state_var = spread.cwiseMax(1e-6);
}

}  // namespace

DldsResult dlds_learn(const std::vector<Matrix>& obs, const DldsConfig& config) {
  config.validate();
  require(!obs.empty(), "dlds_learn: dataset has no trials");
  FitConfig init_cfg;
  init_cfg.num_operators = config.num_operators;
  init_cfg.latent_dim = config.latent_dim;
  init_cfg.seed = config.seed;
  init_cfg.sigma_init = config.sigma_init;
  DldsResult result;
  result.params = initialize(obs, init_cfg).params;
  Params& params = result.params;
  for (Matrix& f : params.dynamic_operators) {
    const double norm = f.norm();
    if (norm > 0.0) f /= norm;
  }

  const int n_trials = static_cast<int>(obs.size());
  const int workers = config.threads > 0 ? config.threads : worker_count_from_env();
  auto infer_all = [&] {
    std::vector<BpdnTrace> traces(n_trials);
    parallel_for(n_trials, workers, [&](int i) { traces[i] = bpdn_df_infer(params, obs[i], config.bpdn); });
    double total = 0.0;
    for (const BpdnTrace& tr : traces) total += tr.objective;
    return std::make_pair(std::move(traces), total);
  };

  for (int it = 0; it < config.outer_iters; ++it) {
    auto [traces, total] = infer_all();
    result.objective_trace.push_back(total);
    update_operators(params, traces, &result.singular_solves);
    update_observation(params, obs, traces, &result.singular_solves);
  }
  result.traces = infer_all().first;
  fill_noise(params, obs, result.traces);
  return result;
}

}  // namespace pdlds
