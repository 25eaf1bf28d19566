#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>

#include "oracles.hpp"
#include "pdlds/baseline.hpp"
#include "test_util.hpp"

using namespace pdlds;
using testutil::max_abs;

namespace {

Matrix rotation(double angle, double radius) {
  Matrix a(2, 2);
  a << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return radius * a;
}

Params scalar_params(Rng& rng) {
  Params p = testutil::unit_params(2, 1, 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  p.dynamic_operators[0](0, 0) = u(rng);
  p.dynamic_operators[1](0, 0) = u(rng);
  p.obs_matrix(0, 0) = 0.5 + std::abs(u(rng));
  p.obs_offset(0) = 0.3 * u(rng);
  return p;
}

struct LinearTrial {
  Params params;
  Matrix obs;
};

// Noise-free observations of x_{t+1} = A x_t through a full-rank D.
LinearTrial noise_free_trial(Index t_len) {
  Rng rng = make_rng(3);
  LinearTrial out;
  out.params = testutil::unit_params(1, 2, 4);
  out.params.dynamic_operators[0] = rotation(0.2, 0.98) - Matrix::Identity(2, 2);
  out.params.obs_matrix = standard_normal(rng, 4, 2);
  out.params.obs_offset = standard_normal(rng, 4);
  out.obs.resize(t_len, 4);
  Vector x(2);
  x << 2.0, -1.0;
  for (Index t = 0; t < t_len; ++t) {
    out.obs.row(t) = (out.params.obs_matrix * x + out.params.obs_offset).transpose();
    x = (Matrix::Identity(2, 2) + out.params.dynamic_operators[0]) * x;
  }
  return out;
}

}  // namespace

TEST_CASE("bpdn step with a huge l1 weight keeps coefficients at zero") {
  Rng rng = make_rng(1);
  Params p = testutil::random_params(rng, 3, 2, 4, 0.5);
  const Vector y = standard_normal(rng, 4), x_prev = standard_normal(rng, 2), c_prev = standard_normal(rng, 3);
  BpdnDfConfig cfg;
  cfg.lambda1 = 1e6;
  const BpdnStepResult r = bpdn_df_step(p, y, x_prev, c_prev, cfg);
  CHECK(max_abs(r.c) == 0.0);
  const Matrix& d = p.obs_matrix;
  const Vector ridge = (d.transpose() * d + cfg.lambda0 * Matrix::Identity(2, 2))
                           .ldlt()
                           .solve(d.transpose() * (y - p.obs_offset) + cfg.lambda0 * x_prev);
  CHECK(max_abs(r.x - ridge) < 1e-10);
}

TEST_CASE("bpdn step without penalties is least squares on the observation") {
  Rng rng = make_rng(2);
  Params p = testutil::random_params(rng, 2, 2, 5, 0.5);
  const Vector y = standard_normal(rng, 5), x_prev = standard_normal(rng, 2), c_prev = standard_normal(rng, 2);
  BpdnDfConfig cfg;
  cfg.lambda0 = cfg.lambda1 = cfg.lambda2 = 0.0;
  const BpdnStepResult r = bpdn_df_step(p, y, x_prev, c_prev, cfg);
  const Vector ls = p.obs_matrix.colPivHouseholderQr().solve(y - p.obs_offset);
  CHECK(max_abs(r.x - ls) < 1e-10);
}

TEST_CASE("bpdn step matches the exhaustive grid oracle") {
  Rng rng = make_rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0), lam(0.05, 1.0);
  int checked = 0;
  while (checked < 3) {
    Params p = scalar_params(rng);
    const Vector y = Vector::Constant(1, u(rng)), x_prev = Vector::Constant(1, 1.5 * u(rng));
    const Vector c_prev = Vector::Constant(2, 0.0) + 0.5 * standard_normal(rng, 2);
    BpdnDfConfig cfg;
    cfg.lambda0 = lam(rng);
    cfg.lambda1 = lam(rng);
    cfg.lambda2 = lam(rng);
    const BpdnStepResult r = bpdn_df_step(p, y, x_prev, c_prev, cfg);
    if (r.x.cwiseAbs().maxCoeff() > 2.9 || r.c.cwiseAbs().maxCoeff() > 2.9) continue;
    auto f = [&](double x, double c1, double c2) {
      return bpdn_df_objective(p, y, Vector::Constant(1, x), Vector(Eigen::Vector2d(c1, c2)), x_prev, c_prev, cfg);
    };
    const oracle::GridResult g = oracle::bpdn_grid(f, 0.05);
    CHECK(r.converged);
    CHECK(r.objective <= g.value + 1e-12);
    CHECK(g.value - r.objective < 1e-4);
    ++checked;
  }
}

TEST_CASE("bpdn step satisfies the subgradient optimality condition") {
  Rng rng = make_rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    Params p = testutil::random_params(rng, 4, 3, 6, 0.5);
    const Vector y = standard_normal(rng, 6), x_prev = standard_normal(rng, 3), c_prev = standard_normal(rng, 4);
    BpdnDfConfig cfg;
    cfg.lambda1 = 0.2;
    const BpdnStepResult r = bpdn_df_step(p, y, x_prev, c_prev, cfg);
    CHECK(r.converged);
    CHECK(r.violation < cfg.solver_tol);
    // Independent check of the optimality condition on c with x at its
    // closed form: perturbing any coordinate cannot lower the objective.
    for (Index j = 0; j < 4; ++j)
      for (double h : {-1e-5, 1e-5}) {
        Vector c = r.c;
        c(j) += h;
        const Matrix& d = p.obs_matrix;
        const Vector drift = x_prev + compose_transition(p, c) * x_prev;
        const Vector x = (d.transpose() * d + cfg.lambda0 * Matrix::Identity(3, 3))
                             .ldlt()
                             .solve(d.transpose() * (y - p.obs_offset) + cfg.lambda0 * drift);
        CHECK(bpdn_df_objective(p, y, x, c, x_prev, c_prev, cfg) >= r.objective - 1e-12);
      }
  }
}

TEST_CASE("bpdn inference with one step is a penalized least squares solve") {
  Rng rng = make_rng(6);
  Params p = testutil::random_params(rng, 2, 2, 3, 0.5);
  const Matrix obs = standard_normal(rng, 1, 3);
  BpdnDfConfig cfg;
  const BpdnTrace tr = bpdn_df_infer(p, obs, cfg);
  const Matrix& d = p.obs_matrix;
  const Vector x = (d.transpose() * d + cfg.lambda0 * Matrix::Identity(2, 2))
                       .ldlt()
                       .solve(d.transpose() * (obs.row(0).transpose() - p.obs_offset));
  CHECK(max_abs(tr.states.row(0).transpose() - x) < 1e-10);
  CHECK(max_abs(tr.step_coefs) == 0.0);
}

TEST_CASE("bpdn inference recovers a single linear system") {
  const LinearTrial trial = noise_free_trial(40);
  BpdnDfConfig cfg;
  cfg.lambda0 = 1.0;
  cfg.lambda1 = 1e-3;
  cfg.lambda2 = 1e-3;
  const BpdnTrace tr = bpdn_df_infer(trial.params, trial.obs, cfg);
  for (Index t = 2; t < 40; ++t) CHECK(std::abs(tr.step_coefs(t, 0) - 1.0) < 0.05);
  const Matrix shifted = transition_coefs(tr);
  for (Index t = 0; t + 1 < 40; ++t) CHECK(shifted(t, 0) == tr.step_coefs(t + 1, 0));
  CHECK(shifted(39, 0) == shifted(38, 0));
  const BpdnTrace again = bpdn_df_infer(trial.params, trial.obs, cfg);
  CHECK(again.states == tr.states);
  CHECK(again.step_coefs == tr.step_coefs);
  CHECK(again.objective == tr.objective);
}

TEST_CASE("dlds learning on a single linear system") {
  std::vector<Matrix> obs;
  Rng rng = make_rng(7);
  const Matrix a = rotation(0.2, 0.99);
  const Matrix d = standard_normal(rng, 5, 2);
  for (int i = 0; i < 3; ++i) {
    Matrix y(80, 5);
    Vector x = 2.0 * standard_normal(rng, 2);
    for (Index t = 0; t < 80; ++t) {
      y.row(t) = (d * x).transpose();
      x = a * x;
    }
    obs.push_back(y);
  }
  DldsConfig cfg;
  cfg.num_operators = 1;
  cfg.latent_dim = 2;
  cfg.outer_iters = 30;
  cfg.bpdn.lambda0 = 1.0;
  cfg.bpdn.lambda1 = 1e-3;
  cfg.bpdn.lambda2 = 1e-3;
  cfg.seed = 1;
  cfg.threads = 1;
  const DldsResult r = dlds_learn(obs, cfg);
  CHECK(r.objective_trace.size() == 30);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
    CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] * (1.0 + 1e-9));
  // Median coefficient sets the effective transition.
  std::vector<double> cs;
  for (const auto& tr : r.traces)
    for (Index t = 2; t < tr.step_coefs.rows(); ++t) cs.push_back(tr.step_coefs(t, 0));
  std::nth_element(cs.begin(), cs.begin() + cs.size() / 2, cs.end());
  const Matrix learned = Matrix::Identity(2, 2) + cs[cs.size() / 2] * r.params.dynamic_operators[0];
  auto sorted_eigs = [](const Matrix& m) {
    Eigen::EigenSolver<Matrix> es(m);
    std::vector<std::complex<double>> v(es.eigenvalues().data(), es.eigenvalues().data() + 2);
    std::sort(v.begin(), v.end(), [](auto x, auto y) { return x.imag() < y.imag(); });
    return v;
  };
  const auto got = sorted_eigs(learned), want = sorted_eigs(a);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-2);
  for (const auto& f : r.params.dynamic_operators) CHECK(f.norm() == doctest::Approx(1.0));
  CHECK_NOTHROW(r.params.validate());
}

TEST_CASE("dlds learning with one outer iteration and determinism") {
  Rng rng = make_rng(8);
  std::vector<Matrix> obs{standard_normal(rng, 30, 4), standard_normal(rng, 30, 4)};
  DldsConfig cfg;
  cfg.outer_iters = 1;
  cfg.threads = 1;
  const DldsResult one = dlds_learn(obs, cfg);
  CHECK(one.objective_trace.size() == 1);
  CHECK(one.traces.size() == 2);
  cfg.outer_iters = 3;
  const DldsResult a = dlds_learn(obs, cfg);
  cfg.threads = 4;
  const DldsResult b = dlds_learn(obs, cfg);
  CHECK(a.objective_trace == b.objective_trace);
  CHECK(a.params.obs_matrix == b.params.obs_matrix);
  cfg.outer_iters = 0;
  CHECK_THROWS(dlds_learn(obs, cfg));
}
