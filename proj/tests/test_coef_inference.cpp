#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>

#include "oracles.hpp"
#include "pdlds/coef_inference.hpp"
#include "test_util.hpp"

using namespace pdlds;
using testutil::max_abs;

namespace {

SparseRegressionProblem scalar_problem(double xi, double prev, GammaStep step) {
  SparseRegressionProblem p;
  p.design = Matrix::Ones(1, 1);
  p.target = Vector::Ones(1);
  p.noise_var = Vector::Ones(1);
  p.prev_coefs = Vector::Constant(1, prev);
  p.xi = xi;
  p.gamma_step = step;
  return p;
}

struct CoefCase {
  Params params;
  Matrix fast, coefs, gamma_hat;
  BoolMatrix active;
};

// Random coefficient problem with entries bounded away from zero on the
// active set and exact zeros elsewhere.
CoefCase random_coef_case(std::uint64_t seed, Index k = 3, Index n = 2, Index t_len = 7) {
  Rng rng = make_rng(seed);
  CoefCase c;
  c.params = testutil::random_params(rng, k, n, n + 1, 0.4);
  c.fast = standard_normal(rng, t_len, n);
  c.coefs = standard_normal(rng, t_len, k);
  c.active = BoolMatrix::Constant(t_len, k, true);
  std::bernoulli_distribution drop(0.25);
  for (Index t = 0; t < t_len; ++t)
    for (Index j = 0; j < k; ++j) {
      const double v = c.coefs(t, j);
      c.coefs(t, j) = (v >= 0 ? 1.0 : -1.0) * (0.3 + std::abs(v));
      if (drop(rng)) {
        c.active(t, j) = false;
        c.coefs(t, j) = 0.0;
      }
    }
  c.gamma_hat = oracle::random_positive(rng, t_len * k, 0.2, 2.0).reshaped(t_len, k);
  return c;
}

}  // namespace

TEST_CASE("sbl with no evidence shrinks to zero") {
  SparseRegressionProblem p;
  Rng rng = make_rng(1);
  p.design = standard_normal(rng, 3, 4);
  p.target = Vector::Zero(3);
  p.noise_var = Vector::Ones(3);
  p.prev_coefs = Vector::Zero(4);
  p.xi = 1.0;
  const SblResult r = sbl_df_init(p, 200, 1e-12);
  CHECK(r.coef_mean.norm() < 1e-9);
  CHECK(r.gamma.maxCoeff() < 1e-6);
}

TEST_CASE("sbl scalar problem matches the fixed-point oracle") {
  const double xi = 1e-8;
  const SblResult r = sbl_df_init(scalar_problem(xi, 0.0, GammaStep::map), 1000, 1e-14);
  // gamma <- (m^2 + v) / (2 xi + 3), m and v from the scalar posterior.
  double gamma = 1.0, mean = 0.0;
  for (int it = 0; it < 100000; ++it) {
    const double prec = 1.0 + 1.0 / gamma + 1e-9;
    const double v = 1.0 / prec;
    mean = v;
    const double next = std::max((mean * mean + v) / (2.0 * xi + 3.0), kGammaFloor);
    const bool done = std::abs(next - gamma) < 1e-16;
    gamma = next;
    if (done) break;
  }
  mean = 1.0 / (1.0 + 1.0 / gamma + 1e-9);
  CHECK(std::abs(r.gamma(0) - gamma) < 1e-12);
  CHECK(std::abs(r.coef_mean(0) - mean) < 1e-12);
  CHECK(std::abs(r.coef_mean(0) - gamma / (gamma + 1.0)) < 1e-12);
}

TEST_CASE("sbl with a heavy hyperprior pins gamma to the previous coefficient") {
  const SblResult r = sbl_df_init(scalar_problem(1e6, 1.0, GammaStep::map), 200, 1e-12);
  CHECK(std::abs(r.gamma(0) - 1.0) < 1e-5);
  const SblResult m = sbl_df_init(scalar_problem(1e6, 1.0, GammaStep::mean), 200, 1e-12);
  CHECK(std::abs(m.gamma(0) - 1.0) < 1e-5);
}

TEST_CASE("sbl shrinkage grows with xi when the previous coefficients are zero") {
  Rng rng = make_rng(2);
  SparseRegressionProblem p;
  p.design = standard_normal(rng, 3, 4);
  p.target = standard_normal(rng, 3);
  p.noise_var = Vector::Constant(3, 0.5);
  p.prev_coefs = Vector::Zero(4);
  for (GammaStep step : {GammaStep::map, GammaStep::harmonic}) {
    p.gamma_step = step;
    double last = std::numeric_limits<double>::infinity();
    for (double xi : {0.01, 0.1, 1.0, 10.0}) {
      p.xi = xi;
      const double norm = sbl_df_init(p, 200, 1e-10).coef_mean.norm();
      CHECK(norm <= last + 1e-12);
      last = norm;
    }
  }
}

TEST_CASE("sbl rejects bad settings") {
  auto p = scalar_problem(1.0, 0.0, GammaStep::map);
  CHECK_THROWS(sbl_df_init(p, 0));
  CHECK_THROWS(sbl_df_init(p, 10, 0.0));
  p.xi = 0.0;
  CHECK_THROWS(sbl_df_init(p));
  p = scalar_problem(1.0, 0.0, GammaStep::map);
  p.noise_var(0) = -1.0;
  CHECK_THROWS(sbl_df_init(p));
}

TEST_CASE("make_sparse_problem builds the regression of one transition") {
  Rng rng = make_rng(3);
  Params params = testutil::random_params(rng, 3, 2, 4, 1.0);
  const Matrix fast = standard_normal(rng, 5, 2);
  const Vector prev = standard_normal(rng, 3);
  const auto p = make_sparse_problem(params, fast, 2, prev, 0.7);
  const Vector l = fast.row(2).transpose();
  for (Index j = 0; j < 3; ++j) CHECK(max_abs(p.design.col(j) - params.dynamic_operators[j] * l) < 1e-15);
  CHECK(max_abs(p.target - (fast.row(3) - fast.row(2)).transpose()) == 0.0);
  CHECK(p.noise_var == params.state_noise_var);
  CHECK(p.prev_coefs == prev);
  CHECK(p.xi == 0.7);
  CHECK_THROWS(make_sparse_problem(params, fast, 4, prev, 0.7));
}

TEST_CASE("refine leaves an all-inactive problem at zero") {
  CoefCase c = random_coef_case(4);
  c.active.setConstant(false);
  c.coefs.setZero();
  const Matrix out = refine_coefs_sgd(c.params, c.fast, c.coefs, c.gamma_hat, c.active, 1.0);
  CHECK(max_abs(out) == 0.0);
}

TEST_CASE("refine reaches the closed-form quadratic maximizer") {
  // T = 3, N = K = 1, only c_1 active and the hyperprior disabled:
  // maximize -(dl_1 - a c)^2 / (2q) - c^2 / (2 gamma_1) - c^2 / sigma^2.
  Params p = testutil::unit_params(1, 1, 1);
  p.dynamic_operators[0](0, 0) = 0.8;
  p.state_noise_var(0) = 0.3;
  p.coef_smooth_var(0) = 2.0;
  Matrix fast(3, 1);
  fast << 0.5, 1.5, 2.1;
  Matrix gamma_hat = Matrix::Constant(3, 1, 0.7);
  BoolMatrix active = BoolMatrix::Constant(3, 1, false);
  active(1, 0) = true;
  Matrix init = Matrix::Zero(3, 1);
  init(1, 0) = 0.1;
  const double a = 0.8 * 1.5, dl = 0.6, q = 0.3;
  const double expected = (a * dl / q) / (a * a / q + 1.0 / 0.7 + 2.0 / 2.0);
  const Matrix out = refine_coefs_sgd(p, fast, init, gamma_hat, active, 0.0, 1.0, 200);
  CHECK(std::abs(out(1, 0) - expected) < 1e-6);
  CHECK(out(0, 0) == 0.0);
  CHECK(out(2, 0) == 0.0);
}

TEST_CASE("coefficient objective gradient matches finite differences") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    CoefCase c = random_coef_case(seed);
    const double xi = 1.3;
    const Matrix grad = coef_objective_gradient(c.params, c.fast, c.coefs, c.gamma_hat, c.active, xi);
    std::vector<std::pair<Index, Index>> idx;
    for (Index t = 0; t < c.coefs.rows(); ++t)
      for (Index j = 0; j < c.coefs.cols(); ++j)
        if (c.active(t, j)) idx.push_back({t, j});
        else CHECK(grad(t, j) == 0.0);
    Vector x(idx.size()), analytic(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x(i) = c.coefs(idx[i].first, idx[i].second);
      analytic(i) = grad(idx[i].first, idx[i].second);
    }
    auto f = [&](const Vector& v) {
      Matrix m = c.coefs;
      for (std::size_t i = 0; i < idx.size(); ++i) m(idx[i].first, idx[i].second) = v(i);
      return coef_objective(c.params, c.fast, m, c.gamma_hat, c.active, xi);
    };
    CHECK(oracle::relative_error(analytic, oracle::finite_difference(f, x, 1e-5)) < 1e-4);
  }
}

TEST_CASE("coefficient curvature matches finite differences of the gradient") {
  CoefCase c = random_coef_case(20);
  const double xi = 0.9, h = 1e-5;
  const Matrix curv = coef_curvature(c.params, c.fast, c.coefs, c.gamma_hat, c.active, xi);
  for (Index t = 0; t < c.coefs.rows(); ++t)
    for (Index j = 0; j < c.coefs.cols(); ++j) {
      if (!c.active(t, j)) continue;
      Matrix up = c.coefs, down = c.coefs;
      up(t, j) += h;
      down(t, j) -= h;
      const double fd = -(coef_objective_gradient(c.params, c.fast, up, c.gamma_hat, c.active, xi)(t, j) -
                          coef_objective_gradient(c.params, c.fast, down, c.gamma_hat, c.active, xi)(t, j)) /
                        (2.0 * h);
      CHECK(curv(t, j) == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("refine never activates an inactive coefficient and ascends") {
  for (std::uint64_t seed = 30; seed < 35; ++seed) {
    CoefCase c = random_coef_case(seed, 4, 3, 12);
    const double xi = 0.8;
    const auto r = refine_coefs(c.params, c.fast, c.coefs, c.gamma_hat, c.active, xi);
    for (Index t = 0; t < c.coefs.rows(); ++t)
      for (Index j = 0; j < c.coefs.cols(); ++j) {
        if (!c.active(t, j)) {
          CHECK(std::bit_cast<std::uint64_t>(r.coefs(t, j)) == std::bit_cast<std::uint64_t>(0.0));
        } else if (t + 1 < c.coefs.rows()) {
          // The log barrier keeps entries with a successor on their orthant.
          CHECK(std::signbit(r.coefs(t, j)) == std::signbit(c.coefs(t, j)));
        }
      }
    CHECK(coef_objective(c.params, c.fast, r.coefs, c.gamma_hat, c.active, xi) >=
          coef_objective(c.params, c.fast, c.coefs, c.gamma_hat, c.active, xi));
  }
}

TEST_CASE("update_gamma substitutes into the inverse-gamma update") {
  Matrix prev = Matrix::Constant(1, 1, 1.0), mean = Matrix::Constant(1, 1, 0.5);
  std::vector<Matrix> samples{Matrix::Constant(1, 1, 0.7)};
  GammaPosterior g = update_gamma(2.0, prev, mean, samples);
  CHECK(g.shape(0, 0) == doctest::Approx(2.5));
  CHECK(g.scale(0, 0) == doctest::Approx(2.02).epsilon(1e-12));
  g = update_gamma(2.0, Matrix::Zero(1, 1), mean, {mean});
  CHECK(g.shape(0, 0) == doctest::Approx(2.5));
  CHECK(g.scale(0, 0) == kBetaFloor);
}

TEST_CASE("inverse-gamma mean matches draws from the returned posterior") {
  Matrix prev(1, 3), mean(1, 3);
  prev << 0.5, 1.0, 2.0;
  mean << 0.1, -0.4, 0.9;
  std::vector<Matrix> samples{Matrix(mean.array() + 0.3), Matrix(mean.array() - 0.6)};
  const GammaPosterior g = update_gamma(4.0, prev, mean, samples);
  const Matrix analytic = g.mean();
  Rng rng = make_rng(5);
  const int n = 200000;
  for (Index j = 0; j < 3; ++j) {
    std::gamma_distribution<double> precision(g.shape(0, j), 1.0 / g.scale(0, j));
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = 1.0 / precision(rng);
      s += v;
      s2 += v * v;
    }
    const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
    CHECK(std::abs(m - analytic(0, j)) < 3.0 * se);
  }
  CHECK(max_abs(g.inverse_mean() - Matrix(g.shape.array() / g.scale.array())) == 0.0);
  GammaPosterior low;
  low.shape = Matrix::Constant(1, 1, 0.9);
  low.scale = Matrix::Constant(1, 1, 1.0);
  CHECK_THROWS(low.mean());
}

TEST_CASE("inverse-gamma update is conjugate") {
  Rng rng = make_rng(6);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int rep = 0; rep < 20; ++rep) {
    const double xi = u(rng), prev = u(rng) - 1.5, center = u(rng);
    std::vector<Matrix> samples;
    const int n = 1 + rep % 3;
    for (int i = 0; i < n; ++i) samples.push_back(Matrix::Constant(1, 1, center + u(rng) - 1.6));
    const GammaPosterior g =
        update_gamma(xi, Matrix::Constant(1, 1, prev), Matrix::Constant(1, 1, center), samples);
    std::vector<double> log_ratio;
    for (int i = 0; i < 50; ++i) {
      const double gamma = 0.05 + 0.1 * i;
      double joint = log_inverse_gamma(gamma, xi, xi * prev * prev);
      for (const auto& s : samples) joint += log_normal_scalar(s(0, 0), center, gamma);
      log_ratio.push_back(log_inverse_gamma(gamma, g.shape(0, 0), g.scale(0, 0)) - joint);
    }
    double worst = 0.0;
    for (double r : log_ratio) worst = std::max(worst, std::abs(std::expm1(r - log_ratio.front())));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("expected gamma update uses second moments") {
  Matrix means(3, 2), vars(3, 2);
  means << 0.5, 0.0, -1.0, 2.0, 0.3, 0.0;
  vars << 0.1, 0.2, 0.3, 0.05, 0.2, 0.0;
  const double xi = 1.5;
  const GammaPosterior g = expected_gamma_update(xi, means, vars);
  for (Index t = 0; t < 3; ++t)
    for (Index j = 0; j < 2; ++j) {
      const double prev = t == 0 ? 0.0 : means(t - 1, j) * means(t - 1, j) + vars(t - 1, j);
      const double cur = means(t, j) * means(t, j) + vars(t, j);
      CHECK(g.shape(t, j) == doctest::Approx(xi + 0.5));
      CHECK(g.scale(t, j) == doctest::Approx(std::max(xi * prev + 0.5 * cur, kBetaFloor)).epsilon(1e-14));
    }
}

TEST_CASE("support_mask uses a strict threshold") {
  CHECK(!support_mask(Matrix::Zero(2, 3), 1e-4).mask.any());
  Matrix c(1, 3);
  c << 1e-4, 2e-4, -5e-5;
  const SupportResult r = support_mask(c, 1e-4);
  CHECK(!r.mask(0, 0));
  CHECK(r.mask(0, 1));
  CHECK(!r.mask(0, 2));
  CHECK(r.coefs(0, 0) == 0.0);
  CHECK(r.coefs(0, 1) == 2e-4);
  CHECK(r.coefs(0, 2) == 0.0);
}
