#include "pdlds/coef_inference.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <limits>
#include <string>

namespace pdlds {

void SparseRegressionProblem::validate() const {
  const Index n = design.rows(), k = design.cols();
  require(target.size() == n, "sparse problem: target length must equal design rows");
  require(noise_var.size() == n, "sparse problem: noise_var length must equal design rows");
  require(prev_coefs.size() == k, "sparse problem: prev_coefs length must equal design columns");
  require(design.allFinite(), "sparse problem: design has non-finite entries");
  if (!((noise_var.array() > 0.0).all() && noise_var.allFinite()))
    throw std::domain_error("sparse problem: noise variances must be positive");
  if (!(xi > 0.0)) throw std::domain_error("sparse problem: xi must be positive");
}

SparseRegressionProblem make_sparse_problem(const Params& params, const Matrix& fast, Index t,
                                            const Vector& prev_coefs, double xi) {
  require(t >= 0 && t + 1 < fast.rows(), "make_sparse_problem: t out of range");
  const Index k = params.num_operators();
  SparseRegressionProblem p;
  const Vector l = fast.row(t).transpose();
  p.design.resize(l.size(), k);
  for (Index j = 0; j < k; ++j) p.design.col(j) = params.dynamic_operators[j] * l;
  p.target = (fast.row(t + 1) - fast.row(t)).transpose();
  p.noise_var = params.state_noise_var;
  p.prev_coefs = prev_coefs;
  p.xi = xi;
  return p;
}

SblResult sbl_df_init(const SparseRegressionProblem& problem, int max_iter, double tol,
                      double jitter) {
  if (max_iter < 1) throw std::invalid_argument("sbl_df_init: max_iter must be at least 1");
  if (!(tol > 0.0)) throw std::invalid_argument("sbl_df_init: tol must be positive");
  problem.validate();
  const Index k = problem.design.cols();
  const Vector w = problem.noise_var.cwiseInverse();
  const Matrix gram = problem.design.transpose() * w.asDiagonal() * problem.design;
  const Vector rhs = problem.design.transpose() * w.cwiseProduct(problem.target);
  Vector prior_center = 2.0 * problem.xi * problem.prev_coefs.array().square().matrix();
  double denom = 2.0 * problem.xi + 1.0;
  if (problem.gamma_step == GammaStep::map) denom = 2.0 * problem.xi + 3.0;
  if (problem.gamma_step == GammaStep::mean) denom = 2.0 * problem.xi - 1.0;
  if (problem.cold_start) {
    prior_center.setZero();
    denom = 1.0;
  }

  SblResult out;
  out.gamma = Vector::Ones(k);
  for (int it = 0; it < max_iter; ++it) {
    Matrix precision = gram;
    precision.diagonal() += out.gamma.cwiseInverse();
    precision.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success)
      throw NumericalError("sbl_df_init: posterior precision is singular");
    Matrix cov = llt.solve(Matrix::Identity(k, k));
    out.coef_mean = cov * rhs;
    out.coef_var = cov.diagonal();
    Vector second_moment = out.coef_mean.array().square().matrix() + out.coef_var;
    Vector next = ((second_moment + prior_center) / denom).cwiseMax(kGammaFloor);
    const double change = (next - out.gamma).cwiseAbs().maxCoeff();
    out.gamma = next;
    out.iterations = it + 1;
    if (change < tol) {
      out.converged = true;
      break;
    }
  }
  // Posterior under the final gamma so that mean, variance and gamma agree.
  Matrix precision = gram;
  precision.diagonal() += out.gamma.cwiseInverse();
  precision.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) throw NumericalError("sbl_df_init: posterior precision is singular");
  Matrix cov = llt.solve(Matrix::Identity(k, k));
  out.coef_mean = cov * rhs;
  out.coef_var = cov.diagonal();
  return out;
}

namespace {

void check_coef_inputs(const Params& params, const Matrix& fast, const Matrix& coefs,
                       const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  params.validate();
  const Index t_len = fast.rows(), k = params.num_operators();
  require(fast.cols() == params.latent_dim(), "coef objective: fast latent must be T x N");
  require(coefs.rows() == t_len && coefs.cols() == k, "coef objective: coefficients must be T x K");
  require(gamma_hat.rows() == t_len && gamma_hat.cols() == k, "coef objective: gamma must be T x K");
  require(active.rows() == t_len && active.cols() == k, "coef objective: mask must be T x K");
  if (!(xi >= 0.0)) throw std::domain_error("coef objective: xi must be nonnegative");
  for (Index t = 1; t < t_len; ++t)
    for (Index j = 0; j < k; ++j)
      if (!(gamma_hat(t, j) > 0.0)) throw std::domain_error("coef objective: gamma must be positive");
}

// Design and target of every transition, built once per call.
struct Transitions {
  std::vector<Matrix> design;
  Matrix target;  // (T-1) x N
};

Transitions build_transitions(const Params& params, const Matrix& fast) {
  const Index t_len = fast.rows(), k = params.num_operators();
  Transitions tr;
  tr.design.resize(std::max<Index>(t_len - 1, 0));
  tr.target.resize(std::max<Index>(t_len - 1, 0), fast.cols());
  for (Index t = 0; t + 1 < t_len; ++t) {
    const Vector l = fast.row(t).transpose();
    tr.design[t].resize(l.size(), k);
    for (Index j = 0; j < k; ++j) tr.design[t].col(j) = params.dynamic_operators[j] * l;
    tr.target.row(t) = fast.row(t + 1) - fast.row(t);
  }
  return tr;
}

double objective_impl(const Params& params, const Transitions& tr, const Matrix& coefs,
                      const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  const Index t_len = coefs.rows(), k = coefs.cols();
  const Vector w = params.state_noise_var.cwiseInverse();
  double value = 0.0;
  for (Index t = 0; t + 1 < t_len; ++t) {
    Vector r = tr.target.row(t).transpose() - tr.design[t] * coefs.row(t).transpose();
    value -= 0.5 * r.cwiseProduct(w).dot(r);
  }
  for (Index t = 1; t < t_len; ++t) {
    for (Index j = 0; j < k; ++j) {
      const double c = coefs(t, j), dc = c - coefs(t - 1, j);
      value -= 0.5 * c * c / gamma_hat(t, j) + 0.5 * dc * dc / params.coef_smooth_var(j);
    }
  }
  if (xi > 0.0) {
    for (Index t = 0; t + 1 < t_len; ++t) {
      for (Index j = 0; j < k; ++j) {
        if (!active(t, j)) continue;
        const double c = coefs(t, j);
        value += 2.0 * xi * std::log(std::abs(c)) - xi * c * c / gamma_hat(t + 1, j);
      }
    }
  }
  return value;
}

Matrix gradient_impl(const Params& params, const Transitions& tr, const Matrix& coefs,
                     const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  const Index t_len = coefs.rows(), k = coefs.cols();
  const Vector w = params.state_noise_var.cwiseInverse();
  Matrix grad = Matrix::Zero(t_len, k);
  for (Index t = 0; t + 1 < t_len; ++t) {
    Vector r = tr.target.row(t).transpose() - tr.design[t] * coefs.row(t).transpose();
    grad.row(t) += (tr.design[t].transpose() * w.cwiseProduct(r)).transpose();
  }
  for (Index t = 1; t < t_len; ++t) {
    for (Index j = 0; j < k; ++j) {
      const double c = coefs(t, j), dc = (c - coefs(t - 1, j)) / params.coef_smooth_var(j);
      grad(t, j) -= c / gamma_hat(t, j) + dc;
      grad(t - 1, j) += dc;
    }
  }
  if (xi > 0.0) {
    for (Index t = 0; t + 1 < t_len; ++t)
      for (Index j = 0; j < k; ++j)
        if (active(t, j)) {
          const double c = coefs(t, j);
          grad(t, j) += 2.0 * xi / c - 2.0 * xi * c / gamma_hat(t + 1, j);
        }
  }
  for (Index t = 0; t < t_len; ++t) {
    for (Index j = 0; j < k; ++j) {
      if (!active(t, j)) {
        grad(t, j) = 0.0;
      } else if (!std::isfinite(grad(t, j))) {
        throw NumericalError("coefficient gradient is not finite at (t=" + std::to_string(t) +
                             ", k=" + std::to_string(j) + ")");
      }
    }
  }
  return grad;
}

}  // namespace

double coef_objective(const Params& params, const Matrix& fast, const Matrix& coefs,
                      const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  check_coef_inputs(params, fast, coefs, gamma_hat, active, xi);
  return objective_impl(params, build_transitions(params, fast), coefs, gamma_hat, active, xi);
}

Matrix coef_objective_gradient(const Params& params, const Matrix& fast, const Matrix& coefs,
                               const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  check_coef_inputs(params, fast, coefs, gamma_hat, active, xi);
  return gradient_impl(params, build_transitions(params, fast), coefs, gamma_hat, active, xi);
}

Matrix coef_curvature(const Params& params, const Matrix& fast, const Matrix& coefs,
                      const Matrix& gamma_hat, const BoolMatrix& active, double xi) {
  check_coef_inputs(params, fast, coefs, gamma_hat, active, xi);
  const Index t_len = coefs.rows(), k = coefs.cols();
  const Vector w = params.state_noise_var.cwiseInverse();
  Matrix curv = Matrix::Zero(t_len, k);
  for (Index t = 0; t < t_len; ++t) {
    Vector data = Vector::Zero(k);
    if (t + 1 < t_len) {
      const Vector l = fast.row(t).transpose();
      for (Index j = 0; j < k; ++j) {
        const Vector col = params.dynamic_operators[j] * l;
        data(j) = col.cwiseProduct(w).dot(col);
      }
    }
    for (Index j = 0; j < k; ++j) {
      const double inv_s = 1.0 / params.coef_smooth_var(j);
      double h = data(j);
      if (t >= 1) h += 1.0 / gamma_hat(t, j) + inv_s;
      if (t + 1 < t_len) h += inv_s;
      if (xi > 0.0 && t + 1 < t_len) {
        // Inactive entries sit inside the floored region of the log term.
        const double c = coefs(t, j);
        if (active(t, j)) h += 2.0 * xi / (c * c);
        h += 2.0 * xi / gamma_hat(t + 1, j);
      }
      curv(t, j) = h;
    }
  }
  return curv;
}

RefineResult refine_coefs(const Params& params, const Matrix& fast, const Matrix& coef_init,
                          const Matrix& gamma_hat, const BoolMatrix& active, double xi,
                          double step, int iters) {
  check_coef_inputs(params, fast, coef_init, gamma_hat, active, xi);
  if (!(step > 0.0)) throw std::invalid_argument("refine_coefs: step must be positive");
  if (iters < 0) throw std::invalid_argument("refine_coefs: iters must be nonnegative");
  const Index t_len = coef_init.rows(), k = coef_init.cols();

  RefineResult out;
  out.coefs = coef_init;
  for (Index t = 0; t < t_len; ++t)
    for (Index j = 0; j < k; ++j)
      if (!active(t, j)) out.coefs(t, j) = 0.0;

  // Active entries in (t, k) order.
  Eigen::MatrixXi slot = Eigen::MatrixXi::Constant(t_len, k, -1);
  int n_active = 0;
  for (Index t = 0; t < t_len; ++t)
    for (Index j = 0; j < k; ++j)
      if (active(t, j)) {
        if (xi > 0.0 && out.coefs(t, j) == 0.0)
          throw std::domain_error("refine_coefs: active coefficient is exactly zero at (t=" +
                                  std::to_string(t) + ", k=" + std::to_string(j) + ")");
        slot(t, j) = n_active++;
      }
  if (n_active == 0) {
    out.converged = true;
    return out;
  }

  const Transitions tr = build_transitions(params, fast);
  const Vector w = params.state_noise_var.cwiseInverse();
  double value = objective_impl(params, tr, out.coefs, gamma_hat, active, xi);
  using Triplet = Eigen::Triplet<double>;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;

  for (int it = 0; it < iters; ++it) {
    const Matrix grad = gradient_impl(params, tr, out.coefs, gamma_hat, active, xi);
    Vector g(n_active);
    std::vector<Triplet> trip;
    for (Index t = 0; t < t_len; ++t) {
      Matrix block;
      if (t + 1 < t_len) block = tr.design[t].transpose() * w.asDiagonal() * tr.design[t];
      for (Index a = 0; a < k; ++a) {
        const int ia = slot(t, a);
        if (ia < 0) continue;
        g(ia) = grad(t, a);
        if (t + 1 < t_len)
          for (Index b = 0; b < k; ++b)
            if (slot(t, b) >= 0) trip.emplace_back(ia, slot(t, b), block(a, b));
        double diag = 0.0;
        const double inv_s = 1.0 / params.coef_smooth_var(a);
        if (t >= 1) diag += 1.0 / gamma_hat(t, a) + inv_s;
        if (t + 1 < t_len) diag += inv_s;
        if (xi > 0.0 && t + 1 < t_len) {
          const double c = out.coefs(t, a);
          diag += 2.0 * xi / (c * c) + 2.0 * xi / gamma_hat(t + 1, a);
        }
        trip.emplace_back(ia, ia, diag);
        if (t >= 1 && slot(t - 1, a) >= 0) {
          trip.emplace_back(ia, slot(t - 1, a), -inv_s);
          trip.emplace_back(slot(t - 1, a), ia, -inv_s);
        }
      }
    }
    Eigen::SparseMatrix<double> neg_hessian(n_active, n_active);
    neg_hessian.setFromTriplets(trip.begin(), trip.end());
    solver.compute(neg_hessian);
    if (solver.info() != Eigen::Success) throw NumericalError("refine_coefs: Newton system is singular");
    Vector dir = solver.solve(g);
    const double decrement = g.dot(dir);
    out.iterations = it + 1;
    if (!(decrement >= 0.0) || !std::isfinite(decrement))
      throw NumericalError("refine_coefs: Newton direction is not an ascent direction");
    if (0.5 * decrement < 1e-14 * std::max(1.0, std::abs(value))) {
      out.converged = true;
      break;
    }

    double alpha = step;
    bool accepted = false;
    Matrix trial = out.coefs;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      bool sign_ok = true;
      for (Index t = 0; t < t_len && sign_ok; ++t)
        for (Index j = 0; j < k; ++j) {
          const int s = slot(t, j);
          if (s < 0) continue;
          trial(t, j) = out.coefs(t, j) + alpha * dir(s);
          if (xi > 0.0 && (trial(t, j) > 0.0) != (out.coefs(t, j) > 0.0)) {
            sign_ok = false;
            break;
          }
        }
      if (!sign_ok) continue;
      const double next = objective_impl(params, tr, trial, gamma_hat, active, xi);
      if (std::isfinite(next) && next >= value + 1e-4 * alpha * decrement) {
        out.coefs = trial;
        value = next;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No measurable progress is possible at double precision.
      out.converged = true;
      break;
    }
  }
  return out;
}

GammaPosterior update_gamma(double xi, const Matrix& prev_coefs, const Matrix& coef_mean,
                            const std::vector<Matrix>& coef_samples) {
  if (!(xi > 0.0)) throw std::domain_error("update_gamma: xi must be positive");
  if (coef_samples.empty()) throw std::invalid_argument("update_gamma: need at least one sample");
  require(prev_coefs.rows() == coef_mean.rows() && prev_coefs.cols() == coef_mean.cols(),
          "update_gamma: prev_coefs and coef_mean must have the same shape");
  Matrix resid = Matrix::Zero(coef_mean.rows(), coef_mean.cols());
  for (const Matrix& s : coef_samples) {
    require(s.rows() == coef_mean.rows() && s.cols() == coef_mean.cols(),
            "update_gamma: sample shape must match coef_mean");
    resid.array() += (s - coef_mean).array().square();
  }
  const double n = static_cast<double>(coef_samples.size());
  GammaPosterior q;
  q.shape = Matrix::Constant(coef_mean.rows(), coef_mean.cols(), xi + 0.5 * n);
  q.scale = (xi * prev_coefs.array().square() + 0.5 * resid.array()).max(kBetaFloor).matrix();
  return q;
}

GammaPosterior expected_gamma_update(double xi, const Matrix& means, const Matrix& variances) {
  if (!(xi > 0.0)) throw std::domain_error("expected_gamma_update: xi must be positive");
  require(means.rows() == variances.rows() && means.cols() == variances.cols(),
          "expected_gamma_update: means and variances must have the same shape");
  const Matrix second = (means.array().square() + variances.array()).matrix();
  Matrix prev = Matrix::Zero(means.rows(), means.cols());
  if (means.rows() > 1) prev.bottomRows(means.rows() - 1) = second.topRows(means.rows() - 1);
  GammaPosterior q;
  q.shape = Matrix::Constant(means.rows(), means.cols(), xi + 0.5);
  q.scale = (xi * prev.array() + 0.5 * second.array()).max(kBetaFloor).matrix();
  return q;
}

SupportResult support_mask(const Matrix& coef_mean, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("support_mask: eta must be positive");
  SupportResult out;
  out.mask = coef_mean.array().abs() > eta;
  out.coefs = out.mask.select(coef_mean, 0.0);
  return out;
}

}  // namespace pdlds
