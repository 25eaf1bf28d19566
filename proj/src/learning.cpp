#include "pdlds/learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pdlds/coef_inference.hpp"
#include "pdlds/parallel.hpp"
#include "pdlds/state_inference.hpp"

namespace pdlds {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 0x494e4954;
constexpr std::uint64_t kCoefDrawStream = 0x43445257;
constexpr std::uint64_t kGammaDrawStream = 0x47445257;
constexpr std::uint64_t kElboStream = 0x454c424f;

template <typename Fn>
void with_iteration(int iteration, Fn&& fn) {
  const std::string where = "iteration " + std::to_string(iteration) + ": ";
  try {
    fn();
  } catch (const NumericalError& e) {
    throw NumericalError(where + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(where + e.what());
  } catch (const std::domain_error& e) {
    throw std::domain_error(where + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(where + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(where + e.what());
  }
}

void check_observations(const std::vector<Matrix>& obs) {
  if (obs.empty()) return;
  const Index m = obs.front().cols();
  for (std::size_t i = 0; i < obs.size(); ++i) {
    require(obs[i].cols() == m, "all trials must share the observation dimension M");
    require(obs[i].rows() >= 2, "trial " + std::to_string(i) + " has fewer than two time steps");
    if (!obs[i].allFinite()) throw std::domain_error("trial " + std::to_string(i) + " has non-finite values");
  }
}

}  // namespace

std::string to_string(CoefSource source) { return source == CoefSource::mean ? "mean" : "sample"; }

CoefSource coef_source_from_string(const std::string& name) {
  if (name == "sample") return CoefSource::sample;
  if (name == "mean") return CoefSource::mean;
  throw std::invalid_argument("state_coef_source must be 'sample' or 'mean'");
}

std::string to_string(CoefVariance variance) {
  return variance == CoefVariance::gamma_hat ? "gamma_hat" : "mean_field";
}

CoefVariance coef_variance_from_string(const std::string& name) {
  if (name == "mean_field") return CoefVariance::mean_field;
  if (name == "gamma_hat") return CoefVariance::gamma_hat;
  throw std::invalid_argument("coef_variance must be 'mean_field' or 'gamma_hat'");
}

std::string to_string(GammaStep step) {
  switch (step) {
    case GammaStep::map: return "map";
    case GammaStep::mean: return "mean";
    default: return "harmonic";
  }
}

GammaStep gamma_step_from_string(const std::string& name) {
  if (name == "map") return GammaStep::map;
  if (name == "mean") return GammaStep::mean;
  if (name == "harmonic") return GammaStep::harmonic;
  throw std::invalid_argument("sbl_gamma_step must be 'map', 'mean' or 'harmonic'");
}

std::string to_string(GammaUpdate update) {
  return update == GammaUpdate::sampled ? "sampled" : "expected";
}

GammaUpdate gamma_update_from_string(const std::string& name) {
  if (name == "sampled") return GammaUpdate::sampled;
  if (name == "expected") return GammaUpdate::expected;
  throw std::invalid_argument("gamma_update must be 'sampled' or 'expected'");
}

void FitConfig::validate() const {
  if (num_operators < 1) throw std::invalid_argument("K must be at least 1");
  if (latent_dim < 1) throw std::invalid_argument("N must be at least 1");
  if (window < 0) throw std::invalid_argument("window must be nonnegative (0 = full)");
  if (!(xi > 0.0)) throw std::domain_error("xi must be positive");
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be at least 1");
  if (!(xi + 0.5 * n_samples > 1.0))
    throw std::domain_error("xi + n_samples/2 must exceed 1 for the inverse-gamma mean to exist");
  // The mean of IG(xi + 1/2, .) exists only for xi > 1/2.
  if (sbl_gamma_step == GammaStep::mean && !(xi > 0.5))
    throw std::domain_error("xi must exceed 0.5 with the mean SBL gamma step");
  if (max_outer_iters < 0) throw std::invalid_argument("max_outer_iters must be nonnegative");
  if (!(elbo_tol > 0.0)) throw std::invalid_argument("elbo_tol must be positive");
  if (converge_patience < 1) throw std::invalid_argument("converge_patience must be at least 1");
  if (!(mstep_step > 0.0)) throw std::invalid_argument("mstep_step must be positive");
  if (mstep_iters < 0) throw std::invalid_argument("mstep_iters must be nonnegative");
  if (!(sigma_init >= 0.0)) throw std::invalid_argument("sigma_init must be nonnegative");
  if (elbo_samples < 1) throw std::invalid_argument("elbo_samples must be at least 1");
  if (sbl_max_iter < 1 || !(sbl_tol > 0.0)) throw std::invalid_argument("invalid SBL settings");
  if (!(refine_step > 0.0) || refine_iters < 0) throw std::invalid_argument("invalid refinement settings");
  if (threads < 0) throw std::invalid_argument("threads must be nonnegative");
}

int FitConfig::workers() const { return threads > 0 ? threads : worker_count_from_env(); }

// ---------------------------------------------------------------- init

Initialization initialize(const std::vector<Matrix>& obs, const FitConfig& config) {
  config.validate();
  require(!obs.empty(), "initialize: dataset has no trials");
  check_observations(obs);
  const Index m = obs.front().cols(), n = config.latent_dim, k = config.num_operators;
  require(m >= n, "initialize: observation dimension must be at least N");

  double total = 0.0;
  Vector mean = Vector::Zero(m);
  for (const Matrix& y : obs) {
    mean += y.colwise().sum().transpose();
    total += static_cast<double>(y.rows());
  }
  mean /= total;
  Matrix cov = Matrix::Zero(m, m);
  for (const Matrix& y : obs) {
    Matrix c = y.rowwise() - mean.transpose();
    cov.noalias() += c.transpose() * c;
  }
  cov /= total;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(cov));
  const Vector evals = es.eigenvalues().reverse();
  const Matrix evecs = es.eigenvectors().rowwise().reverse();
  const double top = std::max(evals(0), 0.0);
  if (!(top > 0.0) || !(evals(n - 1) > 1e-12 * top))
    throw NumericalError("initialize: observations span fewer than N directions (rank deficient)");

  Initialization init;
  Params& p = init.params;
  p.obs_matrix = evecs.leftCols(n);
  for (Index j = 0; j < n; ++j) {
    Index arg;
    p.obs_matrix.col(j).cwiseAbs().maxCoeff(&arg);
    if (p.obs_matrix(arg, j) < 0.0) p.obs_matrix.col(j) *= -1.0;
  }
  p.obs_offset = mean;

  Vector resid = Vector::Zero(m);
  Vector dd_sum = Vector::Zero(n), dd_sq = Vector::Zero(n), d_sum = Vector::Zero(n), d_sq = Vector::Zero(n);
  Vector x_sum = Vector::Zero(n), x_sq = Vector::Zero(n), first = Vector::Zero(n);
  double dd_count = 0.0, d_count = 0.0;
  for (const Matrix& y : obs) {
    Matrix c = y.rowwise() - mean.transpose();
    Matrix x = c * p.obs_matrix;
    resid += (c - x * p.obs_matrix.transpose()).array().square().colwise().sum().matrix().transpose();
    Matrix dx = x.bottomRows(x.rows() - 1) - x.topRows(x.rows() - 1);
    d_sum += dx.colwise().sum().transpose();
    d_sq += dx.array().square().colwise().sum().matrix().transpose();
    d_count += static_cast<double>(dx.rows());
    if (dx.rows() >= 2) {
      Matrix ddx = dx.bottomRows(dx.rows() - 1) - dx.topRows(dx.rows() - 1);
      dd_sum += ddx.colwise().sum().transpose();
      dd_sq += ddx.array().square().colwise().sum().matrix().transpose();
      dd_count += static_cast<double>(ddx.rows());
    }
    x_sum += x.colwise().sum().transpose();
    x_sq += x.array().square().colwise().sum().matrix().transpose();
    first += x.row(0).transpose();
    init.states.push_back(std::move(x));
  }
  const double scale = cov.diagonal().mean();
  const double obs_floor = std::max(kVarianceFloor, 1e-6 * scale);
  p.obs_noise_var = (resid / total).cwiseMax(obs_floor);

  // Innovation variance under locally linear dynamics. The second
  // difference x_{t+2} - 2 x_{t+1} + x_t carries about twice the innovation
  // variance plus six times the observation noise that leaks into the
  // projected latents; the discarded directions estimate that noise level.
  auto variance = [](const Vector& sum, const Vector& sq, double count) {
    Vector mean_v = sum / count;
    return Vector(sq / count - mean_v.array().square().matrix());
  };
  const Vector step_var = variance(d_sum, d_sq, d_count);
  Vector state_var = step_var;
  if (dd_count > 0.0) {
    const double leak = m > n ? (resid.sum() / total) / static_cast<double>(m - n) : 0.0;
    state_var = 0.5 * (variance(dd_sum, dd_sq, dd_count).array() - 6.0 * leak).matrix();
    state_var = state_var.cwiseMax(1e-2 * step_var);
  }
  p.state_noise_var = state_var.cwiseMax(std::max(kVarianceFloor, 1e-8 * scale));
  Vector xmean = x_sum / total;
  p.init_state_mean = first / static_cast<double>(obs.size());
  p.init_state_var = (x_sq / total - xmean.array().square().matrix()).cwiseMax(kVarianceFloor);
  p.coef_smooth_var = Vector::Ones(k);

  Rng rng = make_rng(config.seed, kInitStream);
  p.dynamic_operators.resize(k);
  for (Index j = 0; j < k; ++j) p.dynamic_operators[j] = config.sigma_init * standard_normal(rng, n, n);
  p.validate();
  return init;
}

// ---------------------------------------------------------------- M-step

MStepStats mstep_stats(const std::vector<Matrix>& obs, const std::vector<TrialPosterior>& q,
                       Index num_operators, int workers) {
  require(obs.size() == q.size(), "mstep_stats: one posterior per trial is required");
  require(!obs.empty(), "mstep_stats: no trials");
  const Index m = obs.front().cols(), n = q.front().state.smooth_mean.cols(), k = num_operators;
  const Index kn = k * n;

  auto zero = [&] {
    MStepStats s;
    s.sxx = Matrix::Zero(n, n);
    s.sx = Vector::Zero(n);
    s.syx = Matrix::Zero(m, n);
    s.sy = Vector::Zero(m);
    s.syy = Vector::Zero(m);
    s.feature_gram = Matrix::Zero(kn, kn);
    s.feature_cross = Matrix::Zero(kn, n);
    s.sdd = Vector::Zero(n);
    s.scc = Vector::Zero(k);
    return s;
  };

  std::vector<MStepStats> parts(obs.size());
  parallel_for(static_cast<int>(obs.size()), workers, [&](int i) {
    const Matrix& y = obs[i];
    const StatePosterior<double>& st = q[i].state;
    const CoefficientPosterior& cq = q[i].coef;
    const Index t_len = y.rows();
    require(st.length() == t_len && st.smooth_mean.cols() == n, "mstep_stats: state posterior shape");
    require(cq.means.rows() == t_len && cq.means.cols() == k, "mstep_stats: coefficient posterior shape");
    MStepStats s = zero();
    s.obs_count = static_cast<double>(t_len);
    s.transition_count = static_cast<double>(t_len - 1);
    const Matrix& var = cq.variances;
    for (Index t = 0; t < t_len; ++t) {
      const Vector x = (st.smooth_mean.row(t) + st.offsets.row(t)).transpose();
      const Vector yt = y.row(t).transpose();
      s.sxx.noalias() += x * x.transpose() + st.smooth_var[t];
      s.sx += x;
      s.syx.noalias() += yt * x.transpose();
      s.sy += yt;
      s.syy += yt.array().square().matrix();
    }
    for (Index t = 0; t + 1 < t_len; ++t) {
      const Vector mu = st.smooth_mean.row(t).transpose();
      const Vector mu_next = st.smooth_mean.row(t + 1).transpose();
      const Matrix& p = st.smooth_var[t];
      const Matrix& c = st.pair_cov[t];
      const Matrix ell = mu * mu.transpose() + p;
      const Matrix l_delta = mu * mu_next.transpose() + c - ell;  // E[l_t (l_{t+1} - l_t)^T]
      s.sdd += (mu_next - mu).array().square().matrix() + st.smooth_var[t + 1].diagonal() +
               p.diagonal() - 2.0 * c.diagonal();
      const Vector cm = cq.means.row(t).transpose();
      Matrix ecc = cm * cm.transpose();
      ecc.diagonal() += var.row(t).transpose();
      for (Index a = 0; a < k; ++a) {
        if (cm(a) != 0.0) s.feature_cross.middleRows(a * n, n) += cm(a) * l_delta;
        for (Index b = 0; b < k; ++b)
          if (ecc(a, b) != 0.0) s.feature_gram.block(a * n, b * n, n, n) += ecc(a, b) * ell;
      }
      s.scc += (cq.means.row(t + 1) - cq.means.row(t)).array().square().matrix().transpose() +
               var.row(t + 1).transpose() + var.row(t).transpose();
    }
    parts[i] = std::move(s);
  });

  MStepStats total = zero();
  for (const MStepStats& s : parts) {
    total.obs_count += s.obs_count;
    total.sxx += s.sxx;
    total.sx += s.sx;
    total.syx += s.syx;
    total.sy += s.sy;
    total.syy += s.syy;
    total.transition_count += s.transition_count;
    total.feature_gram += s.feature_gram;
    total.feature_cross += s.feature_cross;
    total.sdd += s.sdd;
    total.scc += s.scc;
  }
  return total;
}

namespace {

struct Layout {
  Index k, n, m;
  Index f() const { return 0; }
  Index d_mat() const { return k * n * n; }
  Index d_off() const { return d_mat() + m * n; }
  Index log_r() const { return d_off() + m; }
  Index log_q() const { return log_r() + m; }
  Index log_s() const { return log_q() + n; }
  Index size() const { return log_s() + k; }
};

Layout layout_of(const Params& p) { return {p.num_operators(), p.latent_dim(), p.obs_dim()}; }

// Row i of all operators stacked as (f_1(i,:), ..., f_K(i,:)).
Vector operator_row(const Params& p, Index i) {
  const Index k = p.num_operators(), n = p.latent_dim();
  Vector g(k * n);
  for (Index a = 0; a < k; ++a) g.segment(a * n, n) = p.dynamic_operators[a].row(i).transpose();
  return g;
}

// Per-channel expected squared residual sum_t E[(y - D x - d)^2].
Vector expected_obs_residual(const Params& p, const MStepStats& s) {
  const Index m = p.obs_dim();
  Vector e(m);
  for (Index r = 0; r < m; ++r) {
    const Vector drow = p.obs_matrix.row(r).transpose();
    const double off = p.obs_offset(r);
    e(r) = s.syy(r) - 2.0 * drow.dot(s.syx.row(r).transpose()) - 2.0 * off * s.sy(r) +
           drow.dot(s.sxx * drow) + 2.0 * off * drow.dot(s.sx) + s.obs_count * off * off;
  }
  return e;
}

Vector expected_dyn_residual(const Params& p, const MStepStats& s) {
  const Index n = p.latent_dim();
  Vector h(n);
  for (Index i = 0; i < n; ++i) {
    const Vector g = operator_row(p, i);
    h(i) = s.sdd(i) - 2.0 * g.dot(s.feature_cross.col(i)) + g.dot(s.feature_gram * g);
  }
  return h;
}

void check_stats(const Params& p, const MStepStats& s) {
  const Index n = p.latent_dim(), m = p.obs_dim(), k = p.num_operators();
  require(s.sxx.rows() == n && s.syx.rows() == m && s.scc.size() == k &&
              s.feature_gram.rows() == k * n,
          "M-step statistics do not match the parameter shapes");
}

}  // namespace

Vector pack_params(const Params& p) {
  const Layout lay = layout_of(p);
  Vector v(lay.size());
  const Index nn = lay.n * lay.n;
  for (Index a = 0; a < lay.k; ++a)
    v.segment(a * nn, nn) = Eigen::Map<const Vector>(p.dynamic_operators[a].data(), nn);
  v.segment(lay.d_mat(), lay.m * lay.n) = Eigen::Map<const Vector>(p.obs_matrix.data(), lay.m * lay.n);
  v.segment(lay.d_off(), lay.m) = p.obs_offset;
  v.segment(lay.log_r(), lay.m) = p.obs_noise_var.array().log().matrix();
  v.segment(lay.log_q(), lay.n) = p.state_noise_var.array().log().matrix();
  v.segment(lay.log_s(), lay.k) = p.coef_smooth_var.array().log().matrix();
  return v;
}

Params unpack_params(const Vector& v, const Params& shape) {
  const Layout lay = layout_of(shape);
  require(v.size() == lay.size(), "unpack_params: packed length mismatch");
  Params p = shape;
  const Index nn = lay.n * lay.n;
  for (Index a = 0; a < lay.k; ++a)
    p.dynamic_operators[a] = Eigen::Map<const Matrix>(v.data() + a * nn, lay.n, lay.n);
  p.obs_matrix = Eigen::Map<const Matrix>(v.data() + lay.d_mat(), lay.m, lay.n);
  p.obs_offset = v.segment(lay.d_off(), lay.m);
  p.obs_noise_var = v.segment(lay.log_r(), lay.m).array().exp().matrix();
  p.state_noise_var = v.segment(lay.log_q(), lay.n).array().exp().matrix();
  p.coef_smooth_var = v.segment(lay.log_s(), lay.k).array().exp().matrix();
  return p;
}

double mstep_objective(const Params& p, const MStepStats& s) {
  check_stats(p, s);
  const Vector e = expected_obs_residual(p, s);
  const Vector h = expected_dyn_residual(p, s);
  double value = 0.0;
  for (Index r = 0; r < p.obs_dim(); ++r)
    value -= 0.5 * (s.obs_count * (kLog2Pi + std::log(p.obs_noise_var(r))) + e(r) / p.obs_noise_var(r));
  for (Index i = 0; i < p.latent_dim(); ++i)
    value -= 0.5 * (s.transition_count * (kLog2Pi + std::log(p.state_noise_var(i))) +
                    h(i) / p.state_noise_var(i));
  for (Index a = 0; a < p.num_operators(); ++a)
    value -= 0.5 * (s.transition_count * (kLog2Pi + std::log(p.coef_smooth_var(a))) +
                    s.scc(a) / p.coef_smooth_var(a));
  return value;
}

Vector mstep_gradient(const Params& p, const MStepStats& s) {
  check_stats(p, s);
  const Layout lay = layout_of(p);
  Vector grad = Vector::Zero(lay.size());
  const Vector e = expected_obs_residual(p, s);
  const Vector h = expected_dyn_residual(p, s);
  for (Index i = 0; i < lay.n; ++i) {
    const Vector g = operator_row(p, i);
    const Vector dg = (s.feature_cross.col(i) - s.feature_gram * g) / p.state_noise_var(i);
    for (Index a = 0; a < lay.k; ++a)
      for (Index j = 0; j < lay.n; ++j) grad(a * lay.n * lay.n + j * lay.n + i) = dg(a * lay.n + j);
    grad(lay.log_q() + i) = -0.5 * s.transition_count + 0.5 * h(i) / p.state_noise_var(i);
  }
  for (Index r = 0; r < lay.m; ++r) {
    const Vector drow = p.obs_matrix.row(r).transpose();
    const double off = p.obs_offset(r), inv = 1.0 / p.obs_noise_var(r);
    const Vector dd = inv * (s.syx.row(r).transpose() - s.sxx * drow - off * s.sx);
    for (Index j = 0; j < lay.n; ++j) grad(lay.d_mat() + j * lay.m + r) = dd(j);
    grad(lay.d_off() + r) = inv * (s.sy(r) - drow.dot(s.sx) - s.obs_count * off);
    grad(lay.log_r() + r) = -0.5 * s.obs_count + 0.5 * e(r) * inv;
  }
  for (Index a = 0; a < lay.k; ++a)
    grad(lay.log_s() + a) = -0.5 * s.transition_count + 0.5 * s.scc(a) / p.coef_smooth_var(a);
  auto check = [&](Index from, Index len, const char* block) {
    if (!grad.segment(from, len).allFinite())
      throw NumericalError(std::string("M-step gradient is not finite in block ") + block);
  };
  check(0, lay.d_mat(), "dynamic_operators");
  check(lay.d_mat(), lay.m * lay.n, "obs_matrix");
  check(lay.d_off(), lay.m, "obs_offset");
  check(lay.log_r(), lay.m, "obs_noise_var");
  check(lay.log_q(), lay.n, "state_noise_var");
  check(lay.log_s(), lay.k, "coef_smooth_var");
  return grad;
}

namespace {

Matrix jittered_inverse(Matrix a) {
  const Index n = a.rows();
  const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  a.diagonal().array() += 1e-10 * scale;
  Eigen::LDLT<Matrix> ldlt(symmetrize(a));
  return ldlt.solve(Matrix::Identity(n, n));
}

// Scaled ascent direction for a log-variance: the distance in log space to
// the one-dimensional maximizer count * log(v) + sum / v, which has the same
// sign as the gradient.
double log_variance_direction(double sum, double count, double log_v) {
  if (count <= 0.0) return 0.0;
  const double target = std::log(std::max(sum / count, kVarianceFloor));
  return target - log_v;
}

Vector preconditioned_direction(const Params& p, const MStepStats& s, const Vector& grad,
                                const MStepOptions& opt) {
  const Layout lay = layout_of(p);
  Vector dir = Vector::Zero(lay.size());
  if (!opt.fix_operators && s.transition_count > 0.0) {
    const Matrix ginv = jittered_inverse(s.feature_gram);
    for (Index i = 0; i < lay.n; ++i) {
      Vector gi(lay.k * lay.n);
      for (Index a = 0; a < lay.k; ++a)
        for (Index j = 0; j < lay.n; ++j) gi(a * lay.n + j) = grad(a * lay.n * lay.n + j * lay.n + i);
      const Vector di = p.state_noise_var(i) * (ginv * gi);
      for (Index a = 0; a < lay.k; ++a)
        for (Index j = 0; j < lay.n; ++j) dir(a * lay.n * lay.n + j * lay.n + i) = di(a * lay.n + j);
    }
  }
  if (!opt.fix_obs_matrix || !opt.fix_obs_offset) {
    // Joint Newton step for (row of D, entry of d) under the exact curvature.
    std::vector<Index> free;
    if (!opt.fix_obs_matrix)
      for (Index j = 0; j < lay.n; ++j) free.push_back(j);
    if (!opt.fix_obs_offset) free.push_back(lay.n);
    Matrix aug(lay.n + 1, lay.n + 1);
    aug.topLeftCorner(lay.n, lay.n) = s.sxx;
    aug.topRightCorner(lay.n, 1) = s.sx;
    aug.bottomLeftCorner(1, lay.n) = s.sx.transpose();
    aug(lay.n, lay.n) = s.obs_count;
    const Index nf = static_cast<Index>(free.size());
    Matrix sub(nf, nf);
    for (Index a = 0; a < nf; ++a)
      for (Index b = 0; b < nf; ++b) sub(a, b) = aug(free[a], free[b]);
    const Matrix sub_inv = jittered_inverse(sub);
    auto slot = [&](Index r, Index j) {
      return j < lay.n ? lay.d_mat() + j * lay.m + r : lay.d_off() + r;
    };
    for (Index r = 0; r < lay.m; ++r) {
      Vector g(nf);
      for (Index a = 0; a < nf; ++a) g(a) = grad(slot(r, free[a]));
      const Vector d = p.obs_noise_var(r) * (sub_inv * g);
      for (Index a = 0; a < nf; ++a) dir(slot(r, free[a])) = d(a);
    }
  }
  if (!opt.fix_obs_noise) {
    const Vector e = expected_obs_residual(p, s);
    for (Index r = 0; r < lay.m; ++r)
      dir(lay.log_r() + r) = log_variance_direction(e(r), s.obs_count, std::log(p.obs_noise_var(r)));
  }
  if (!opt.fix_state_noise) {
    const Vector h = expected_dyn_residual(p, s);
    for (Index i = 0; i < lay.n; ++i)
      dir(lay.log_q() + i) =
          log_variance_direction(h(i), s.transition_count, std::log(p.state_noise_var(i)));
  }
  if (!opt.fix_coef_smooth) {
    for (Index a = 0; a < lay.k; ++a)
      dir(lay.log_s() + a) =
          log_variance_direction(s.scc(a), s.transition_count, std::log(p.coef_smooth_var(a)));
  }
  return dir;
}

void floor_log_variances(Vector& v, const Layout& lay) {
  const double lo = std::log(kVarianceFloor);
  for (Index i = lay.log_r(); i < lay.size(); ++i) v(i) = std::max(v(i), lo);
}

}  // namespace

Params m_step(const Params& params, const MStepStats& stats, const MStepOptions& opt) {
  params.validate();
  check_stats(params, stats);
  if (!(opt.step > 0.0)) throw std::invalid_argument("m_step: step must be positive");
  const Layout lay = layout_of(params);
  Params current = params;
  Vector theta = pack_params(current);
  floor_log_variances(theta, lay);
  current = unpack_params(theta, params);
  double value = mstep_objective(current, stats);
  for (int it = 0; it < opt.iters; ++it) {
    const Vector grad = mstep_gradient(current, stats);
    const Vector dir = preconditioned_direction(current, stats, grad, opt);
    const double slope = grad.dot(dir);
    if (!(slope > 0.0)) break;
    double alpha = opt.step;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls, alpha *= 0.5) {
      Vector cand = theta + alpha * dir;
      floor_log_variances(cand, lay);
      Params trial = unpack_params(cand, params);
      const double next = mstep_objective(trial, stats);
      if (std::isfinite(next) && next >= value + 1e-4 * alpha * slope) {
        const double gain = next - value;
        theta = std::move(cand);
        current = std::move(trial);
        value = next;
        accepted = gain > 1e-13 * std::max(1.0, std::abs(value));
        break;
      }
    }
    if (!accepted) break;
  }
  return current;
}

Params m_step(const Params& params, const std::vector<Matrix>& obs,
              const std::vector<TrialPosterior>& q, const FitConfig& config) {
  MStepOptions opt;
  opt.step = config.mstep_step;
  opt.iters = config.mstep_iters;
  return m_step(params, mstep_stats(obs, q, params.num_operators(), config.workers()), opt);
}

// ---------------------------------------------------------------- E-step

namespace {

TrialPosterior initial_posterior(const Matrix& state, Index k, double xi, int n_samples) {
  const Index t_len = state.rows(), n = state.cols();
  TrialPosterior q;
  q.state.smooth_mean = state;
  q.state.smooth_var.assign(t_len, Matrix::Zero(n, n));
  q.state.pair_cov.assign(t_len - 1, Matrix::Zero(n, n));
  q.state.offsets = Matrix::Zero(t_len, n);
  q.state.reconstructed_state = state;
  q.coef.means = Matrix::Zero(t_len, k);
  q.coef.active = BoolMatrix::Constant(t_len, k, false);
  q.gamma.shape = Matrix::Constant(t_len, k, xi + 0.5 * n_samples);
  q.gamma.scale = Matrix::Constant(t_len, k, kBetaFloor);
  q.coef.variances = q.gamma.inverse_mean().cwiseInverse();
  return q;
}

// One coordinate-ascent pass over q(x), q(c), q(gamma) for a single trial.
void update_trial(const Params& params, const Matrix& y, const FitConfig& cfg, int iteration,
                  int trial, TrialPosterior& q) {
  const Index t_len = y.rows(), k = params.num_operators();
  const Matrix offsets = estimate_offsets(q.state.reconstructed_state, cfg.window_for(t_len));

  Matrix draw = q.coef.means;
  if (cfg.state_coef_source == CoefSource::sample) {
    Rng rng = make_rng(cfg.seed, kCoefDrawStream, trial);
    const Matrix z = standard_normal(rng, t_len, k);
    draw.array() += q.coef.variances.array().sqrt() * z.array();
  }
  StatePosterior<double> state = kalman_smooth(build_tv_lds(params, draw, offsets), y);
  const Matrix& fast = state.smooth_mean;

  // SBL initialization of every transition against last iteration's coefficients.
  const Matrix& prev_iter = q.coef.means;
  Matrix init = Matrix::Zero(t_len, k), gamma_hat = Matrix::Ones(t_len, k);
  for (Index t = 0; t + 1 < t_len; ++t) {
    Vector prev;
    if (t == 0) prev = prev_iter.row(0).transpose();
    else if (cfg.sequential_sweep) prev = init.row(t - 1).transpose();
    else prev = prev_iter.row(t - 1).transpose();
    SparseRegressionProblem problem = make_sparse_problem(params, fast, t, prev, cfg.xi);
    problem.gamma_step = cfg.sbl_gamma_step;
    problem.cold_start = iteration == 0 && (t == 0 || !cfg.sequential_sweep);
    const SblResult sbl = sbl_df_init(problem, cfg.sbl_max_iter, cfg.sbl_tol);
    init.row(t) = sbl.coef_mean.transpose();
    // 1/E[1/gamma] of the matching IG(xi + 1/2, xi prev^2 + E[c^2]/2).
    const Vector scale = (cfg.xi * prev.array().square() +
                          0.5 * (sbl.coef_mean.array().square() + sbl.coef_var.array()))
                             .max(kBetaFloor)
                             .matrix();
    gamma_hat.row(t) = (scale / (cfg.xi + 0.5)).cwiseMax(kGammaFloor).transpose();
  }
  init.row(t_len - 1) = init.row(t_len - 2);
  gamma_hat.row(t_len - 1) = gamma_hat.row(t_len - 2);

  const SupportResult support = support_mask(init, cfg.eta);
  const Matrix refined = refine_coefs(params, fast, support.coefs, gamma_hat, support.mask, cfg.xi,
                                      cfg.refine_step, cfg.refine_iters)
                             .coefs;
  const SupportResult final_support = support_mask(refined, cfg.eta);

  Matrix coef_var = gamma_hat;
  if (cfg.coef_variance == CoefVariance::mean_field) {
    const Matrix curv = coef_curvature(params, fast, final_support.coefs, gamma_hat,
                                       final_support.mask, cfg.xi);
    coef_var = curv.cwiseInverse();
  }

  if (cfg.gamma_update == GammaUpdate::expected) {
    q.gamma = expected_gamma_update(cfg.xi, final_support.coefs, coef_var);
  } else {
    Rng rng = make_rng(cfg.seed, kGammaDrawStream, trial);
    std::vector<Matrix> samples;
    for (int i = 0; i < cfg.n_samples; ++i) {
      const Matrix z = standard_normal(rng, t_len, k);
      samples.push_back(final_support.coefs + (coef_var.array().sqrt() * z.array()).matrix());
    }
    Matrix prev_shifted = Matrix::Zero(t_len, k);
    prev_shifted.bottomRows(t_len - 1) = final_support.coefs.topRows(t_len - 1);
    q.gamma = update_gamma(cfg.xi, prev_shifted, final_support.coefs, samples);
  }
  q.coef.means = final_support.coefs;
  q.coef.active = final_support.mask;
  q.coef.variances = cfg.coef_variance == CoefVariance::mean_field ? coef_var : q.gamma.inverse_mean().cwiseInverse();
  q.state = std::move(state);
}

}  // namespace

void normalize_operators(Params& params, std::vector<TrialPosterior>& posteriors) {
  for (Index k = 0; k < params.num_operators(); ++k) {
    const double norm = params.dynamic_operators[k].norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) continue;
    params.dynamic_operators[k] /= norm;
    params.coef_smooth_var(k) = std::max(params.coef_smooth_var(k) * norm * norm, kVarianceFloor);
    for (TrialPosterior& q : posteriors) {
      q.coef.means.col(k) *= norm;
      q.coef.variances.col(k) *= norm * norm;
      q.gamma.scale.col(k) = (q.gamma.scale.col(k) * (norm * norm)).cwiseMax(kBetaFloor);
    }
  }
}

namespace {

FitResult run_em(Params params, const std::vector<Matrix>& obs, std::vector<TrialPosterior> post,
                 const FitConfig& cfg, bool learn, const IterationCallback& on_iteration) {
  FitResult result;
  const int workers = cfg.workers();
  const int n_trials = static_cast<int>(obs.size());
  int streak = 0;
  for (int iter = 0; iter < cfg.max_outer_iters; ++iter) {
    double value = 0.0, var = 0.0;
    double active = 0.0, entries = 0.0;
    with_iteration(iter, [&] {
      parallel_for(n_trials, workers,
                   [&](int i) { update_trial(params, obs[i], cfg, iter, i, post[i]); });
      if (learn) {
        params = m_step(params, obs, post, cfg);
        normalize_operators(params, post);
      }
      std::vector<ElboEstimate> parts(n_trials);
      parallel_for(n_trials, workers, [&](int i) {
        parts[i] = elbo(params, post[i].state, post[i].coef, post[i].gamma, obs[i], cfg.xi,
                        cfg.elbo_samples, derive_seed(cfg.seed, kElboStream, i));
      });
      for (int i = 0; i < n_trials; ++i) {
        value += parts[i].value;
        var += parts[i].std_error * parts[i].std_error;
        active += static_cast<double>(post[i].coef.active.count());
        entries += static_cast<double>(post[i].coef.active.size());
      }
    });
    if (!std::isfinite(value))
      throw NumericalError("iteration " + std::to_string(iter) + ": ELBO is not finite");
    IterationReport report;
    report.iteration = iter;
    report.elbo = value;
    report.elbo_se = std::sqrt(var);
    report.active_fraction = entries > 0.0 ? active / entries : 0.0;
    report.relative_change = std::numeric_limits<double>::infinity();
    if (!result.elbo_trace.empty()) {
      report.relative_change = std::abs(value - result.elbo_trace.back()) / std::max(std::abs(value), 1e-300);
      streak = report.relative_change < cfg.elbo_tol ? streak + 1 : 0;
    }
    result.elbo_trace.push_back(value);
    result.elbo_se.push_back(report.elbo_se);
    result.iterations_run = iter + 1;
    if (on_iteration) on_iteration(report);
    if (streak >= cfg.converge_patience) {
      result.converged = true;
      break;
    }
  }
  result.params = std::move(params);
  result.trials = std::move(post);
  return result;
}

}  // namespace

FitResult fit(const std::vector<Matrix>& obs, const FitConfig& config,
              const IterationCallback& on_iteration) {
  config.validate();
  check_observations(obs);
  require(!obs.empty(), "fit: dataset has no trials");
  for (const Matrix& y : obs)
    if (config.window > y.rows())
      throw std::invalid_argument("fit: window S exceeds trial length T");
  Initialization init = initialize(obs, config);
  std::vector<TrialPosterior> post;
  for (const Matrix& x : init.states)
    post.push_back(initial_posterior(x, config.num_operators, config.xi, config.n_samples));
  return run_em(std::move(init.params), obs, std::move(post), config, true, on_iteration);
}

FitResult infer_on_heldout(const Params& params, const std::vector<Matrix>& obs,
                           const FitConfig& config, const IterationCallback& on_iteration) {
  config.validate();
  params.validate();
  FitResult empty;
  empty.params = params;
  if (obs.empty()) return empty;
  check_observations(obs);
  require(obs.front().cols() == params.obs_dim(), "infer_on_heldout: data M differs from the model");
  for (const Matrix& y : obs)
    if (config.window > y.rows())
      throw std::invalid_argument("infer_on_heldout: window S exceeds trial length T");
  const Matrix& d = params.obs_matrix;
  const Eigen::LDLT<Matrix> normal(d.transpose() * d);
  std::vector<TrialPosterior> post;
  for (const Matrix& y : obs) {
    Matrix centered = y.rowwise() - params.obs_offset.transpose();
    Matrix x = normal.solve(d.transpose() * centered.transpose()).transpose();
    post.push_back(initial_posterior(x, params.num_operators(), config.xi, config.n_samples));
  }
  return run_em(params, obs, std::move(post), config, false, on_iteration);
}

}  // namespace pdlds
