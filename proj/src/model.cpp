#include "pdlds/model.hpp"

#include <limits>
#include <random>
#include <stdexcept>

#include <boost/math/special_functions/digamma.hpp>

namespace pdlds {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Cholesky with escalating diagonal jitter for nearly singular covariances.
Matrix robust_cholesky(const Matrix& cov, const char* what) {
  const Index n = cov.rows();
  Matrix sym = symmetrize(cov);
  double scale = std::max(1.0, sym.diagonal().cwiseAbs().maxCoeff());
  for (double jitter = 0.0; jitter < 1e-3 * scale; jitter = jitter == 0.0 ? 1e-14 * scale : jitter * 10) {
    Eigen::LLT<Matrix> llt(sym + jitter * Matrix::Identity(n, n));
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw NumericalError(std::string("covariance is not positive definite: ") + what);
}

double log_normal_chol(const Vector& x, const Vector& mean, const Matrix& chol) {
  Vector z = chol.triangularView<Eigen::Lower>().solve(x - mean);
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + z.squaredNorm()) -
         chol.diagonal().array().log().sum();
}

void check_positive(const Matrix& gammas, Index first_row, const char* what) {
  for (Index t = first_row; t < gammas.rows(); ++t)
    for (Index k = 0; k < gammas.cols(); ++k)
      if (!(gammas(t, k) > 0.0) || !std::isfinite(gammas(t, k)))
        throw std::domain_error(std::string(what) + " must be positive and finite");
}

// E[max(xi c^2, floor)] for c ~ N(mean, var).
double expected_floored_square(double mean, double var, double xi) {
  const double sd = std::sqrt(var), tau = std::sqrt(kBetaFloor / xi);
  const double lo = (-tau - mean) / sd, hi = (tau - mean) / sd;
  auto pdf = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); };
  auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  const double mass = cdf(hi) - cdf(lo);
  const double inner = (mean * mean + var) * mass + 2.0 * mean * sd * (pdf(lo) - pdf(hi)) +
                       var * (lo * pdf(lo) - hi * pdf(hi));
  return xi * (mean * mean + var) - xi * inner + kBetaFloor * mass;
}

}  // namespace

Matrix GammaPosterior::mean() const {
  if ((shape.array() <= 1.0).any())
    throw std::domain_error("inverse-gamma mean requires shape > 1 (xi + n/2 > 1)");
  return (scale.array() / (shape.array() - 1.0)).matrix();
}

Matrix GammaPosterior::inverse_mean() const { return (shape.array() / scale.array()).matrix(); }

double log_normal_diag(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const Eigen::Ref<const Vector>& var) {
  return -0.5 * ((x - mean).array().square() / var.array() + var.array().log() + kLog2Pi).sum();
}

double log_inverse_gamma(double gamma, double shape, double scale) {
  const double beta = std::max(scale, kBetaFloor);
  return shape * std::log(beta) - std::lgamma(shape) - (shape + 1.0) * std::log(gamma) - beta / gamma;
}

LogJointTerms log_joint_terms(const Params& params, const Matrix& fast, const Matrix& offsets,
                              const Matrix& coefs, const Matrix& gammas, const Matrix& obs,
                              double xi) {
  params.validate();
  const Index t_len = obs.rows(), n = params.latent_dim(), k = params.num_operators();
  require(obs.cols() == params.obs_dim(), "log_joint: observation width must equal M");
  require(fast.rows() == t_len && fast.cols() == n, "log_joint: fast latent must be T x N");
  require(offsets.rows() == t_len && offsets.cols() == n, "log_joint: offsets must be T x N");
  require(coefs.rows() == t_len && coefs.cols() == k, "log_joint: coefficients must be T x K");
  require(gammas.rows() == t_len && gammas.cols() == k, "log_joint: gammas must be T x K");
  if (!(xi > 0.0)) throw std::domain_error("log_joint: xi must be positive");
  check_positive(gammas, 1, "gamma");

  LogJointTerms terms;
  const Matrix state = fast + offsets;
  terms.initial =
      log_normal_diag(state.row(0).transpose(), params.init_state_mean, params.init_state_var);
  for (Index t = 0; t < t_len; ++t) {
    Vector pred = params.obs_matrix * state.row(t).transpose() + params.obs_offset;
    terms.observation += log_normal_diag(obs.row(t).transpose(), pred, params.obs_noise_var);
  }
  for (Index t = 0; t + 1 < t_len; ++t) {
    Vector l = fast.row(t).transpose();
    Vector pred = l + compose_transition(params, coefs.row(t)) * l;
    terms.dynamics += log_normal_diag(fast.row(t + 1).transpose(), pred, params.state_noise_var);
    for (Index j = 0; j < k; ++j) {
      const double c_prev = coefs(t, j), c_next = coefs(t + 1, j), g = gammas(t + 1, j);
      terms.coef_smooth += log_normal_scalar(c_next, c_prev, params.coef_smooth_var(j));
      terms.coef_sparse += log_normal_scalar(c_next, 0.0, g);
      terms.hyperprior += log_inverse_gamma(g, xi, xi * c_prev * c_prev);
    }
  }
  return terms;
}

double log_joint(const Params& params, const Matrix& fast, const Matrix& offsets,
                 const Matrix& coefs, const Matrix& gammas, const Matrix& obs, double xi) {
  return log_joint_terms(params, fast, offsets, coefs, gammas, obs, xi).total();
}

StatePathSampler::StatePathSampler(const StatePosterior<double>& q) : q_(&q) {
  const Index t_len = q.length();
  require(t_len >= 1, "state posterior is empty");
  require(static_cast<Index>(q.smooth_var.size()) == t_len, "state posterior needs T covariances");
  require(static_cast<Index>(q.pair_cov.size()) == t_len - 1,
          "state posterior needs T-1 cross-covariances");
  first_mean_ = q.smooth_mean.row(0).transpose();
  first_chol_ = robust_cholesky(q.smooth_var[0], "smoothed marginal at t=0");
  gain_.resize(t_len - 1);
  chol_.resize(t_len - 1);
  for (Index t = 0; t + 1 < t_len; ++t) {
    const Matrix& p = q.smooth_var[t];
    const Matrix& c = q.pair_cov[t];
    const Index n = p.rows();
    const double jitter = 1e-12 * std::max(1.0, p.diagonal().maxCoeff());
    Eigen::LDLT<Matrix> ldlt(symmetrize(p) + jitter * Matrix::Identity(n, n));
    gain_[t] = ldlt.solve(c).transpose();
    Matrix cond = q.smooth_var[t + 1] - gain_[t] * c;
    chol_[t] = robust_cholesky(cond, "conditional smoothed covariance");
  }
}

Matrix StatePathSampler::sample(Rng& rng, double* log_density) const {
  const Index t_len = q_->length(), n = q_->smooth_mean.cols();
  Matrix path(t_len, n);
  Vector cur = first_mean_ + first_chol_ * standard_normal(rng, n);
  double logq = log_normal_chol(cur, first_mean_, first_chol_);
  path.row(0) = cur.transpose();
  for (Index t = 0; t + 1 < t_len; ++t) {
    Vector mean = q_->smooth_mean.row(t + 1).transpose() +
                  gain_[t] * (cur - q_->smooth_mean.row(t).transpose());
    Vector next = mean + chol_[t] * standard_normal(rng, n);
    logq += log_normal_chol(next, mean, chol_[t]);
    path.row(t + 1) = next.transpose();
    cur = std::move(next);
  }
  if (log_density) *log_density = logq;
  return path;
}

ElboEstimate elbo(const Params& params, const StatePosterior<double>& q_state,
                  const CoefficientPosterior& q_coef, const GammaPosterior& q_gamma,
                  const Matrix& obs, double xi, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("elbo: n_samples must be at least 1");
  const Index t_len = obs.rows(), k = params.num_operators();
  require(q_state.length() == t_len, "elbo: state posterior length must equal T");
  require(q_coef.means.rows() == t_len && q_coef.means.cols() == k,
          "elbo: coefficient posterior must be T x K");
  require(q_gamma.shape.rows() == t_len && q_gamma.shape.cols() == k,
          "elbo: gamma posterior must be T x K");
  check_positive(q_gamma.shape, 1, "gamma posterior shape");

  // Everything except the state path and log max(xi c^2, floor) is integrated
  // exactly: q(c) is Gaussian and enters the remaining factors through its
  // first two moments, and q(gamma) enters through E[log gamma], E[1/gamma].
  const Matrix& m = q_coef.means;
  const Matrix& v = q_coef.variances;
  require(v.rows() == t_len && v.cols() == k, "elbo: coefficient variances must be T x K");
  if (!(v.array() > 0.0).all()) throw std::domain_error("elbo: coefficient variances must be positive");
  double fixed = 0.5 * (v.array().log() + kLog2Pi + 1.0).sum();  // entropy of q(c)
  for (Index t = 0; t + 1 < t_len; ++t)
    for (Index j = 0; j < k; ++j)
      fixed -= 0.5 * (v(t, j) + v(t + 1, j)) / params.coef_smooth_var(j);
  for (Index t = 1; t < t_len; ++t) {
    for (Index j = 0; j < k; ++j) {
      const double a = q_gamma.shape(t, j), b = std::max(q_gamma.scale(t, j), kBetaFloor);
      const double e_log = std::log(b) - boost::math::digamma(a), e_inv = a / b;
      const double e_sq = m(t, j) * m(t, j) + v(t, j);
      fixed += -0.5 * (kLog2Pi + e_log + e_sq * e_inv);
      fixed += -std::lgamma(xi) - (xi + 1.0) * e_log -
               expected_floored_square(m(t - 1, j), v(t - 1, j), xi) * e_inv;
      fixed += a + std::log(b) + std::lgamma(a) - (1.0 + a) * boost::math::digamma(a);
    }
  }

  StatePathSampler sampler(q_state);
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> values(n_samples);
  const Matrix ones = Matrix::Ones(t_len, k);
  const Vector q_inv = params.state_noise_var.cwiseInverse();
  for (int s = 0; s < n_samples; ++s) {
    double logq = 0.0;
    Matrix fast = sampler.sample(rng, &logq);
    const LogJointTerms terms = log_joint_terms(params, fast, q_state.offsets, m, ones, obs, xi);
    double spread = 0.0;
    for (Index t = 0; t + 1 < t_len; ++t) {
      const Vector l = fast.row(t).transpose();
      for (Index j = 0; j < k; ++j)
        spread += v(t, j) * (params.dynamic_operators[j] * l).array().square().matrix().dot(q_inv);
    }
    double log_scale = 0.0;
    for (Index t = 0; t + 1 < t_len; ++t) {
      for (Index j = 0; j < k; ++j) {
        const double c = m(t, j) + std::sqrt(v(t, j)) * z(rng);
        log_scale += std::log(std::max(xi * c * c, kBetaFloor));
      }
    }
    values[s] = terms.initial + terms.observation + terms.dynamics - 0.5 * spread + terms.coef_smooth +
                xi * log_scale + fixed - logq;
  }

  ElboEstimate out;
  out.n_samples = n_samples;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n_samples;
  out.value = mean;
  if (n_samples > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    out.sample_sd = std::sqrt(ss / (n_samples - 1));
    out.std_error = out.sample_sd / std::sqrt(static_cast<double>(n_samples));
  } else {
    out.std_error = std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace pdlds
