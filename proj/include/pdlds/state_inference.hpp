#ifndef PDLDS_STATE_INFERENCE_HPP_
#define PDLDS_STATE_INFERENCE_HPP_

#include <cmath>
#include <string>
#include <vector>

#include "pdlds/core.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

/// Centered moving average over time with windows truncated at the edges.
/// Row t averages rows max(0, t - S/2) .. min(T-1, t + S/2); S == T is the
/// full-trajectory mean at every t.
template <typename Derived>
Mat<typename Derived::Scalar> estimate_offsets(const Eigen::MatrixBase<Derived>& state_means,
                                               Index window) {
  using Scalar = typename Derived::Scalar;
  const Index t_len = state_means.rows(), n = state_means.cols();
  if (window < 1 || window > t_len)
    throw std::invalid_argument("estimate_offsets: window must satisfy 1 <= S <= T (S=" +
                                std::to_string(window) + ", T=" + std::to_string(t_len) + ")");
  if (window == t_len) {
    Vec<Scalar> mean = state_means.colwise().mean().transpose();
    return mean.transpose().replicate(t_len, 1);
  }
  // prefix(t) = sum of rows [0, t)
  Mat<Scalar> prefix = Mat<Scalar>::Zero(t_len + 1, n);
  for (Index t = 0; t < t_len; ++t) prefix.row(t + 1) = prefix.row(t) + state_means.row(t);
  const Index half = window / 2;
  Mat<Scalar> out(t_len, n);
  for (Index t = 0; t < t_len; ++t) {
    const Index lo = std::max<Index>(0, t - half);
    const Index hi = std::min<Index>(t_len - 1, t + half);
    out.row(t) = (prefix.row(hi + 1) - prefix.row(lo)) / Scalar(hi - lo + 1);
  }
  return out;
}

/// Linear-Gaussian state-space model for the fast latent l with
/// time-varying transitions:
///   l_0     ~ N(init_mean, diag(init_var))
///   l_{t+1} = A_t l_t + u_t + e,  e ~ N(0, diag(state_noise_var))
///   y_t     = D l_t + e_t + v,    v ~ N(0, diag(obs_noise_var))
/// where e_t = d + D b_t carries the deterministic offsets.
template <typename Scalar>
struct TimeVaryingLDS {
  std::vector<Mat<Scalar>> transitions;  // T-1 matrices A_t = I + F_t
  Mat<Scalar> controls;                  // (T-1) x N
  Mat<Scalar> effective_obs_offset;      // T x M
  Mat<Scalar> obs_matrix;                // M x N
  Vec<Scalar> obs_noise_var;
  Vec<Scalar> state_noise_var;
  Vec<Scalar> init_mean;
  Vec<Scalar> init_var;
  Mat<Scalar> offsets;  // T x N, b_t

  Index length() const { return effective_obs_offset.rows(); }
  Index latent_dim() const { return obs_matrix.cols(); }
};

/// A_t = I + compose_transition(params, coef_sample row t); observation
/// offset d + D b_t. The prior on x_0 becomes a prior on l_0 = x_0 - b_0.
template <typename Scalar>
TimeVaryingLDS<Scalar> build_tv_lds(const ModelParameters<Scalar>& params,
                                    const Mat<Scalar>& coef_sample, const Mat<Scalar>& offsets) {
  params.validate();
  const Index t_len = offsets.rows(), n = params.latent_dim();
  require(t_len >= 1, "build_tv_lds: empty trajectory");
  require(offsets.cols() == n, "build_tv_lds: offsets must be T x N");
  require(coef_sample.rows() == t_len && coef_sample.cols() == params.num_operators(),
          "build_tv_lds: coefficient sample must be T x K");
  TimeVaryingLDS<Scalar> lds;
  lds.transitions.reserve(t_len - 1);
  const Mat<Scalar> eye = Mat<Scalar>::Identity(n, n);
  for (Index t = 0; t + 1 < t_len; ++t)
    lds.transitions.push_back(eye + compose_transition(params, coef_sample.row(t)));
  lds.controls = Mat<Scalar>::Zero(std::max<Index>(t_len - 1, 0), n);
  lds.effective_obs_offset =
      (offsets * params.obs_matrix.transpose()).rowwise() + params.obs_offset.transpose();
  lds.obs_matrix = params.obs_matrix;
  lds.obs_noise_var = params.obs_noise_var;
  lds.state_noise_var = params.state_noise_var;
  lds.init_mean = params.init_state_mean - offsets.row(0).transpose();
  lds.init_var = params.init_state_var;
  lds.offsets = offsets;
  return lds;
}

/// Forward Kalman filter (Joseph-form update, symmetrized covariances,
/// jittered innovation covariance) followed by a Rauch-Tung-Striebel
/// backward pass. Returns smoothed marginals, lag-one cross-covariances,
/// and the filtered log marginal likelihood of the observations.
template <typename Scalar>
StatePosterior<Scalar> kalman_smooth(const TimeVaryingLDS<Scalar>& lds, const Mat<Scalar>& obs) {
  using M = Mat<Scalar>;
  using V = Vec<Scalar>;
  const Index t_len = lds.length(), n = lds.latent_dim(), m = lds.obs_matrix.rows();
  require(obs.rows() == t_len && obs.cols() == m, "kalman_smooth: observations must be T x M");
  require(static_cast<Index>(lds.transitions.size()) == t_len - 1,
          "kalman_smooth: need T-1 transition matrices");
  require(lds.offsets.rows() == t_len && lds.offsets.cols() == n,
          "kalman_smooth: offsets must be T x N");

  const M& d = lds.obs_matrix;
  const M r = lds.obs_noise_var.asDiagonal();
  const M q = lds.state_noise_var.asDiagonal();
  const M eye_n = M::Identity(n, n);
  const Scalar log2pi = Scalar(1.8378770664093454836);

  std::vector<V> pred_mean(t_len), filt_mean(t_len);
  std::vector<M> pred_cov(t_len), filt_cov(t_len);
  pred_mean[0] = lds.init_mean;
  pred_cov[0] = lds.init_var.asDiagonal();
  Scalar loglik(0);

  for (Index t = 0; t < t_len; ++t) {
    const M& p = pred_cov[t];
    V innovation = obs.row(t).transpose() - d * pred_mean[t] - lds.effective_obs_offset.row(t).transpose();
    M s = d * p * d.transpose() + r;
    s = symmetrize(s);
    s.diagonal().array() += Scalar(kInnovationJitter);
    Eigen::LLT<M> llt(s);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman_smooth: innovation covariance not positive definite at t=" +
                           std::to_string(t));
    M gain = llt.solve(d * p).transpose();  // P D^T S^{-1}
    filt_mean[t] = pred_mean[t] + gain * innovation;
    M i_kd = eye_n - gain * d;
    filt_cov[t] = symmetrize(i_kd * p * i_kd.transpose() + gain * r * gain.transpose());
    const M l = llt.matrixL();
    V white = l.template triangularView<Eigen::Lower>().solve(innovation);
    loglik -= Scalar(0.5) * (Scalar(m) * log2pi + white.squaredNorm()) +
              l.diagonal().array().log().sum();
    if (t + 1 < t_len) {
      const M& a = lds.transitions[t];
      pred_mean[t + 1] = a * filt_mean[t] + lds.controls.row(t).transpose();
      pred_cov[t + 1] = symmetrize(a * filt_cov[t] * a.transpose() + q);
    }
  }

  StatePosterior<Scalar> post;
  post.smooth_mean.resize(t_len, n);
  post.smooth_var.resize(t_len);
  post.pair_cov.resize(std::max<Index>(t_len - 1, 0));
  V mean = filt_mean[t_len - 1];
  M cov = filt_cov[t_len - 1];
  post.smooth_mean.row(t_len - 1) = mean.transpose();
  post.smooth_var[t_len - 1] = cov;
  for (Index t = t_len - 2; t >= 0; --t) {
    const M& a = lds.transitions[t];
    Eigen::LLT<M> llt(pred_cov[t + 1]);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman_smooth: predicted covariance not positive definite at t=" +
                           std::to_string(t + 1));
    M smoother_gain = llt.solve(a * filt_cov[t]).transpose();  // P_t A^T P_pred^{-1}
    V next_mean = filt_mean[t] + smoother_gain * (mean - pred_mean[t + 1]);
    M next_cov = symmetrize(filt_cov[t] + smoother_gain * (cov - pred_cov[t + 1]) *
                                              smoother_gain.transpose());
    post.pair_cov[t] = smoother_gain * cov;
    mean = std::move(next_mean);
    cov = std::move(next_cov);
    post.smooth_mean.row(t) = mean.transpose();
    post.smooth_var[t] = cov;
  }
  post.offsets = lds.offsets;
  post.reconstructed_state = post.smooth_mean + post.offsets;
  post.log_likelihood = loglik;
  return post;
}

template <typename Scalar>
struct MomentSet {
  Vec<Scalar> mean;
  Mat<Scalar> cov;
};

template <typename Scalar>
struct SumCheckResult {
  MomentSet<Scalar> gaussian_offset;  // l ~ N(mu_l, S_l), b ~ N(mu_b, S_b)
  MomentSet<Scalar> delta_offset;     // l ~ N(mu_l, S_l + S_b), b = mu_b
};

/// Empirical moments of x = l + b under the two offset parameterizations.
/// Both schemes draw l from the same engine stream, so with S_b = 0 they
/// coincide sample for sample.
template <typename Scalar>
SumCheckResult<Scalar> reparameterized_sum_check(const Vec<Scalar>& mu_l, const Mat<Scalar>& sigma_l,
                                                 const Vec<Scalar>& mu_b, const Mat<Scalar>& sigma_b,
                                                 Index n_draws, std::uint64_t seed) {
  const Index n = mu_l.size();
  require(mu_b.size() == n && sigma_l.rows() == n && sigma_l.cols() == n && sigma_b.rows() == n &&
              sigma_b.cols() == n,
          "reparameterized_sum_check: dimension mismatch");
  require(n_draws >= 2, "reparameterized_sum_check: need at least two draws");
  const Mat<Scalar> root_l = psd_sqrt(sigma_l);
  const Mat<Scalar> root_b = psd_sqrt(sigma_b);
  const Mat<Scalar> root_sum = psd_sqrt(Mat<Scalar>(sigma_l + sigma_b));

  auto moments = [&](const Mat<Scalar>& draws) {
    MomentSet<Scalar> ms;
    ms.mean = draws.colwise().mean().transpose();
    Mat<Scalar> centered = draws.rowwise() - ms.mean.transpose();
    ms.cov = centered.transpose() * centered / Scalar(n_draws - 1);
    return ms;
  };

  Mat<Scalar> first(n_draws, n), second(n_draws, n);
  Rng l_stream = make_rng(seed, 0), b_stream = make_rng(seed, 1);
  for (Index i = 0; i < n_draws; ++i) {
    Vec<Scalar> l = mu_l + root_l * standard_normal(l_stream, n).template cast<Scalar>();
    Vec<Scalar> b = mu_b + root_b * standard_normal(b_stream, n).template cast<Scalar>();
    first.row(i) = (l + b).transpose();
  }
  l_stream = make_rng(seed, 0);
  for (Index i = 0; i < n_draws; ++i) {
    Vec<Scalar> l = mu_l + root_sum * standard_normal(l_stream, n).template cast<Scalar>();
    second.row(i) = (l + mu_b).transpose();
  }
  return {moments(first), moments(second)};
}

}  // namespace pdlds

#endif  // PDLDS_STATE_INFERENCE_HPP_
