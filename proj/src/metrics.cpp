#include "pdlds/metrics.hpp"

#include <stdexcept>

namespace pdlds {

namespace {

void check_pairs(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, const char* who) {
  require(truth.size() == est.size(), std::string(who) + ": trial counts differ");
  require(!truth.empty(), std::string(who) + ": no trials");
  for (std::size_t i = 0; i < truth.size(); ++i)
    require(truth[i].rows() == est[i].rows(), std::string(who) + ": trial lengths differ");
}

}  // namespace

Matrix align_latents(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, bool* degenerate) {
  check_pairs(truth, est, "align_latents");
  const Index nt = truth.front().cols(), ne = est.front().cols();
  Matrix cross = Matrix::Zero(nt, ne), gram = Matrix::Zero(ne, ne);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i].cols() == nt && est[i].cols() == ne, "align_latents: inconsistent widths");
    cross.noalias() += truth[i].transpose() * est[i];
    gram.noalias() += est[i].transpose() * est[i];
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
  if (degenerate) *degenerate = !(es.eigenvalues().minCoeff() > 1e-12 * top) || top == 0.0;
  gram.diagonal().array() += 1e-12 * std::max(top, 1e-300);
  return gram.ldlt().solve(cross.transpose()).transpose();
}

double mse_dynamics(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, const Matrix& u) {
  check_pairs(truth, est, "mse_dynamics");
  std::vector<Matrix> speeds;
  for (const Matrix& e : est) {
    require(e.rows() >= 2, "mse_dynamics: trials need T >= 2");
    speeds.push_back(e.bottomRows(e.rows() - 1) - e.topRows(e.rows() - 1));
  }
  return mse_speed(truth, speeds, u);
}

double mse_speed(const std::vector<Matrix>& truth, const std::vector<Matrix>& speeds, const Matrix& u) {
  require(truth.size() == speeds.size() && !truth.empty(), "mse_speed: trial counts differ");
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const Matrix& x = truth[i];
    require(x.rows() >= 2, "mse_speed: trials need T >= 2");
    require(speeds[i].rows() == x.rows() - 1, "mse_speed: need T-1 predicted speeds");
    require(u.rows() == x.cols() && u.cols() == speeds[i].cols(), "mse_speed: alignment shape");
    const Matrix dx = x.bottomRows(x.rows() - 1) - x.topRows(x.rows() - 1);
    total += (dx - speeds[i] * u.transpose()).rowwise().squaredNorm().mean();
  }
  return total / static_cast<double>(truth.size());
}

double mse_state(const std::vector<Matrix>& truth, const std::vector<Matrix>& est, const Matrix& u) {
  check_pairs(truth, est, "mse_state");
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(u.rows() == truth[i].cols() && u.cols() == est[i].cols(), "mse_state: alignment shape");
    total += (truth[i] - est[i] * u.transpose()).rowwise().squaredNorm().mean();
  }
  return total / static_cast<double>(truth.size());
}

SwitchMode switch_mode_from_string(const std::string& name) {
  if (name == "dominant") return SwitchMode::dominant;
  if (name == "active_set") return SwitchMode::active_set;
  if (name == "discrete") return SwitchMode::discrete;
  throw std::invalid_argument("switch mode must be dominant, active_set or discrete");
}

std::vector<bool> switch_events(const Matrix& coefs, SwitchMode mode, double eta) {
  const Index t_len = coefs.rows();
  std::vector<bool> events(t_len, false);
  if (mode == SwitchMode::discrete)
    throw std::invalid_argument("switch_events: discrete mode takes labels");
  if (mode == SwitchMode::dominant) {
    auto dominant = [&](Index t) {
      Index best = 0;
      for (Index k = 1; k < coefs.cols(); ++k)
        if (std::abs(coefs(t, k)) > std::abs(coefs(t, best))) best = k;
      return best;
    };
    Index prev = t_len > 0 ? dominant(0) : 0;
    for (Index t = 1; t < t_len; ++t) {
      const Index cur = dominant(t);
      events[t] = cur != prev;
      prev = cur;
    }
  } else {
    for (Index t = 1; t < t_len; ++t) {
      bool changed = false;
      for (Index k = 0; k < coefs.cols() && !changed; ++k)
        changed = (std::abs(coefs(t, k)) > eta) != (std::abs(coefs(t - 1, k)) > eta);
      events[t] = changed;
    }
  }
  return events;
}

std::vector<bool> switch_events(const IntVector& labels) {
  std::vector<bool> events(labels.size(), false);
  for (Index t = 1; t < labels.size(); ++t) events[t] = labels(t) != labels(t - 1);
  return events;
}

double switch_rate(const std::vector<bool>& events) {
  if (events.empty()) return 0.0;
  double n = 0.0;
  for (bool e : events) n += e ? 1.0 : 0.0;
  return n / static_cast<double>(events.size());
}

double mse_switch(const std::vector<double>& true_rates, const std::vector<double>& est_rates) {
  require(true_rates.size() == est_rates.size(), "mse_switch: trial counts differ");
  if (true_rates.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < true_rates.size(); ++i) {
    const double d = true_rates[i] - est_rates[i];
    total += d * d;
  }
  return total / static_cast<double>(true_rates.size());
}

R2Parts r2_parts(const Matrix& obs, const Matrix& pred, Index first) {
  require(first >= 0 && first + pred.rows() <= obs.rows() && pred.cols() == obs.cols(),
          "r2_parts: prediction block out of range");
  const Vector mean = obs.colwise().mean().transpose();
  R2Parts parts;
  const Matrix target = obs.middleRows(first, pred.rows());
  parts.sse = (target - pred).squaredNorm();
  parts.sst = (target.rowwise() - mean.transpose()).squaredNorm();
  parts.count = pred.rows();
  return parts;
}

R2Parts multistep_r2_parts(const Params& params, const Matrix& obs, const Matrix& fast,
                           const Matrix& offsets, const Matrix& coefs, Index k, bool freeze_coefs) {
  const Index t_len = obs.rows(), n = params.latent_dim();
  if (k < 1) throw std::invalid_argument("multistep_r2: k must be at least 1");
  if (k >= t_len) throw std::invalid_argument("multistep_r2: k must be smaller than T");
  require(fast.rows() == t_len && fast.cols() == n, "multistep_r2: fast latent must be T x N");
  require(offsets.rows() == t_len && offsets.cols() == n, "multistep_r2: offsets must be T x N");
  require(coefs.rows() == t_len && coefs.cols() == params.num_operators(),
          "multistep_r2: coefficients must be T x K");
  require(obs.cols() == params.obs_dim(), "multistep_r2: observation width must equal M");

  std::vector<Matrix> transitions(t_len - 1);
  const Matrix eye = Matrix::Identity(n, n);
  for (Index t = 0; t + 1 < t_len; ++t) transitions[t] = eye + compose_transition(params, coefs.row(t));

  Matrix pred(t_len - k, obs.cols());
  for (Index t = 0; t + k < t_len; ++t) {
    Vector l = fast.row(t).transpose();
    for (Index j = 0; j < k; ++j) l = transitions[freeze_coefs ? t : t + j] * l;
    pred.row(t) = (params.obs_matrix * (l + offsets.row(t + k).transpose()) + params.obs_offset).transpose();
  }
  return r2_parts(obs, pred, k);
}

TransitionFit ridge_transition_fit(const Matrix& x_t, const Matrix& x_next, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("ridge_transition_fit: lambda must be positive");
  require(x_t.rows() == x_next.rows() && x_t.cols() == x_next.cols() && x_t.rows() >= 1,
          "ridge_transition_fit: inputs must share shape");
  const Matrix r = x_next - x_t;
  const Vector x_mean = x_t.colwise().mean().transpose();
  const Vector r_mean = r.colwise().mean().transpose();
  const Matrix xc = x_t.rowwise() - x_mean.transpose();
  const Matrix rc = r.rowwise() - r_mean.transpose();
  Matrix gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  TransitionFit fit;
  // Rows are samples: rc ~ xc F^T.
  fit.transition = gram.ldlt().solve(xc.transpose() * rc).transpose();
  fit.offset = r_mean - fit.transition * x_mean;
  return fit;
}

TransitionFit ridge_transition_fit(const Vector& x_t, const Vector& x_next, double lambda) {
  return ridge_transition_fit(Matrix(x_t.transpose()), Matrix(x_next.transpose()), lambda);
}

}  // namespace pdlds
