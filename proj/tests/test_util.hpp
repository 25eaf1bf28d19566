#ifndef PDLDS_TESTS_TEST_UTIL_HPP_
#define PDLDS_TESTS_TEST_UTIL_HPP_

#include <vector>

#include "oracles.hpp"
#include "pdlds/model.hpp"

namespace testutil {

using pdlds::Index;
using pdlds::Matrix;
using pdlds::Vector;

inline pdlds::Params random_params(pdlds::Rng& rng, Index k, Index n, Index m, double op_scale = 0.1) {
  pdlds::Params p;
  for (Index j = 0; j < k; ++j) p.dynamic_operators.push_back(oracle::random_matrix(rng, n, n, op_scale));
  p.obs_matrix = oracle::random_matrix(rng, m, n);
  p.obs_offset = oracle::random_matrix(rng, m, 1, 0.5);
  p.obs_noise_var = oracle::random_positive(rng, m, 0.2, 1.0);
  p.state_noise_var = oracle::random_positive(rng, n, 0.1, 0.5);
  p.coef_smooth_var = oracle::random_positive(rng, k, 0.5, 2.0);
  p.init_state_mean = oracle::random_matrix(rng, n, 1);
  p.init_state_var = oracle::random_positive(rng, n, 0.5, 2.0);
  return p;
}

inline pdlds::Params unit_params(Index k, Index n, Index m) {
  pdlds::Params p;
  for (Index j = 0; j < k; ++j) p.dynamic_operators.push_back(Matrix::Zero(n, n));
  p.obs_matrix = Matrix::Identity(m, n);
  p.obs_offset = Vector::Zero(m);
  p.obs_noise_var = Vector::Ones(m);
  p.state_noise_var = Vector::Ones(n);
  p.coef_smooth_var = Vector::Ones(k);
  p.init_state_mean = Vector::Zero(n);
  p.init_state_var = Vector::Ones(n);
  return p;
}

inline double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

}  // namespace testutil

#endif  // PDLDS_TESTS_TEST_UTIL_HPP_
