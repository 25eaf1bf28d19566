#ifndef PDLDS_CORE_HPP_
#define PDLDS_CORE_HPP_

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace pdlds {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Vec<double>;
using Matrix = Mat<double>;
using Index = Eigen::Index;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using IntVector = Eigen::VectorXi;

// Shape or length disagreement between arguments.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Factorization failure, non-finite gradient, integrator breakdown.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Floors shared across modules.
inline constexpr double kBetaFloor = 1e-8;       // inverse-gamma scale
inline constexpr double kGammaFloor = 1e-10;     // SBL prior variances
inline constexpr double kVarianceFloor = 1e-10;  // learned noise variances
inline constexpr double kInnovationJitter = 1e-9;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; mixes a parent seed with stream indices so that
/// every (seed, trial, iteration, purpose) tuple gets an independent engine.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t seed, Ids... ids) {
  std::uint64_t h = mix_seed(seed);
  ((h = mix_seed(h ^ static_cast<std::uint64_t>(ids))), ...);
  return h;
}

template <typename... Ids>
Rng make_rng(std::uint64_t seed, Ids... ids) {
  return Rng(derive_seed(seed, ids...));
}

inline Vector standard_normal(Rng& rng, Index n) {
  std::normal_distribution<double> z(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = z(rng);
  return v;
}

inline Matrix standard_normal(Rng& rng, Index rows, Index cols) {
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix m(rows, cols);
  // Row-major fill keeps draws stable if storage order ever changes.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = z(rng);
  return m;
}

/// Symmetric PSD square root through an eigendecomposition; tolerates
/// exactly singular inputs where a Cholesky factor would fail.
template <typename Derived>
Mat<typename Derived::Scalar> psd_sqrt(const Eigen::MatrixBase<Derived>& cov) {
  using Scalar = typename Derived::Scalar;
  Mat<Scalar> sym = (cov + cov.transpose()) / Scalar(2);
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(sym);
  Vec<Scalar> root = es.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

template <typename Derived>
Mat<typename Derived::Scalar> symmetrize(const Eigen::MatrixBase<Derived>& m) {
  return (m + m.transpose()) / typename Derived::Scalar(2);
}

/// Worker count from PDLDS_THREADS, falling back to 1.
int worker_count_from_env();

}  // namespace pdlds

#endif  // PDLDS_CORE_HPP_
