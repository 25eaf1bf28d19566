#ifndef PDLDS_DATASET_HPP_
#define PDLDS_DATASET_HPP_

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pdlds/core.hpp"

namespace pdlds {

/// Ground truth recorded by a generator.
struct Truth {
  Matrix latent;              // T x N
  IntVector labels;           // T, region or lobe label
  Vector tau;                 // T, speed constant in force at each step
  int switch_count = 0;       // events counted by the generator
  std::vector<Index> segment_starts;  // first index of each speed segment
};

struct Trial {
  Matrix obs;  // T x M
  std::optional<Truth> truth;

  Index length() const { return obs.rows(); }
};

struct Dataset {
  std::string system = "custom";
  Index latent_dim_true = 0;
  Index num_operators_true = 0;
  double sample_rate = 1.0;
  std::map<std::string, double> generator;  // numeric generator settings
  std::vector<Trial> trials;

  Index obs_dim() const { return trials.empty() ? 0 : trials.front().obs.cols(); }
  bool has_truth() const;

  /// Throws when trials disagree on M or are shorter than two steps.
  void validate() const;

  std::vector<Matrix> observations() const;
  /// Trials with index parity 0 ("train") or 1 ("test").
  Dataset split(const std::string& which) const;
};

}  // namespace pdlds

#endif  // PDLDS_DATASET_HPP_
