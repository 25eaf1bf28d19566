#include "pdlds/dataset.hpp"

#include <stdexcept>

namespace pdlds {

bool Dataset::has_truth() const {
  if (trials.empty()) return false;
  for (const Trial& t : trials)
    if (!t.truth) return false;
  return true;
}

void Dataset::validate() const {
  const Index m = obs_dim();
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const Trial& tr = trials[i];
    const std::string which = "trial " + std::to_string(i);
    require(tr.obs.cols() == m, which + ": observation width differs from the first trial");
    require(tr.obs.rows() >= 2, which + ": needs at least two time steps");
    if (tr.truth) {
      const Truth& t = *tr.truth;
      require(t.latent.rows() == tr.obs.rows(), which + ": truth latent length mismatch");
      require(t.labels.size() == tr.obs.rows(), which + ": truth label length mismatch");
      require(t.tau.size() == tr.obs.rows(), which + ": truth speed length mismatch");
    }
  }
}

std::vector<Matrix> Dataset::observations() const {
  std::vector<Matrix> out;
  out.reserve(trials.size());
  for (const Trial& t : trials) out.push_back(t.obs);
  return out;
}

Dataset Dataset::split(const std::string& which) const {
  int parity;
  if (which == "train") parity = 0;
  else if (which == "test") parity = 1;
  else throw std::invalid_argument("split must be 'train' or 'test'");
  Dataset out = *this;
  out.trials.clear();
  for (std::size_t i = 0; i < trials.size(); ++i)
    if (static_cast<int>(i % 2) == parity) out.trials.push_back(trials[i]);
  return out;
}

}  // namespace pdlds
