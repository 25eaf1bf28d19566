#ifndef PDLDS_IO_HPP_
#define PDLDS_IO_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "pdlds/baseline.hpp"
#include "pdlds/dataset.hpp"
#include "pdlds/learning.hpp"
#include "pdlds/model.hpp"

namespace pdlds {

// Malformed or mutually inconsistent files on disk.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// printf("%.17g"): round-trips every double.
std::string format_double(double v);

/// 64-bit FNV-1a over raw bytes, chainable through `basis`.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

/// Directory layout: meta.json plus trial_<i>.csv with header
/// t,y_0..y_{M-1}[,x_0..x_{N-1},z,tau]. Creates the directory if needed.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// Hash of meta.json followed by every trial file in index order.
std::string dataset_hash(const std::string& dir);
std::string file_hash(const std::string& path);

nlohmann::json params_to_json(const Params& params);
Params params_from_json(const nlohmann::json& j);

nlohmann::json to_json(const FitConfig& config);
FitConfig fit_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DldsConfig& config);
DldsConfig dlds_config_from_json(const nlohmann::json& j);

/// model.json: parameters, the fitting configuration and the seed.
struct Checkpoint {
  std::string model = "pdlds";  // "pdlds" or "dlds"
  Params params;
  nlohmann::json config;
  std::uint64_t seed = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
/// Writes `text` to `path`, replacing any previous content.
void write_file(const std::string& path, const std::string& text);

}  // namespace pdlds

#endif  // PDLDS_IO_HPP_
