#include "pdlds/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pdlds {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

namespace {

std::string trial_name(std::size_t i) { return "trial_" + std::to_string(i) + ".csv"; }

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number: '" + s + "'");
  }
}

std::string trial_csv(const Trial& trial) {
  const Index m = trial.obs.cols();
  std::string out = "t";
  for (Index j = 0; j < m; ++j) out += ",y_" + std::to_string(j);
  if (trial.truth) {
    for (Index j = 0; j < trial.truth->latent.cols(); ++j) out += ",x_" + std::to_string(j);
    out += ",z,tau";
  }
  out += '\n';
  for (Index t = 0; t < trial.obs.rows(); ++t) {
    out += std::to_string(t);
    for (Index j = 0; j < m; ++j) out += ',' + format_double(trial.obs(t, j));
    if (trial.truth) {
      const Truth& tr = *trial.truth;
      for (Index j = 0; j < tr.latent.cols(); ++j) out += ',' + format_double(tr.latent(t, j));
      out += ',' + std::to_string(tr.labels(t)) + ',' + format_double(tr.tau(t));
    }
    out += '\n';
  }
  return out;
}

Trial parse_trial(const std::string& text, const std::string& where, Index m, Index n_true, bool truth) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(where + ": empty file");
  const std::vector<std::string> header = split_fields(line);
  const Index expected = 1 + m + (truth ? n_true + 2 : 0);
  if (static_cast<Index>(header.size()) != expected || header[0] != "t")
    throw FormatError(where + ": header does not match meta.json (expected " + std::to_string(expected) +
                      " columns)");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_fields(line);
    if (static_cast<Index>(f.size()) != expected)
      throw FormatError(where + ": row " + std::to_string(rows.size()) + " has the wrong column count");
    std::vector<double> r(expected);
    for (Index j = 0; j < expected; ++j) r[j] = parse_double(f[j], where);
    if (r[0] != static_cast<double>(rows.size())) throw FormatError(where + ": time index out of order");
    rows.push_back(std::move(r));
  }
  const Index t_len = static_cast<Index>(rows.size());
  Trial trial;
  trial.obs.resize(t_len, m);
  Truth tr;
  if (truth) {
    tr.latent.resize(t_len, n_true);
    tr.labels.resize(t_len);
    tr.tau.resize(t_len);
  }
  for (Index t = 0; t < t_len; ++t) {
    for (Index j = 0; j < m; ++j) trial.obs(t, j) = rows[t][1 + j];
    if (truth) {
      for (Index j = 0; j < n_true; ++j) tr.latent(t, j) = rows[t][1 + m + j];
      tr.labels(t) = static_cast<int>(rows[t][1 + m + n_true]);
      tr.tau(t) = rows[t][2 + m + n_true];
    }
  }
  if (truth) trial.truth = std::move(tr);
  return trial;
}

json matrix_json(const Matrix& a) {
  json rows = json::array();
  for (Index i = 0; i < a.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < a.cols(); ++j) r.push_back(a(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

json vector_json(const Vector& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Matrix matrix_from(const json& j, const char* what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw FormatError(std::string(what) + " must be a nested array");
  const Index rows = static_cast<Index>(j.size()), cols = static_cast<Index>(j[0].size());
  Matrix a(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j[i].size()) != cols) throw FormatError(std::string(what) + " is ragged");
    for (Index c = 0; c < cols; ++c) a(i, c) = j[i][c].get<double>();
  }
  return a;
}

Vector vector_from(const json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + " must be an array");
  Vector v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

json bpdn_json(const BpdnDfConfig& c) {
  return {{"lambda0", c.lambda0}, {"lambda1", c.lambda1}, {"lambda2", c.lambda2},
          {"solver_iters", c.solver_iters}, {"solver_tol", c.solver_tol}};
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  ds.validate();
  fs::create_directories(dir);
  json meta;
  meta["format"] = "pdlds-dataset";
  meta["version"] = 1;
  meta["system"] = ds.system;
  meta["obs_dim"] = ds.obs_dim();
  meta["latent_dim_true"] = ds.latent_dim_true;
  meta["num_operators_true"] = ds.num_operators_true;
  meta["sample_rate"] = ds.sample_rate;
  meta["generator"] = ds.generator;
  meta["has_truth"] = ds.has_truth();
  json trials = json::array();
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    const Trial& tr = ds.trials[i];
    json entry = {{"file", trial_name(i)}, {"length", tr.length()}};
    if (tr.truth) {
      entry["switch_count"] = tr.truth->switch_count;
      json starts = json::array();
      for (Index s : tr.truth->segment_starts) starts.push_back(s);
      entry["segment_starts"] = std::move(starts);
    }
    trials.push_back(std::move(entry));
    write_file((fs::path(dir) / trial_name(i)).string(), trial_csv(tr));
  }
  meta["trials"] = std::move(trials);
  write_file((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const std::string meta_path = (fs::path(dir) / "meta.json").string();
  json meta;
  try {
    meta = json::parse(read_file(meta_path));
  } catch (const json::exception& e) {
    throw FormatError(meta_path + ": " + e.what());
  }
  Dataset ds;
  try {
    if (meta.value("format", "") != "pdlds-dataset") throw FormatError(meta_path + ": not a dataset");
    ds.system = meta.at("system").get<std::string>();
    const Index m = meta.at("obs_dim").get<Index>();
    ds.latent_dim_true = meta.at("latent_dim_true").get<Index>();
    ds.num_operators_true = meta.at("num_operators_true").get<Index>();
    ds.sample_rate = meta.at("sample_rate").get<double>();
    ds.generator = meta.at("generator").get<std::map<std::string, double>>();
    const bool truth = meta.at("has_truth").get<bool>();
    for (const json& entry : meta.at("trials")) {
      const std::string file = entry.at("file").get<std::string>();
      const std::string path = (fs::path(dir) / file).string();
      Trial trial = parse_trial(read_file(path), path, m, ds.latent_dim_true, truth);
      if (trial.length() != entry.at("length").get<Index>())
        throw FormatError(path + ": length differs from meta.json");
      if (trial.truth) {
        trial.truth->switch_count = entry.value("switch_count", 0);
        trial.truth->segment_starts = entry.value("segment_starts", std::vector<Index>{});
      }
      ds.trials.push_back(std::move(trial));
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path + ": " + e.what());
  }
  try {
    ds.validate();
  } catch (const DimensionError& e) {
    throw FormatError(dir + ": " + e.what());
  }
  return ds;
}

std::string dataset_hash(const std::string& dir) {
  const std::string meta_text = read_file((fs::path(dir) / "meta.json").string());
  std::uint64_t h = fnv1a(meta_text);
  const json meta = json::parse(meta_text);
  for (const json& entry : meta.at("trials"))
    h = fnv1a(read_file((fs::path(dir) / entry.at("file").get<std::string>()).string()), h);
  return hex64(h);
}

std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file(path))); }

json params_to_json(const Params& p) {
  json ops = json::array();
  for (const Matrix& f : p.dynamic_operators) ops.push_back(matrix_json(f));
  return {{"dynamic_operators", ops},
          {"obs_matrix", matrix_json(p.obs_matrix)},
          {"obs_offset", vector_json(p.obs_offset)},
          {"obs_noise_var", vector_json(p.obs_noise_var)},
          {"state_noise_var", vector_json(p.state_noise_var)},
          {"coef_smooth_var", vector_json(p.coef_smooth_var)},
          {"init_state_mean", vector_json(p.init_state_mean)},
          {"init_state_var", vector_json(p.init_state_var)}};
}

Params params_from_json(const json& j) {
  Params p;
  try {
    for (const json& f : j.at("dynamic_operators")) p.dynamic_operators.push_back(matrix_from(f, "dynamic operator"));
    p.obs_matrix = matrix_from(j.at("obs_matrix"), "obs_matrix");
    p.obs_offset = vector_from(j.at("obs_offset"), "obs_offset");
    p.obs_noise_var = vector_from(j.at("obs_noise_var"), "obs_noise_var");
    p.state_noise_var = vector_from(j.at("state_noise_var"), "state_noise_var");
    p.coef_smooth_var = vector_from(j.at("coef_smooth_var"), "coef_smooth_var");
    p.init_state_mean = vector_from(j.at("init_state_mean"), "init_state_mean");
    p.init_state_var = vector_from(j.at("init_state_var"), "init_state_var");
    p.validate();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model parameters: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("model parameters: ") + e.what());
  }
  return p;
}

json to_json(const FitConfig& c) {
  return {{"num_operators", c.num_operators},
          {"latent_dim", c.latent_dim},
          {"window", c.window},
          {"xi", c.xi},
          {"eta", c.eta},
          {"n_samples", c.n_samples},
          {"max_outer_iters", c.max_outer_iters},
          {"elbo_tol", c.elbo_tol},
          {"converge_patience", c.converge_patience},
          {"mstep_step", c.mstep_step},
          {"mstep_iters", c.mstep_iters},
          {"seed", c.seed},
          {"sigma_init", c.sigma_init},
          {"elbo_samples", c.elbo_samples},
          {"state_coef_source", to_string(c.state_coef_source)},
          {"coef_variance", to_string(c.coef_variance)},
          {"sequential_sweep", c.sequential_sweep},
          {"sbl_gamma_step", to_string(c.sbl_gamma_step)},
          {"gamma_update", to_string(c.gamma_update)},
          {"sbl_max_iter", c.sbl_max_iter},
          {"sbl_tol", c.sbl_tol},
          {"refine_step", c.refine_step},
          {"refine_iters", c.refine_iters}};
}

FitConfig fit_config_from_json(const json& j) {
  FitConfig c;
  try {
    c.num_operators = j.value("num_operators", c.num_operators);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.window = j.value("window", c.window);
    c.xi = j.value("xi", c.xi);
    c.eta = j.value("eta", c.eta);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.max_outer_iters = j.value("max_outer_iters", c.max_outer_iters);
    c.elbo_tol = j.value("elbo_tol", c.elbo_tol);
    c.converge_patience = j.value("converge_patience", c.converge_patience);
    c.mstep_step = j.value("mstep_step", c.mstep_step);
    c.mstep_iters = j.value("mstep_iters", c.mstep_iters);
    c.seed = j.value("seed", c.seed);
    c.sigma_init = j.value("sigma_init", c.sigma_init);
    c.elbo_samples = j.value("elbo_samples", c.elbo_samples);
    c.state_coef_source = coef_source_from_string(j.value("state_coef_source", to_string(c.state_coef_source)));
    c.coef_variance = coef_variance_from_string(j.value("coef_variance", to_string(c.coef_variance)));
    c.sequential_sweep = j.value("sequential_sweep", c.sequential_sweep);
    c.sbl_gamma_step = gamma_step_from_string(j.value("sbl_gamma_step", to_string(c.sbl_gamma_step)));
    c.gamma_update = gamma_update_from_string(j.value("gamma_update", to_string(c.gamma_update)));
    c.sbl_max_iter = j.value("sbl_max_iter", c.sbl_max_iter);
    c.sbl_tol = j.value("sbl_tol", c.sbl_tol);
    c.refine_step = j.value("refine_step", c.refine_step);
    c.refine_iters = j.value("refine_iters", c.refine_iters);
  } catch (const json::exception& e) {
    throw FormatError(std::string("fit configuration: ") + e.what());
  }
  return c;
}

json to_json(const DldsConfig& c) {
  return {{"bpdn", bpdn_json(c.bpdn)},
          {"num_operators", c.num_operators},
          {"latent_dim", c.latent_dim},
          {"outer_iters", c.outer_iters},
          {"seed", c.seed},
          {"sigma_init", c.sigma_init}};
}

DldsConfig dlds_config_from_json(const json& j) {
  DldsConfig c;
  try {
    const json b = j.value("bpdn", json::object());
    c.bpdn.lambda0 = b.value("lambda0", c.bpdn.lambda0);
    c.bpdn.lambda1 = b.value("lambda1", c.bpdn.lambda1);
    c.bpdn.lambda2 = b.value("lambda2", c.bpdn.lambda2);
    c.bpdn.solver_iters = b.value("solver_iters", c.bpdn.solver_iters);
    c.bpdn.solver_tol = b.value("solver_tol", c.bpdn.solver_tol);
    c.num_operators = j.value("num_operators", c.num_operators);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.outer_iters = j.value("outer_iters", c.outer_iters);
    c.seed = j.value("seed", c.seed);
    c.sigma_init = j.value("sigma_init", c.sigma_init);
  } catch (const json::exception& e) {
    throw FormatError(std::string("dLDS configuration: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json j;
  j["format"] = "pdlds-model";
  j["version"] = 1;
  j["model"] = ckpt.model;
  j["seed"] = ckpt.seed;
  j["dims"] = {{"K", ckpt.params.num_operators()},
               {"N", ckpt.params.latent_dim()},
               {"M", ckpt.params.obs_dim()}};
  j["config"] = ckpt.config;
  j["params"] = params_to_json(ckpt.params);
  write_file(path, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  Checkpoint c;
  try {
    if (j.value("format", "") != "pdlds-model") throw FormatError(path + ": not a model checkpoint");
    c.model = j.at("model").get<std::string>();
    if (c.model != "pdlds" && c.model != "dlds") throw FormatError(path + ": unknown model '" + c.model + "'");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.config = j.at("config");
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  c.params = params_from_json(j.at("params"));
  return c;
}

}  // namespace pdlds
