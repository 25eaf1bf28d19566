#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pdlds/baseline.hpp"
#include "pdlds/datagen.hpp"
#include "pdlds/io.hpp"
#include "pdlds/learning.hpp"
#include "pdlds/metrics.hpp"
#include "pdlds/parallel.hpp"

using namespace pdlds;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 1;

// Incompatible data, model or request; maps to exit code 3.
class Incompatible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string system;
  int trials = 30;
  long length = 1000;
  long obs_dim = 10;
  std::uint64_t seed = 0;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  Dataset ds;
  if (a.system == "nascar") {
    NascarConfig c;
    c.n_trials = a.trials;
    c.length = a.length;
    c.obs_dim = a.obs_dim;
    c.seed = a.seed;
    ds = nascar_generate(c);
  } else {
    LorenzConfig c;
    c.n_trials = a.trials;
    c.length = a.length;
    c.obs_dim = a.obs_dim;
    c.seed = a.seed;
    ds = lorenz_generate(c);
  }
  save_dataset(ds, a.out);
  std::cout << "hash " << dataset_hash(a.out) << "\n";
  return 0;
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string model = "pdlds";
  std::string data;
  std::string split = "train";
  int k = 4;
  int n = 2;
  std::string window = "full";
  double xi = 1.0;
  std::uint64_t seed = 0;
  std::string out;
  int max_iters = 100;
  int n_samples = 1;
  std::string coef_source = "sample";
  double lambda0 = 1.044, lambda1 = 0.254, lambda2 = 0.023;
  int outer_iters = 20;
};

Dataset load_split(const std::string& dir, const std::string& split) {
  Dataset ds = load_dataset(dir);
  if (split == "all") return ds;
  Dataset part = ds.split(split);
  if (part.trials.empty()) throw Incompatible("split '" + split + "' of " + dir + " has no trials");
  return part;
}

int parse_window(const std::string& w) {
  if (w == "full") return 0;
  try {
    std::size_t used = 0;
    const int v = std::stoi(w, &used);
    if (used == w.size() && v >= 1) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("--window must be 'full' or a positive integer");
}

void check_model_fits_data(int n, const Dataset& ds) {
  if (n > ds.obs_dim())
    throw Incompatible("latent dimension N=" + std::to_string(n) + " exceeds observation dimension M=" +
                       std::to_string(ds.obs_dim()));
}

int run_fit(const FitArgs& a) {
  const Dataset ds = load_split(a.data, a.split);
  check_model_fits_data(a.n, ds);
  fs::create_directories(a.out);
  std::ostringstream log;
  Checkpoint ckpt;
  ckpt.model = a.model;
  ckpt.seed = a.seed;
  log << "model " << a.model << "\ndata " << a.data << " split " << a.split << " trials " << ds.trials.size()
      << "\n";
  if (a.model == "pdlds") {
    FitConfig c;
    c.num_operators = a.k;
    c.latent_dim = a.n;
    c.window = parse_window(a.window);
    c.xi = a.xi;
    c.seed = a.seed;
    c.max_outer_iters = a.max_iters;
    c.n_samples = a.n_samples;
    c.state_coef_source = coef_source_from_string(a.coef_source);
    for (const Trial& t : ds.trials)
      if (c.window > t.length())
        throw Incompatible("window S=" + std::to_string(c.window) + " exceeds trial length " +
                           std::to_string(t.length()));
    std::string trace = "iteration,elbo,std_error,relative_change,active_fraction\n";
    const FitResult r = fit(ds.observations(), c, [&](const IterationReport& rep) {
      trace += std::to_string(rep.iteration) + ',' + format_double(rep.elbo) + ',' + format_double(rep.elbo_se) +
               ',' + format_double(rep.relative_change) + ',' + format_double(rep.active_fraction) + '\n';
      log << "iteration " << rep.iteration << " elbo " << format_double(rep.elbo) << " se "
          << format_double(rep.elbo_se) << "\n";
    });
    write_file((fs::path(a.out) / "elbo_trace.csv").string(), trace);
    log << "converged " << (r.converged ? "yes" : "no") << " iterations " << r.iterations_run << "\n";
    ckpt.params = r.params;
    ckpt.config = to_json(c);
  } else {
    DldsConfig c;
    c.num_operators = a.k;
    c.latent_dim = a.n;
    c.seed = a.seed;
    c.outer_iters = a.outer_iters;
    c.bpdn.lambda0 = a.lambda0;
    c.bpdn.lambda1 = a.lambda1;
    c.bpdn.lambda2 = a.lambda2;
    const DldsResult r = dlds_learn(ds.observations(), c);
    std::string trace = "iteration,objective\n";
    for (std::size_t i = 0; i < r.objective_trace.size(); ++i) {
      trace += std::to_string(i) + ',' + format_double(r.objective_trace[i]) + '\n';
      log << "iteration " << i << " objective " << format_double(r.objective_trace[i]) << "\n";
    }
    write_file((fs::path(a.out) / "objective_trace.csv").string(), trace);
    if (r.singular_solves > 0)
      log << "warning: " << r.singular_solves << " least-squares solves needed jitter\n";
    ckpt.params = r.params;
    ckpt.config = to_json(c);
  }
  const std::string model_path = (fs::path(a.out) / "model.json").string();
  save_checkpoint(ckpt, model_path);
  log << "model_hash " << file_hash(model_path) << "\n";
  write_file((fs::path(a.out) / "fit.log").string(), log.str());
  std::cout << log.str();
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model_file;
  std::string data;
  std::string split = "test";
  std::vector<long> k_steps{1, 100};
  std::string out;
  std::string switch_mode = "dominant";
  double eta = 1e-4;
  int infer_iters = -1;
  bool freeze_coefs = false;
};

// Inferred quantities of one model on a list of trials.
struct Inference {
  std::vector<Matrix> states;   // reconstructed
  std::vector<Matrix> fast;     // dynamic component
  std::vector<Matrix> offsets;  // slow component
  std::vector<Matrix> coefs;    // row t drives t -> t+1
};

Inference infer(const Checkpoint& ckpt, const Dataset& ds, int infer_iters) {
  Inference out;
  if (ckpt.model == "pdlds") {
    FitConfig c = fit_config_from_json(ckpt.config);
    if (infer_iters >= 0) c.max_outer_iters = infer_iters;
    for (const Trial& t : ds.trials)
      if (c.window > t.length()) throw Incompatible("checkpoint window exceeds trial length");
    const FitResult r = infer_on_heldout(ckpt.params, ds.observations(), c);
    for (const TrialPosterior& q : r.trials) {
      out.states.push_back(q.state.reconstructed_state);
      out.fast.push_back(q.state.smooth_mean);
      out.offsets.push_back(q.state.offsets);
      out.coefs.push_back(q.coef.means);
    }
  } else {
    const DldsConfig c = dlds_config_from_json(ckpt.config);
    for (const Trial& t : ds.trials) {
      const BpdnTrace tr = bpdn_df_infer(ckpt.params, t.obs, c.bpdn);
      out.states.push_back(tr.states);
      out.fast.push_back(tr.states);
      out.offsets.push_back(Matrix::Zero(tr.states.rows(), tr.states.cols()));
      out.coefs.push_back(transition_coefs(tr));
    }
  }
  return out;
}

json evaluate_json(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model_file);
  const Dataset ds = load_split(a.data, a.split);
  if (ds.obs_dim() != ckpt.params.obs_dim())
    throw Incompatible("checkpoint expects M=" + std::to_string(ckpt.params.obs_dim()) + " but data has M=" +
                       std::to_string(ds.obs_dim()));
  Index shortest = ds.trials.front().length();
  for (const Trial& t : ds.trials) shortest = std::min(shortest, t.length());
  for (long k : a.k_steps) {
    if (k < 1) throw UsageError("--k-steps entries must be at least 1");
    if (k >= shortest)
      throw Incompatible("k=" + std::to_string(k) + " is not smaller than trial length " + std::to_string(shortest));
  }
  const SwitchMode mode = switch_mode_from_string(a.switch_mode);
  if (mode == SwitchMode::discrete) throw UsageError("--switch-mode must be dominant or active_set");

  const Inference inf = infer(ckpt, ds, a.infer_iters);
  const std::string& name = ckpt.model;
  const std::size_t n_trials = ds.trials.size();
  json out;
  out["model"] = name;
  out["split"] = a.split;
  out["n_trials"] = n_trials;
  out["switch_mode"] = a.switch_mode;

  std::vector<json> per_trial(n_trials);
  for (std::size_t i = 0; i < n_trials; ++i) per_trial[i]["trial"] = i;
  for (long k : a.k_steps) {
    R2Parts pooled;
    const std::string key = "r2_" + std::to_string(k);
    for (std::size_t i = 0; i < n_trials; ++i) {
      const R2Parts p = multistep_r2_parts(ckpt.params, ds.trials[i].obs, inf.fast[i], inf.offsets[i],
                                           inf.coefs[i], k, a.freeze_coefs);
      per_trial[i][key] = p.r2();
      pooled += p;
    }
    out[key + "." + name] = pooled.r2();
  }

  std::vector<double> est_rates(n_trials);
  for (std::size_t i = 0; i < n_trials; ++i) {
    est_rates[i] = switch_rate(switch_events(inf.coefs[i], mode, a.eta));
    per_trial[i]["switch_rate_est"] = est_rates[i];
  }
  out["switch_rate_est." + name] = [&] {
    double s = 0.0;
    for (double r : est_rates) s += r;
    return s / static_cast<double>(n_trials);
  }();

  if (ds.has_truth() && ds.latent_dim_true > 0) {
    std::vector<Matrix> truth;
    std::vector<double> true_rates(n_trials);
    for (std::size_t i = 0; i < n_trials; ++i) {
      truth.push_back(ds.trials[i].truth->latent);
      true_rates[i] = switch_rate(switch_events(ds.trials[i].truth->labels));
      per_trial[i]["switch_rate_true"] = true_rates[i];
    }
    bool degenerate = false;
    const Matrix u = align_latents(truth, inf.states, &degenerate);
    if (degenerate) out["warning"] = "estimated latents are rank deficient; alignment used jitter";
    out["mse_dynamics." + name] = mse_dynamics(truth, inf.states, u);
    out["mse_state." + name] = mse_state(truth, inf.states, u);
    out["mse_switch." + name] = mse_switch(true_rates, est_rates);
    for (std::size_t i = 0; i < n_trials; ++i) {
      per_trial[i]["mse_dynamics"] = mse_dynamics({truth[i]}, {inf.states[i]}, u);
      per_trial[i]["mse_state"] = mse_state({truth[i]}, {inf.states[i]}, u);
    }
  }
  out["per_trial"] = per_trial;
  return out;
}

int run_eval(const EvalArgs& a) {
  const std::string text = evaluate_json(a).dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    const fs::path p(a.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file(a.out, text);
    std::cout << "wrote " << a.out << " hash " << file_hash(a.out) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- search

struct SearchArgs {
  std::string model = "pdlds";
  std::string data;
  int budget = 10;
  std::uint64_t seed = 0;
  std::string out;
  int k = 4;
  int n = 2;
  int max_iters = 20;
  int outer_iters = 10;
};

struct SearchRow {
  std::size_t index = 0;
  std::vector<double> values;  // sampled settings in column order
  double objective = std::nan("");
  std::string status = "ok";
};

int run_search(const SearchArgs& a) {
  if (a.budget < 1) throw UsageError("--budget must be at least 1");
  const Dataset ds = load_dataset(a.data);
  const Dataset train = ds.split("train"), valid = ds.split("test");
  if (train.trials.empty() || valid.trials.empty())
    throw Incompatible("search needs at least two trials (one per split)");
  check_model_fits_data(a.n, ds);
  Index shortest = ds.trials.front().length();
  for (const Trial& t : ds.trials) shortest = std::min(shortest, t.length());

  // Every setting is drawn up front from one engine, so the sequence depends
  // on the seed alone.
  Rng rng(a.seed);
  std::uniform_real_distribution<double> log_u(std::log(1e-3), std::log(1e3));
  std::uniform_int_distribution<Index> window(2, shortest);
  const bool pd = a.model == "pdlds";
  std::vector<SearchRow> rows(a.budget);
  for (int i = 0; i < a.budget; ++i) {
    rows[i].index = i;
    if (pd) {
      const double xi = std::exp(log_u(rng));
      rows[i].values = {xi, static_cast<double>(window(rng))};
    } else {
      const double l0 = std::exp(log_u(rng)), l1 = std::exp(log_u(rng)), l2 = std::exp(log_u(rng));
      rows[i].values = {l0, l1, l2};
    }
  }

  parallel_for(a.budget, worker_count_from_env(), [&](int i) {
    SearchRow& row = rows[i];
    const std::uint64_t seed = derive_seed(a.seed, 0x5ea4c8ULL, i);
    try {
      if (pd) {
        FitConfig c;
        c.num_operators = a.k;
        c.latent_dim = a.n;
        c.xi = row.values[0];
        c.window = static_cast<int>(row.values[1]);
        c.seed = seed;
        c.max_outer_iters = a.max_iters;
        c.threads = 1;
        const FitResult r = fit(train.observations(), c);
        const FitResult h = infer_on_heldout(r.params, valid.observations(), c);
        row.objective = h.elbo_trace.empty() ? std::nan("") : h.elbo_trace.back();
      } else {
        DldsConfig c;
        c.num_operators = a.k;
        c.latent_dim = a.n;
        c.seed = seed;
        c.outer_iters = a.outer_iters;
        c.threads = 1;
        c.bpdn.lambda0 = row.values[0];
        c.bpdn.lambda1 = row.values[1];
        c.bpdn.lambda2 = row.values[2];
        const DldsResult r = dlds_learn(train.observations(), c);
        double total = 0.0;
        for (const Trial& t : valid.trials) total += bpdn_df_infer(r.params, t.obs, c.bpdn).objective;
        row.objective = total;
      }
      if (!std::isfinite(row.objective)) row.status = "nonfinite";
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      row.objective = std::nan("");
    }
    for (char& ch : row.status)
      if (ch == ',' || ch == '\n') ch = ';';
  });

  // Best first: highest held-out ELBO or lowest held-out objective; failures last.
  std::stable_sort(rows.begin(), rows.end(), [&](const SearchRow& x, const SearchRow& y) {
    const bool fx = std::isfinite(x.objective), fy = std::isfinite(y.objective);
    if (fx != fy) return fx;
    if (!fx) return false;
    return pd ? x.objective > y.objective : x.objective < y.objective;
  });
  std::string csv = pd ? "rank,index,xi,window,objective,status\n"
                       : "rank,index,lambda0,lambda1,lambda2,objective,status\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const SearchRow& row = rows[r];
    csv += std::to_string(r) + ',' + std::to_string(row.index);
    if (pd) {
      csv += ',' + format_double(row.values[0]) + ',' + std::to_string(static_cast<long>(row.values[1]));
    } else {
      for (double v : row.values) csv += ',' + format_double(v);
    }
    csv += ',' + format_double(row.objective) + ',' + row.status + '\n';
  }
  fs::path path(a.out);
  if (fs::is_directory(path) || a.out.back() == '/') {
    fs::create_directories(path);
    path /= "search.csv";
  } else if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  write_file(path.string(), csv);
  std::cout << "wrote " << path.string() << " rows " << rows.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic decomposed linear dynamical systems"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate a synthetic dataset");
  g->add_option("--system", gen.system, "nascar or lorenz")->required()->check(CLI::IsMember({"nascar", "lorenz"}));
  g->add_option("--trials", gen.trials, "number of trials")->check(CLI::PositiveNumber);
  g->add_option("--length", gen.length, "time steps per trial")->check(CLI::Range(2L, 100000000L));
  g->add_option("--obs-dim", gen.obs_dim, "observation dimension M")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--out", gen.out, "output directory")->required();

  FitArgs fa;
  auto* f = app.add_subcommand("fit", "Fit p-dLDS or the dLDS baseline");
  f->add_option("--model", fa.model, "pdlds or dlds")->check(CLI::IsMember({"pdlds", "dlds"}));
  f->add_option("--data", fa.data, "dataset directory")->required();
  f->add_option("--split", fa.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  f->add_option("--k", fa.k, "number of dynamic operators")->check(CLI::PositiveNumber);
  f->add_option("--n", fa.n, "latent dimension")->check(CLI::PositiveNumber);
  f->add_option("--window", fa.window, "offset window S: 'full' or a positive integer");
  f->add_option("--xi", fa.xi, "hyperprior strength")->check(CLI::PositiveNumber);
  f->add_option("--seed", fa.seed, "random seed");
  f->add_option("--out", fa.out, "output directory")->required();
  f->add_option("--max-iters", fa.max_iters, "outer EM iterations")->check(CLI::NonNegativeNumber);
  f->add_option("--n-samples", fa.n_samples, "coefficient draws per gamma update")->check(CLI::PositiveNumber);
  f->add_option("--coef-source", fa.coef_source, "coefficients fed to the smoother")
      ->check(CLI::IsMember({"sample", "mean"}));
  f->add_option("--lambda0", fa.lambda0, "dLDS dynamics weight")->check(CLI::NonNegativeNumber);
  f->add_option("--lambda1", fa.lambda1, "dLDS sparsity weight")->check(CLI::NonNegativeNumber);
  f->add_option("--lambda2", fa.lambda2, "dLDS smoothness weight")->check(CLI::NonNegativeNumber);
  f->add_option("--outer-iters", fa.outer_iters, "dLDS learning iterations")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  e->add_option("--model-file", ea.model_file, "model.json")->required();
  e->add_option("--data", ea.data, "dataset directory")->required();
  e->add_option("--split", ea.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  e->add_option("--k-steps", ea.k_steps, "rollout horizons for R^2")->delimiter(',');
  e->add_option("--out", ea.out, "metrics.json path (stdout when omitted)");
  e->add_option("--switch-mode", ea.switch_mode, "dominant or active_set");
  e->add_option("--eta", ea.eta, "activity threshold for active_set mode")->check(CLI::PositiveNumber);
  e->add_option("--infer-iters", ea.infer_iters, "held-out inference iterations (default: fit setting)");
  e->add_flag("--freeze-coefs", ea.freeze_coefs, "hold coefficients at their value at the rollout start");

  SearchArgs sa;
  auto* s = app.add_subcommand("search", "Random hyperparameter search");
  s->add_option("--model", sa.model, "pdlds or dlds")->check(CLI::IsMember({"pdlds", "dlds"}));
  s->add_option("--data", sa.data, "dataset directory")->required();
  s->add_option("--budget", sa.budget, "number of sampled configurations")->required();
  s->add_option("--seed", sa.seed, "random seed");
  s->add_option("--out", sa.out, "search.csv path or directory")->required();
  s->add_option("--k", sa.k, "number of dynamic operators")->check(CLI::PositiveNumber);
  s->add_option("--n", sa.n, "latent dimension")->check(CLI::PositiveNumber);
  s->add_option("--max-iters", sa.max_iters, "p-dLDS iterations per evaluation")->check(CLI::NonNegativeNumber);
  s->add_option("--outer-iters", sa.outer_iters, "dLDS iterations per evaluation")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*f) return run_fit(fa);
    if (*e) return run_eval(ea);
    if (*s) return run_search(sa);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const Incompatible& err) {
    std::cerr << "incompatible input: " << err.what() << "\n";
    return kExitData;
  } catch (const FormatError& err) {
    std::cerr << "incompatible input: " << err.what() << "\n";
    return kExitData;
  } catch (const DimensionError& err) {
    std::cerr << "incompatible input: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
