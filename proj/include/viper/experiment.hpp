#pragma once

// Experiment harness behind the command-line tool: a JSON config, seeded
// repeats spread over worker threads, and JSON / CSV reports.
//
// Repeat r (1-based) uses seed_r = seed + r for the data and every fit of that
// repeat, so methods are paired. Rows come out ordered by (method, seed) with
// methods in the order viper, vipg, vimc, whatever order the workers finish.
//
// Timing fields ("wall_time_s", "total_wall_time_s") are the only
// run-dependent parts of a report.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "viper/bound.hpp"
#include "viper/datagen.hpp"
#include "viper/errors.hpp"
#include "viper/metrics.hpp"
#include "viper/vbgp.hpp"
#include "viper/vblogit.hpp"
#include "viper/version.hpp"

namespace viper::experiment {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
// Stream for the Monte Carlo ELBO evaluation, shared by all methods of a repeat.
inline constexpr std::uint64_t kEvalStream = 4;

enum class Task { bound_grid, logistic_sim, gp_toy, fit_file };
enum class Method { viper, vipg, vimc };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::bound_grid: return "bound-grid";
    case Task::logistic_sim: return "logistic-sim";
    case Task::gp_toy: return "gp-toy";
    case Task::fit_file: return "fit-file";
  }
  return "unknown";
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::bound_grid, Task::logistic_sim, Task::gp_toy, Task::fit_file}) {
    if (s == to_string(t)) return t;
  }
  throw config_error("unknown task '" + s + "' (expected bound-grid, logistic-sim, gp-toy or fit-file)");
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::viper: return "viper";
    case Method::vipg: return "vipg";
    case Method::vimc: return "vimc";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::viper, Method::vipg, Method::vimc}) {
    if (s == to_string(m)) return m;
  }
  throw config_error("unknown method '" + s + "' (expected viper, vipg or vimc)");
}

/// Comma separated list, duplicates removed, canonical order.
inline std::vector<Method> parse_methods(const std::string& list) {
  std::set<Method> seen;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) seen.insert(parse_method(item));
  }
  if (seen.empty()) throw config_error("methods must not be empty");
  return {seen.begin(), seen.end()};
}

/// Inclusive arithmetic grid from, from + step, ..., to.
struct GridAxis {
  double from = 0.0;
  double to = 0.0;
  double step = 1.0;

  std::vector<double> values() const {
    if (!(step > 0.0) || !(to >= from)) throw config_error("grid axis needs step > 0 and to >= from");
    const auto count = static_cast<long>(std::floor((to - from) / step + 1e-9)) + 1;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count));
    // rounded to 12 decimals so -3 + 29 * 0.1 prints as -0.1, not -0.099999999999999645
    for (long k = 0; k < count; ++k) out.push_back(std::round((from + k * step) * 1e12) / 1e12);
    return out;
  }
};

struct ExperimentConfig {
  Task task = Task::logistic_sim;
  std::vector<Method> methods{Method::viper, Method::vipg, Method::vimc};
  int n_repeats = 100;
  std::uint64_t seed = 0;
  bool allow_nonconverged = false;
  std::string output_path;       // empty: JSON to stdout
  std::string output_format = "json";  // json, csv or both

  FitConfig fit;
  int elbo_mc_samples = 10000;
  double prior_variance = 1.0;

  // logistic-sim
  LogisticSimSpec logistic;
  Eigen::Index logistic_n_test = 1000;
  // gp-toy
  GPToySpec toy;
  // GP fits (gp-toy, fit-file with model = gp)
  Eigen::Index inducing = 50;
  double lengthscale = 0.5;
  double signal_variance = 1.0;
  double jitter = 1e-6;
  double init_variance = 0.35;
  GPTrainable trainable;
  // fit-file
  std::string data_path;
  std::string model = "logistic";
  double train_fraction = 0.8;
  // bound-grid
  GridAxis theta{-3.0, 3.0, 0.1};
  GridAxis tau{0.1, 3.0, 0.1};
  std::vector<int> l_list{12};
  int l_max = 30;
  int quad_nodes = 200;
  std::vector<double> thresholds{0.005, 0.01, 0.025, 0.05};

  GPFitConfig gp_fit_config(std::uint64_t run_seed) const {
    GPFitConfig g;
    g.fit = fit;
    g.fit.seed = run_seed;
    g.lengthscale = lengthscale;
    g.signal_variance = signal_variance;
    g.jitter = jitter;
    g.init_variance = init_variance;
    g.trainable = trainable;
    return g;
  }

  void validate() const {
    if (methods.empty()) throw config_error("methods must not be empty");
    if (n_repeats < 1) throw config_error("n_repeats must be >= 1");
    if (output_format != "json" && output_format != "csv" && output_format != "both") {
      throw config_error("output_format must be json, csv or both");
    }
    if ((output_format != "json") && output_path.empty()) throw config_error("csv output needs output_path");
    if (elbo_mc_samples < 2) throw config_error("eval.elbo_mc_samples must be >= 2");
    if (!(prior_variance > 0.0)) throw config_error("prior.variance must be > 0");
    fit.validate();
    switch (task) {
      case Task::bound_grid:
        (void)theta.values();
        (void)tau.values();
        if (tau.from <= 0.0) throw config_error("grid.tau must be > 0");
        if (l_max < 1) throw config_error("grid.l_max must be >= 1");
        for (int l : l_list)
          if (l < 1) throw config_error("grid.l entries must be >= 1");
        if (quad_nodes < 2) throw config_error("grid.quad_nodes must be >= 2");
        break;
      case Task::logistic_sim:
        logistic.validate();
        if (logistic_n_test < 0) throw config_error("sim.n_test must be >= 0");
        break;
      case Task::gp_toy:
        toy.validate();
        gp_fit_config(0).validate();
        if (inducing < 1 || inducing > toy.n_train) throw config_error("gp.inducing must lie in [1, n_train]");
        break;
      case Task::fit_file:
        if (data_path.empty()) throw config_error("fit-file needs data_path");
        if (model != "logistic" && model != "gp") throw config_error("model must be logistic or gp");
        if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw config_error("train_fraction must lie in (0, 1)");
        if (model == "gp") gp_fit_config(0).validate();
        break;
    }
  }
};

namespace detail {

// Reads keys from one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw config_error(where_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw config_error(where_ + "." + key + ": wrong type");
    }
  }

  std::optional<Section> child(const char* key) {
    used_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw config_error(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

inline void read_axis(Section& s, const char* key, GridAxis& axis) {
  if (auto a = s.child(key)) {
    a->get("from", axis.from);
    a->get("to", axis.to);
    a->get("step", axis.step);
    a->finish();
  }
}

}  // namespace detail

/// Fills a config from JSON; absent keys keep their defaults. task_hint is
/// the task named on the command line, if any.
inline ExperimentConfig parse_config(const json& j, std::optional<Task> task_hint = std::nullopt) {
  ExperimentConfig c;
  detail::Section root(j, "config");
  std::string task_name;
  root.get("task", task_name);
  if (!task_name.empty()) {
    c.task = parse_task(task_name);
    if (task_hint && *task_hint != c.task) {
      throw config_error(std::string("config task '") + task_name + "' does not match '" + to_string(*task_hint) + "'");
    }
  } else if (task_hint) {
    c.task = *task_hint;
  } else {
    throw config_error("no task given");
  }
  std::vector<std::string> names;
  root.get("methods", names);
  if (j.contains("methods")) {
    std::string joined;
    for (const auto& n : names) joined += n + ",";
    c.methods = parse_methods(joined);
  }
  root.get("n_repeats", c.n_repeats);
  root.get("seed", c.seed);
  root.get("allow_nonconverged", c.allow_nonconverged);
  root.get("output_path", c.output_path);
  root.get("output_format", c.output_format);
  root.get("data_path", c.data_path);
  root.get("model", c.model);
  root.get("train_fraction", c.train_fraction);

  if (auto f = root.child("fit")) {
    int l = c.fit.l.value();
    f->get("l", l);
    c.fit.l = TruncationOrder(l);
    std::string opt = "lbfgs";
    f->get("optimizer", opt);
    if (opt == "lbfgs") {
      c.fit.optimizer = OptimizerKind::lbfgs;
    } else if (opt == "gradient") {
      c.fit.optimizer = OptimizerKind::gradient;
    } else {
      throw config_error("fit.optimizer must be lbfgs or gradient");
    }
    f->get("step_size", c.fit.step_size);
    f->get("max_iters", c.fit.max_iters);
    f->get("rel_tol", c.fit.rel_tol);
    f->get("mc_samples", c.fit.mc_samples);
    std::string family = "full";
    f->get("family", family);
    if (family == "full") {
      c.fit.family = Family::full;
    } else if (family == "mean_field") {
      c.fit.family = Family::mean_field;
    } else {
      throw config_error("fit.family must be full or mean_field");
    }
    f->get("lbfgs_history", c.fit.lbfgs_history);
    f->get("ema_decay", c.fit.stochastic.ema_decay);
    f->get("average_window", c.fit.stochastic.average_window);
    f->get("min_iters", c.fit.stochastic.min_iters);
    f->finish();
  }
  if (auto e = root.child("eval")) {
    e->get("elbo_mc_samples", c.elbo_mc_samples);
    e->finish();
  }
  if (auto p = root.child("prior")) {
    p->get("variance", c.prior_variance);
    p->finish();
  }
  if (auto s = root.child("sim")) {
    if (c.task == Task::gp_toy) {
      s->get("n_train", c.toy.n_train);
      s->get("n_test", c.toy.n_test);
    } else {
      s->get("n", c.logistic.n);
      s->get("p", c.logistic.p);
      s->get("setting", c.logistic.setting);
      s->get("n_test", c.logistic_n_test);
    }
    s->finish();
  }
  if (auto g = root.child("gp")) {
    g->get("inducing", c.inducing);
    g->get("lengthscale", c.lengthscale);
    g->get("signal_variance", c.signal_variance);
    g->get("jitter", c.jitter);
    g->get("init_variance", c.init_variance);
    g->get("train_inducing", c.trainable.inducing);
    g->get("train_kernel", c.trainable.kernel);
    g->get("train_mean", c.trainable.mean);
    g->finish();
  }
  if (auto g = root.child("grid")) {
    detail::read_axis(*g, "theta", c.theta);
    detail::read_axis(*g, "tau", c.tau);
    g->get("l", c.l_list);
    g->get("l_max", c.l_max);
    g->get("quad_nodes", c.quad_nodes);
    g->get("thresholds", c.thresholds);
    g->finish();
  }
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::string& path, std::optional<Task> task_hint = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw config_error(path + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(path + ": " + e.what());
  }
  return parse_config(j, task_hint);
}

/// Effective config, defaults filled in, as echoed into reports.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["allow_nonconverged"] = c.allow_nonconverged;
  j["output_format"] = c.output_format;
  auto axis = [](const GridAxis& a) { return json{{"from", a.from}, {"to", a.to}, {"step", a.step}}; };
  if (c.task == Task::bound_grid) {
    j["grid"] = {{"theta", axis(c.theta)}, {"tau", axis(c.tau)}, {"l", c.l_list},
                 {"l_max", c.l_max}, {"quad_nodes", c.quad_nodes}, {"thresholds", c.thresholds}};
    return j;
  }
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  j["methods"] = methods;
  j["n_repeats"] = c.n_repeats;
  j["fit"] = {{"l", c.fit.l.value()},
              {"optimizer", c.fit.optimizer == OptimizerKind::lbfgs ? "lbfgs" : "gradient"},
              {"step_size", c.fit.step_size},
              {"max_iters", c.fit.max_iters},
              {"rel_tol", c.fit.rel_tol},
              {"mc_samples", c.fit.mc_samples},
              {"family", to_string(c.fit.family)},
              {"lbfgs_history", c.fit.lbfgs_history},
              {"ema_decay", c.fit.stochastic.ema_decay},
              {"average_window", c.fit.stochastic.average_window},
              {"min_iters", c.fit.stochastic.min_iters}};
  j["eval"] = {{"elbo_mc_samples", c.elbo_mc_samples}};
  const bool gp = c.task == Task::gp_toy || (c.task == Task::fit_file && c.model == "gp");
  if (!gp) j["prior"] = {{"variance", c.prior_variance}};
  if (c.task == Task::logistic_sim) {
    j["sim"] = {{"n", c.logistic.n}, {"p", c.logistic.p}, {"setting", c.logistic.setting}, {"n_test", c.logistic_n_test}};
  } else if (c.task == Task::gp_toy) {
    j["sim"] = {{"n_train", c.toy.n_train}, {"n_test", c.toy.n_test}};
  } else {
    j["data_path"] = c.data_path;
    j["model"] = c.model;
    j["train_fraction"] = c.train_fraction;
  }
  if (gp) {
    j["gp"] = {{"inducing", c.inducing},           {"lengthscale", c.lengthscale},
               {"signal_variance", c.signal_variance}, {"jitter", c.jitter},
               {"init_variance", c.init_variance},   {"train_inducing", c.trainable.inducing},
               {"train_kernel", c.trainable.kernel}, {"train_mean", c.trainable.mean}};
  }
  return j;
}

/// One (method, seed) record. Absent metrics are null in JSON, empty in CSV.
struct RunRecord {
  Method method = Method::viper;
  std::uint64_t seed = 0;
  std::string error;  // non-empty when the fit diverged
  bool converged = false;
  std::string stop_reason;
  int iterations = 0;
  double wall_time_s = 0.0;
  std::optional<double> elbo_mc, elbo_mc_se, kl_mc_fwd, kl_mc_rev, mse, coverage, ci_width, auc;
};

inline const std::vector<std::pair<const char*, std::optional<double> RunRecord::*>>& metric_fields() {
  static const std::vector<std::pair<const char*, std::optional<double> RunRecord::*>> fields{
      {"elbo_mc", &RunRecord::elbo_mc}, {"elbo_mc_se", &RunRecord::elbo_mc_se}, {"kl_mc_fwd", &RunRecord::kl_mc_fwd},
      {"kl_mc_rev", &RunRecord::kl_mc_rev}, {"mse", &RunRecord::mse}, {"coverage", &RunRecord::coverage},
      {"ci_width", &RunRecord::ci_width}, {"auc", &RunRecord::auc}};
  return fields;
}

struct Report {
  json doc;
  std::string csv;
  bool all_converged = true;
};

namespace detail {

inline std::optional<double> finite(double v) {
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

inline json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// short form for column names and keys: 0.005 rather than 0.0050000000000000001
inline std::string fmt_key(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline int worker_count() {
  if (const char* env = std::getenv("VIPER_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw config_error("VIPER_WORKERS must be a positive integer");
    return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, count) on the worker pool; the first exception wins.
template <class Job>
void parallel_for(int count, Job&& job) {
  const int workers = std::min(worker_count(), count);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto loop = [&] {
    for (int i; (i = next.fetch_add(1)) < count;) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(count);
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(loop);
  loop();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline void fill_fit(RunRecord& r, const FitResult& fit) {
  r.converged = fit.converged;
  r.stop_reason = fit.stop_reason;
  r.iterations = fit.iterations;
  r.wall_time_s = fit.wall_time_s;
}

inline std::optional<double> safe_auc(const Eigen::VectorXd& y, const Eigen::VectorXd& scores) {
  const double pos = y.sum();
  if (y.size() == 0 || pos == 0.0 || pos == static_cast<double>(y.size())) return std::nullopt;
  return finite(auc(y, scores));
}

struct LogisticFitOut {
  std::optional<VariationalGaussian> q;
  RunRecord record;
};

inline LogisticFitOut fit_logistic(Method m, const LabeledDataset& train, const GaussianPrior& prior,
                                   const FitConfig& cfg) {
  LogisticFitOut out;
  out.record.method = m;
  out.record.seed = cfg.seed;
  try {
    const FitResult fit = m == Method::viper ? fit_viper(train, prior, cfg)
                          : m == Method::vipg ? fit_vipg(train, prior, cfg)
                                              : fit_vimc(train, prior, cfg);
    fill_fit(out.record, fit);
    out.q = fit.posterior;
  } catch (const numerical_error& e) {
    out.record.error = e.what();
    out.record.stop_reason = "error";
  }
  return out;
}

// Metrics for logistic fits of one repeat; KL against the vimc fit when present.
inline std::vector<RunRecord> logistic_metrics(std::vector<LogisticFitOut>& fits, const LabeledDataset& train,
                                               const LabeledDataset* test, const GaussianPrior& prior,
                                               const ExperimentConfig& c, std::uint64_t seed) {
  const VariationalGaussian* ref = nullptr;
  for (const auto& f : fits)
    if (f.record.method == Method::vimc && f.q) ref = &*f.q;
  std::vector<RunRecord> rows;
  for (auto& f : fits) {
    RunRecord r = f.record;
    if (f.q) {
      const auto& q = *f.q;
      const auto est = elbo_mc(train, q, prior, c.elbo_mc_samples, derive_seed(seed, kEvalStream));
      r.elbo_mc = finite(est.mean);
      r.elbo_mc_se = finite(est.std_error);
      if (ref) {
        const auto kl = kl_mc_gaussians(*ref, q);
        r.kl_mc_fwd = finite(kl.fwd);
        r.kl_mc_rev = finite(kl.rev);
      }
      const auto moments = local_moments(train, q);
      if (train.f0) {
        Eigen::VectorXd theta(train.n());
        for (Eigen::Index i = 0; i < train.n(); ++i) theta[i] = moments[static_cast<std::size_t>(i)].theta;
        r.mse = finite(mse_posterior_mean(theta, *train.f0));
        const auto cw = coverage_and_width(moments, *train.f0);
        r.coverage = cw.coverage;
        r.ci_width = finite(cw.mean_width);
      } else {
        double width = 0.0;
        for (const auto& m : moments) width += 2.0 * kZ975 * m.tau;
        r.ci_width = finite(width / static_cast<double>(moments.size()));
      }
      const LabeledDataset& scored = test ? *test : train;
      r.auc = safe_auc(scored.y, predict_proba(q, scored.X));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

struct GPFitOut {
  std::optional<SparseGPState> state;
  RunRecord record;
};

inline GPFitOut fit_gp(Method m, const LabeledDataset& train, Eigen::Index M, const GPFitConfig& cfg) {
  GPFitOut out;
  out.record.method = m;
  out.record.seed = cfg.fit.seed;
  try {
    const GPFitResult fit = m == Method::viper ? fit_viper_gp(train, M, cfg)
                            : m == Method::vipg ? fit_vipg_gp(train, M, cfg)
                                                : fit_vimc_gp(train, M, cfg);
    fill_fit(out.record, fit.fit);
    out.state = fit.state;
  } catch (const numerical_error& e) {
    out.record.error = e.what();
    out.record.stop_reason = "error";
  }
  return out;
}

// GP metrics: ELBO, KL (product of q(f) marginals on the training inputs),
// MSE / coverage / width against f0 on the training inputs, AUC on test.
inline std::vector<RunRecord> gp_metrics(std::vector<GPFitOut>& fits, const LabeledDataset& train,
                                         const LabeledDataset& test, const ExperimentConfig& c, std::uint64_t seed) {
  std::optional<std::vector<GaussianMoment>> ref;
  for (const auto& f : fits)
    if (f.record.method == Method::vimc && f.state) ref = q_f_moments(*f.state, train.X);
  std::vector<RunRecord> rows;
  for (auto& f : fits) {
    RunRecord r = f.record;
    if (f.state) {
      const auto& s = *f.state;
      const auto est = gp_elbo_mc(s, train, c.elbo_mc_samples, derive_seed(seed, kEvalStream));
      r.elbo_mc = finite(est.mean);
      r.elbo_mc_se = finite(est.std_error);
      const auto moments = q_f_moments(s, train.X);
      if (ref) {
        const auto kl = kl_marginals(*ref, moments);
        r.kl_mc_fwd = finite(kl.fwd);
        r.kl_mc_rev = finite(kl.rev);
      }
      if (train.f0) {
        Eigen::VectorXd theta(train.n());
        for (Eigen::Index i = 0; i < train.n(); ++i) theta[i] = moments[static_cast<std::size_t>(i)].theta;
        r.mse = finite(mse_posterior_mean(theta, *train.f0));
        const auto cw = coverage_and_width(moments, *train.f0);
        r.coverage = cw.coverage;
        r.ci_width = finite(cw.mean_width);
      } else {
        double width = 0.0;
        for (const auto& m : moments) width += 2.0 * kZ975 * m.tau;
        r.ci_width = finite(width / static_cast<double>(moments.size()));
      }
      r.auc = safe_auc(test.y, predict_proba_gp(s, test.X));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline GaussianPrior prior_for(const ExperimentConfig& c, Eigen::Index p) {
  GaussianPrior prior = GaussianPrior::standard(p);
  prior.S *= c.prior_variance;
  return prior;
}

inline std::vector<RunRecord> run_repeat(const ExperimentConfig& c, const LabeledDataset* file_data, int r) {
  const std::uint64_t seed = c.seed + static_cast<std::uint64_t>(r);
  switch (c.task) {
    case Task::logistic_sim: {
      LogisticSimSpec spec = c.logistic;
      spec.seed = seed;
      // the held-out rows continue the same streams, so the training rows equal gen_logistic(spec)
      spec.n = c.logistic.n + c.logistic_n_test;
      const auto sim = gen_logistic(spec);
      const LabeledDataset train = sim.data.rows(0, c.logistic.n);
      const LabeledDataset test = sim.data.rows(c.logistic.n, c.logistic_n_test);
      const GaussianPrior prior = prior_for(c, train.p());
      FitConfig cfg = c.fit;
      cfg.seed = seed;
      std::vector<LogisticFitOut> fits;
      for (Method m : c.methods) fits.push_back(fit_logistic(m, train, prior, cfg));
      return logistic_metrics(fits, train, c.logistic_n_test > 0 ? &test : nullptr, prior, c, seed);
    }
    case Task::gp_toy: {
      GPToySpec spec = c.toy;
      spec.seed = seed;
      const auto toy = gen_gp_toy(spec);
      std::vector<GPFitOut> fits;
      for (Method m : c.methods) fits.push_back(fit_gp(m, toy.train, c.inducing, c.gp_fit_config(seed)));
      return gp_metrics(fits, toy.train, toy.test, c, seed);
    }
    case Task::fit_file: {
      const auto [train, test] = train_test_split(*file_data, c.train_fraction);
      if (c.model == "gp") {
        std::vector<GPFitOut> fits;
        const Eigen::Index M = std::min<Eigen::Index>(c.inducing, train.n());
        for (Method m : c.methods) fits.push_back(fit_gp(m, train, M, c.gp_fit_config(seed)));
        return gp_metrics(fits, train, test, c, seed);
      }
      const GaussianPrior prior = prior_for(c, train.p());
      FitConfig cfg = c.fit;
      cfg.seed = seed;
      std::vector<LogisticFitOut> fits;
      for (Method m : c.methods) fits.push_back(fit_logistic(m, train, prior, cfg));
      return logistic_metrics(fits, train, &test, prior, c, seed);
    }
    case Task::bound_grid: break;
  }
  throw config_error("run_repeat: task has no repeats");
}

inline const char* kCsvHeader =
    "method,seed,status,converged,stop_reason,iterations,wall_time_s,elbo_mc,elbo_mc_se,kl_mc_fwd,kl_mc_rev,mse,"
    "coverage,ci_width,auc";

inline std::string csv_field(const std::optional<double>& v) { return v ? fmt17(*v) : ""; }

inline Report assemble(const ExperimentConfig& c, std::vector<RunRecord> rows, const json& extra, double total_s) {
  std::stable_sort(rows.begin(), rows.end(), [](const RunRecord& a, const RunRecord& b) {
    if (a.method != b.method) return a.method < b.method;
    return a.seed < b.seed;
  });
  Report rep;
  json runs = json::array();
  std::string csv = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows) {
    if (!r.error.empty() || !r.converged) rep.all_converged = false;
    json o;
    o["method"] = to_string(r.method);
    o["seed"] = r.seed;
    o["status"] = r.error.empty() ? "ok" : "error";
    o["error"] = r.error.empty() ? json(nullptr) : json(r.error);
    o["converged"] = r.converged;
    o["stop_reason"] = r.stop_reason;
    o["iterations"] = r.iterations;
    o["wall_time_s"] = r.wall_time_s;
    for (const auto& [name, field] : metric_fields()) o[name] = nullable(r.*field);
    runs.push_back(std::move(o));

    csv += std::string(to_string(r.method)) + "," + std::to_string(r.seed) + "," + (r.error.empty() ? "ok" : "error") +
           "," + (r.converged ? "true" : "false") + "," + r.stop_reason + "," + std::to_string(r.iterations) + "," +
           fmt17(r.wall_time_s);
    for (const auto& [name, field] : metric_fields()) csv += "," + csv_field(r.*field);
    csv += "\n";
  }

  json summary = json::object();
  for (Method m : c.methods) {
    json per = json::object();
    std::vector<double> iters;
    for (const auto& r : rows)
      if (r.method == m && r.error.empty()) iters.push_back(r.iterations);
    for (const auto& [name, field] : metric_fields()) {
      std::vector<double> vals;
      for (const auto& r : rows)
        if (r.method == m && (r.*field)) vals.push_back(*(r.*field));
      if (vals.empty()) {
        per[name] = nullptr;
      } else {
        const auto q = quantile_summary(vals);
        per[name] = {{"q025", q.q025}, {"median", q.median}, {"q975", q.q975}, {"n", vals.size()}};
      }
    }
    if (iters.empty()) {
      per["iterations"] = nullptr;
    } else {
      const auto q = quantile_summary(iters);
      per["iterations"] = {{"q025", q.q025}, {"median", q.median}, {"q975", q.q975}, {"n", iters.size()}};
    }
    summary[to_string(m)] = std::move(per);
  }

  rep.doc["schema_version"] = kSchemaVersion;
  rep.doc["library_version"] = kVersion;
  rep.doc["task"] = to_string(c.task);
  rep.doc["config"] = to_json(c);
  rep.doc["kl_direction"] = "kl_mc_fwd = KL(q_vimc || q_method), kl_mc_rev = KL(q_method || q_vimc)";
  for (const auto& [k, v] : extra.items()) rep.doc[k] = v;
  rep.doc["runs"] = std::move(runs);
  rep.doc["summary"] = std::move(summary);
  rep.doc["all_converged"] = rep.all_converged;
  rep.doc["total_wall_time_s"] = total_s;
  rep.csv = std::move(csv);
  return rep;
}

}  // namespace detail

/// Relative error of eta_l against the quadrature oracle for l = 1..l_max at one point.
inline std::vector<double> eta_relative_errors(const GaussianMoment& m, int l_max, double truth) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(l_max));
  double sum = partial_sum(m, 0);
  for (int k = 1; k <= 2 * l_max - 1; ++k) {
    const double a = term_a_k(m, k);
    sum += (k % 2 == 1) ? a : -a;
    if (k % 2 == 1) out.push_back(std::fabs(sum - truth) / truth);
  }
  return out;
}

inline Report run_bound_grid(const ExperimentConfig& c) {
  const auto start = std::chrono::steady_clock::now();
  const auto thetas = c.theta.values();
  const auto taus = c.tau.values();
  const int l_top = std::max(c.l_max, *std::max_element(c.l_list.begin(), c.l_list.end()));

  std::string csv = "theta,tau,quad,jj,jj_rel_err";
  for (int l : c.l_list) csv += ",eta_" + std::to_string(l) + ",rel_err_" + std::to_string(l);
  for (double t : c.thresholds) csv += ",min_l_" + detail::fmt_key(t);
  csv += "\n";

  std::vector<std::optional<int>> worst(c.thresholds.size(), 0);
  long jj_dominates = 0, eta12_below_jj = 0, points = 0;
  json rows = json::array();
  for (double theta : thetas) {
    for (double tau : taus) {
      const GaussianMoment m = make_moment(theta, tau);
      const double truth = quad_expectation(m, c.quad_nodes);
      const double jj = jj_expected_bound(m, jj_optimal_t(m));
      const double jj_err = std::fabs(jj - truth) / truth;
      const auto errs = eta_relative_errors(m, l_top, truth);
      ++points;
      if (l_top >= 12 && jj_err >= errs[11]) ++jj_dominates;
      if (eta(m, TruncationOrder(12)) <= jj + 1e-9) ++eta12_below_jj;

      json row;
      row["theta"] = theta;
      row["tau"] = tau;
      row["quad"] = truth;
      row["jj"] = jj;
      row["jj_rel_err"] = jj_err;
      csv += detail::fmt17(theta) + "," + detail::fmt17(tau) + "," + detail::fmt17(truth) + "," + detail::fmt17(jj) +
             "," + detail::fmt17(jj_err);
      json etas = json::object();
      for (int l : c.l_list) {
        const double v = eta(m, TruncationOrder(l));
        const double e = errs[static_cast<std::size_t>(l - 1)];
        etas[std::to_string(l)] = {{"eta", v}, {"rel_err", e}};
        csv += "," + detail::fmt17(v) + "," + detail::fmt17(e);
      }
      row["eta"] = std::move(etas);
      json min_l = json::object();
      for (std::size_t t = 0; t < c.thresholds.size(); ++t) {
        std::optional<int> found;
        for (int l = 1; l <= c.l_max; ++l) {
          if (errs[static_cast<std::size_t>(l - 1)] < c.thresholds[t]) {
            found = l;
            break;
          }
        }
        min_l[detail::fmt_key(c.thresholds[t])] = found ? json(*found) : json(nullptr);
        csv += "," + (found ? std::to_string(*found) : std::string());
        if (!found) {
          worst[t] = std::nullopt;
        } else if (worst[t]) {
          worst[t] = std::max(*worst[t], *found);
        }
      }
      row["min_l"] = std::move(min_l);
      rows.push_back(std::move(row));
      csv += "\n";
    }
  }
  json worst_json = json::object();
  for (std::size_t t = 0; t < c.thresholds.size(); ++t) {
    worst_json[detail::fmt_key(c.thresholds[t])] = worst[t] ? json(*worst[t]) : json(nullptr);
  }

  Report rep;
  rep.doc["schema_version"] = kSchemaVersion;
  rep.doc["library_version"] = kVersion;
  rep.doc["task"] = to_string(c.task);
  rep.doc["config"] = to_json(c);
  rep.doc["rows"] = std::move(rows);
  rep.doc["summary"] = {{"points", points},
                        {"max_min_l", worst_json},
                        {"jj_rel_err_at_least_eta12", jj_dominates},
                        {"eta12_at_most_jj", eta12_below_jj}};
  rep.doc["total_wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep.csv = std::move(csv);
  return rep;
}

/// Runs the configured task. Throws config_error / data_error for bad input.
inline Report run(const ExperimentConfig& c) {
  c.validate();
  if (c.task == Task::bound_grid) return run_bound_grid(c);
  const auto start = std::chrono::steady_clock::now();
  std::optional<LabeledDataset> file_data;
  json extra = json::object();
  if (c.task == Task::fit_file) {
    file_data = load_libsvm(c.data_path);
    const auto [train, test] = train_test_split(*file_data, c.train_fraction);
    if (train.n() < 1 || test.n() < 1) throw data_error(c.data_path + ": too few rows for the train/test split");
    extra["data"] = {{"n", file_data->n()}, {"p", file_data->p()}, {"n_train", train.n()}, {"n_test", test.n()}};
  }
  std::vector<std::vector<RunRecord>> per_repeat(static_cast<std::size_t>(c.n_repeats));
  detail::parallel_for(c.n_repeats, [&](int i) {
    per_repeat[static_cast<std::size_t>(i)] = detail::run_repeat(c, file_data ? &*file_data : nullptr, i + 1);
  });
  std::vector<RunRecord> rows;
  for (auto& v : per_repeat)
    for (auto& r : v) rows.push_back(std::move(r));
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return detail::assemble(c, std::move(rows), extra, total);
}

/// Writes the report per output_format; JSON goes to stdout when no path is set.
inline void write_report(const ExperimentConfig& c, const Report& rep, std::ostream& stdout_stream) {
  const std::string text = rep.doc.dump(2) + "\n";
  auto write_file = [](const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error(path + ": cannot open for writing");
    out << body;
    if (!out) throw data_error(path + ": write failed");
  };
  auto csv_path = [&] {
    if (c.output_format == "csv") return c.output_path;
    const auto dot = c.output_path.find_last_of('.');
    const auto slash = c.output_path.find_last_of('/');
    const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
    return (has_ext ? c.output_path.substr(0, dot) : c.output_path) + ".csv";
  };
  if (c.output_format == "json" || c.output_format == "both") {
    if (c.output_path.empty()) {
      stdout_stream << text;
    } else {
      write_file(c.output_path, text);
    }
  }
  if (c.output_format == "csv" || c.output_format == "both") write_file(csv_path(), rep.csv);
}

}  // namespace viper::experiment
