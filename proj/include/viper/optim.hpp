#pragma once

// Maximizers shared by the logistic and GP fits.
//
// The objective is a callable  double f(const VectorXd& x, VectorXd* grad)
// that returns the value and, if grad is non-null, writes the gradient. It
// throws numerical_error when x lies outside the parameter domain (for example
// a non-positive Cholesky diagonal); the line search treats that, and any
// non-finite value, as a rejected trial point.
//
// Trace convention: one entry per accepted step, holding the objective after
// the step. Stopping: |F_t - F_{t-1}| / |F_{t-1}| < rel_tol, F_0 being the
// value at the initial point.

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "viper/errors.hpp"

namespace viper {

enum class OptimizerKind { lbfgs, gradient };

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::lbfgs;
  double step_size = 0.05;  // initial step for plain gradient ascent
  int max_iters = 2000;
  double rel_tol = 1e-7;
  int history = 10;  // L-BFGS memory
  int max_halvings = 60;
};

struct StochasticOptions {
  double ema_decay = 0.9;
  int average_window = 100;  // tail average of iterates returned
  int min_iters = 20;        // no stopping before this many steps
};

enum class StopReason { converged, max_iters, line_search_failed, not_started };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::converged: return "converged";
    case StopReason::max_iters: return "max_iters";
    case StopReason::line_search_failed: return "line_search_failed";
    case StopReason::not_started: return "not_started";
  }
  return "unknown";
}

struct OptimizerResult {
  Eigen::VectorXd x;
  std::vector<double> trace;
  bool converged = false;
  StopReason reason = StopReason::not_started;
  double value = 0.0;  // objective at x (for the stochastic variant: last batch value)
};

namespace detail {

template <class Fn>
bool try_eval(Fn& f, const Eigen::VectorXd& x, double& value, Eigen::VectorXd* grad) {
  try {
    value = f(x, grad);
  } catch (const numerical_error&) {
    return false;
  }
  if (!std::isfinite(value)) return false;
  if (grad && !grad->allFinite()) return false;
  return true;
}

class LbfgsMemory {
 public:
  explicit LbfgsMemory(int size) : size_(size) {}

  void clear() {
    s_.clear();
    y_.clear();
  }
  bool empty() const { return s_.empty(); }

  // Pairs for the minimization of -F: s = x_new - x_old, y = g_old - g_new.
  void push(const Eigen::VectorXd& s, const Eigen::VectorXd& y) {
    const double sy = s.dot(y);
    if (!(sy > 1e-12 * s.norm() * y.norm())) return;  // skip non-convex pairs
    s_.push_back(s);
    y_.push_back(y);
    if (static_cast<int>(s_.size()) > size_) {
      s_.pop_front();
      y_.pop_front();
    }
  }

  // Ascent direction H g.
  Eigen::VectorXd direction(const Eigen::VectorXd& g) const {
    Eigen::VectorXd q = g;
    const auto m = s_.size();
    std::vector<double> alpha(m), rho(m);
    for (std::size_t i = m; i-- > 0;) {
      rho[i] = 1.0 / s_[i].dot(y_[i]);
      alpha[i] = rho[i] * s_[i].dot(q);
      q -= alpha[i] * y_[i];
    }
    const double gamma = s_.back().dot(y_.back()) / y_.back().squaredNorm();
    q *= gamma;
    for (std::size_t i = 0; i < m; ++i) {
      const double beta = rho[i] * y_[i].dot(q);
      q += (alpha[i] - beta) * s_[i];
    }
    return q;
  }

 private:
  int size_;
  std::deque<Eigen::VectorXd> s_, y_;
};

struct StepOutcome {
  bool accepted = false;
  Eigen::VectorXd x;
  Eigen::VectorXd grad;
  double value = 0.0;
};

// Backtracking (Armijo, c = 1e-4) along d from x. Gradients are evaluated at
// every trial so an accepted point comes with its gradient.
template <class Fn>
StepOutcome backtrack(Fn& f, const Eigen::VectorXd& x, double fx, const Eigen::VectorXd& g, const Eigen::VectorXd& d,
                      double alpha, int max_halvings) {
  StepOutcome out;
  const double slope = g.dot(d);
  out.grad.resize(x.size());
  for (int h = 0; h <= max_halvings; ++h, alpha *= 0.5) {
    Eigen::VectorXd trial = x + alpha * d;
    double value = 0.0;
    if (!try_eval(f, trial, value, &out.grad)) continue;
    if (value >= fx + 1e-4 * alpha * slope) {
      out.accepted = true;
      out.x = std::move(trial);
      out.value = value;
      return out;
    }
  }
  return out;
}

inline bool relative_change_below(double now, double before, double tol) {
  const double denom = std::fabs(before);
  if (denom == 0.0) return std::fabs(now - before) < tol;
  return std::fabs(now - before) / denom < tol;
}

}  // namespace detail

/// Deterministic maximization (L-BFGS or gradient ascent, both with backtracking).
template <class Fn>
OptimizerResult maximize(Fn&& f, Eigen::VectorXd x, const OptimizerOptions& opt) {
  OptimizerResult res;
  Eigen::VectorXd g(x.size());
  double fx = 0.0;
  if (!detail::try_eval(f, x, fx, &g)) {
    throw numerical_error("optimizer: objective not finite at the initial point (iteration 0)");
  }
  res.value = fx;
  if (opt.max_iters <= 0) {
    res.x = std::move(x);
    return res;
  }
  detail::LbfgsMemory memory(opt.history);
  const bool lbfgs = opt.kind == OptimizerKind::lbfgs;
  for (int it = 1; it <= opt.max_iters; ++it) {
    Eigen::VectorXd d;
    double alpha = opt.step_size;
    if (lbfgs && !memory.empty()) {
      d = memory.direction(g);
      alpha = 1.0;
      if (!(g.dot(d) > 0.0)) {
        memory.clear();
        d = g;
        alpha = opt.step_size / std::max(1.0, g.norm());
      }
    } else {
      d = g;
      if (lbfgs) alpha = opt.step_size / std::max(1.0, g.norm());
    }
    auto step = detail::backtrack(f, x, fx, g, d, alpha, opt.max_halvings);
    if (!step.accepted && lbfgs && !memory.empty()) {
      memory.clear();
      step = detail::backtrack(f, x, fx, g, g, opt.step_size / std::max(1.0, g.norm()), opt.max_halvings);
    }
    if (!step.accepted) {
      res.reason = StopReason::line_search_failed;
      break;
    }
    if (lbfgs) memory.push(step.x - x, g - step.grad);
    const double before = fx;
    x = std::move(step.x);
    g = std::move(step.grad);
    fx = step.value;
    res.trace.push_back(fx);
    if (detail::relative_change_below(fx, before, opt.rel_tol)) {
      res.converged = true;
      res.reason = StopReason::converged;
      break;
    }
    if (it == opt.max_iters) res.reason = StopReason::max_iters;
  }
  res.x = std::move(x);
  res.value = fx;
  return res;
}

/// Maximization of a noisy objective. resample() draws a fresh batch before
/// each iteration; within an iteration the batch is fixed, so the line search
/// and the L-BFGS curvature pair both use one deterministic function. Stops
/// when the exponential moving average of the batch values changes by less
/// than rel_tol (relative) and returns the mean of the last average_window
/// iterates.
template <class Fn, class Resample>
OptimizerResult maximize_stochastic(Fn&& f, Resample&& resample, Eigen::VectorXd x, const OptimizerOptions& opt,
                                    const StochasticOptions& sopt) {
  OptimizerResult res;
  if (opt.max_iters <= 0) {
    res.x = std::move(x);
    return res;
  }
  detail::LbfgsMemory memory(opt.history);
  const bool lbfgs = opt.kind == OptimizerKind::lbfgs;
  std::deque<Eigen::VectorXd> tail;
  Eigen::VectorXd g(x.size());
  double ema = 0.0;
  int failures = 0;
  for (int it = 1; it <= opt.max_iters; ++it) {
    resample();
    double fx = 0.0;
    if (!detail::try_eval(f, x, fx, &g)) {
      throw numerical_error("optimizer: objective not finite at iteration " + std::to_string(it - 1));
    }
    if (it == 1) ema = fx;
    Eigen::VectorXd d = g;
    double alpha = lbfgs ? opt.step_size / std::max(1.0, g.norm()) : opt.step_size;
    if (lbfgs && !memory.empty()) {
      Eigen::VectorXd h = memory.direction(g);
      if (g.dot(h) > 0.0) {
        d = std::move(h);
        alpha = 1.0;
      } else {
        memory.clear();
      }
    }
    auto step = detail::backtrack(f, x, fx, g, d, alpha, opt.max_halvings);
    if (step.accepted) {
      if (lbfgs) memory.push(step.x - x, g - step.grad);
      x = std::move(step.x);
      fx = step.value;
      failures = 0;
    } else {
      memory.clear();
      if (++failures >= 5) {
        res.reason = StopReason::line_search_failed;
        break;
      }
    }
    res.trace.push_back(fx);
    tail.push_back(x);
    if (static_cast<int>(tail.size()) > sopt.average_window) tail.pop_front();
    const double before = ema;
    ema = sopt.ema_decay * ema + (1.0 - sopt.ema_decay) * fx;
    if (it >= sopt.min_iters && detail::relative_change_below(ema, before, opt.rel_tol)) {
      res.converged = true;
      res.reason = StopReason::converged;
      break;
    }
    if (it == opt.max_iters) res.reason = StopReason::max_iters;
  }
  if (tail.empty()) {
    res.x = std::move(x);
  } else {
    res.x = Eigen::VectorXd::Zero(x.size());
    for (const auto& v : tail) res.x += v;
    res.x /= static_cast<double>(tail.size());
  }
  res.value = res.trace.empty() ? 0.0 : res.trace.back();
  return res;
}

}  // namespace viper
