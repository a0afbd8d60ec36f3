#include "ckpm/control.hpp"

#include <algorithm>
#include <cmath>

#include "ckpm/errors.hpp"

namespace ckpm {

namespace {

std::vector<std::size_t> actuated_objects(const ControlProblem& p, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < n; ++j) {
    if (p.actuation_mask.empty() || p.actuation_mask[j]) out.push_back(j);
  }
  return out;
}

double squared_norm(const DenseMatrix& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return s;
}

}  // namespace

void ControlProblem::validate() const {
  const std::size_t n = dyn.num_objects();
  if (horizon < 2) throw ArgumentError("control horizon must cover at least one action");
  if (!(action_penalty >= 0.0)) throw ArgumentError("action penalty must be non-negative");
  if (dyn.l == 0) throw ArgumentError("dynamics have no control input");
  if (g_start.rows() != n || g_start.cols() != dyn.m) {
    throw DimensionError("start embedding " + g_start.shape_string() + " does not match the dynamics");
  }
  if (g_goal.rows() != n || g_goal.cols() != dyn.m) {
    throw DimensionError("goal embedding " + g_goal.shape_string() + " does not match the dynamics");
  }
  if (!actuation_mask.empty() && actuation_mask.size() != n) {
    throw DimensionError("actuation mask has " + std::to_string(actuation_mask.size()) +
                         " entries for " + std::to_string(n) + " objects");
  }
}

ControlSolution solve_open_loop(const ControlProblem& p) {
  p.validate();
  const std::size_t n = p.dyn.num_objects(), m = p.dyn.m, l = p.dyn.l;
  const std::size_t steps = static_cast<std::size_t>(p.horizon) - 1;
  const std::vector<std::size_t> act = actuated_objects(p, n);
  const std::size_t per_step = act.size() * l;
  const auto mat = materialize(p.dyn);

  // Columns of L that belong to actuated objects.
  DenseMatrix l_act(n * m, per_step);
  for (std::size_t k = 0; k < act.size(); ++k) {
    l_act.set_block(0, k * l, mat.L.block(0, act[k] * l, n * m, l));
  }
  // M_s = K^{steps-1-s} L_act, built from the last step backwards.
  DenseMatrix big_m(n * m, steps * per_step);
  DenseMatrix power_l = l_act;
  for (std::size_t s = steps; s-- > 0;) {
    big_m.set_block(0, s * per_step, power_l);
    if (s > 0) power_l = matmul(mat.K, power_l);
  }
  DenseMatrix free = flatten_objects(p.g_start);
  for (std::size_t s = 0; s < steps; ++s) free = matmul(mat.K, free);
  const DenseMatrix rhs = matmul_tn(big_m, flatten_objects(p.g_goal) - free);
  DenseMatrix gram = matmul_tn(big_m, big_m);
  for (std::size_t k = 0; k < gram.rows(); ++k) gram(k, k) += p.action_penalty;

  DenseMatrix u_stack;
  try {
    u_stack = Cholesky(gram).solve(rhs);
  } catch (const NotPositiveDefiniteError& e) {
    throw NumericalError(std::string("control normal equations are singular (") + e.what() +
                         "); use an action penalty lambda > 0");
  }

  ControlSolution sol;
  for (std::size_t s = 0; s < steps; ++s) {
    ControlInput u(n, l);
    for (std::size_t k = 0; k < act.size(); ++k) {
      for (std::size_t q = 0; q < l; ++q) u(act[k], q) = u_stack(s * per_step + k * l + q, 0);
    }
    sol.controls.push_back(std::move(u));
  }
  const auto roll = rollout_linear(p.dyn, p.g_start, sol.controls);
  sol.predicted_terminal = roll.back();
  sol.objective_value = control_objective(p, sol.controls);
  return sol;
}

double control_objective(const ControlProblem& p, std::span<const ControlInput> controls) {
  p.validate();
  if (controls.size() + 1 != static_cast<std::size_t>(p.horizon)) {
    throw DimensionError("expected " + std::to_string(p.horizon - 1) + " actions, got " +
                         std::to_string(controls.size()));
  }
  const auto roll = rollout_linear(p.dyn, p.g_start, controls);
  double cost = squared_norm(roll.back() - p.g_goal);
  for (const auto& u : controls) cost += p.action_penalty * squared_norm(u);
  return cost;
}

std::vector<DenseMatrix> control_objective_gradient(const ControlProblem& p,
                                                    std::span<const ControlInput> controls) {
  p.validate();
  const std::size_t n = p.dyn.num_objects();
  const auto roll = rollout_linear(p.dyn, p.g_start, controls);
  const auto mat = materialize(p.dyn);
  const std::vector<std::size_t> act = actuated_objects(p, n);
  // Adjoint of g^{t+1}, starting from the terminal error.
  DenseMatrix adj = 2.0 * flatten_objects(roll.back() - p.g_goal);
  std::vector<DenseMatrix> grad(controls.size());
  for (std::size_t s = controls.size(); s-- > 0;) {
    DenseMatrix gu = unflatten_objects(matmul_tn(mat.L, adj), n);
    gu += (2.0 * p.action_penalty) * controls[s];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::find(act.begin(), act.end(), j) == act.end()) {
        for (double& v : gu.row(j)) v = 0.0;
      }
    }
    grad[s] = std::move(gu);
    adj = matmul_tn(mat.K, adj);
  }
  return grad;
}

MpcResult run_mpc(const Environment& env, const Observer& observer, const SceneGraph& graph,
                  const BlockDynamics& dyn, const SystemState& start, const SystemState& goal,
                  const MpcOptions& options) {
  if (options.feedback_period < 1) throw ArgumentError("feedback period must be at least 1");
  if (options.horizon < 2) throw ArgumentError("control horizon must cover at least one action");
  if (!(options.action_scale > 0.0)) throw ArgumentError("action scale must be positive");
  const std::vector<bool> mask = env.actuated();
  const Embedding g_goal = observer.observe(graph, goal);
  const double bound = env.config().params.action_bound;

  MpcResult out;
  out.trajectory.config = env.config();
  out.trajectory.states.push_back(start);
  const int last = options.horizon - 1;
  std::size_t applied = 0, saturated = 0;
  int t = 0;
  while (t < last) {
    ControlProblem problem{dyn, observer.observe(graph, out.trajectory.states.back()), g_goal,
                           options.horizon - t, options.action_penalty, mask};
    ControlSolution sol = solve_open_loop(problem);
    const int run = std::min(options.feedback_period, last - t);
    for (int k = 0; k < run; ++k) {
      const ControlInput u = options.action_scale * sol.controls[static_cast<std::size_t>(k)];
      for (std::size_t j = 0; j < u.rows(); ++j) {
        if (!mask[j]) continue;
        for (double v : u.row(j)) {
          ++applied;
          saturated += std::abs(v) > bound;
        }
      }
      try {
        out.trajectory.states.push_back(env.step(out.trajectory.states.back(), u));
      } catch (const InstabilityError& e) {
        throw InstabilityError(std::string("MPC rollout diverged at step ") +
                                   std::to_string(t + k) + ": " + e.what(),
                               t + k);
      }
      out.trajectory.controls.push_back(u);
    }
    out.solve_steps.push_back(t);
    out.solves.push_back(std::move(sol));
    t += run;
  }
  out.saturation_fraction = applied == 0 ? 0.0 : static_cast<double>(saturated) / static_cast<double>(applied);
  return out;
}

double control_error(const DenseMatrix& achieved, const DenseMatrix& goal) {
  require_same_shape(achieved, goal, "control_error");
  if (achieved.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < achieved.size(); ++k) {
    const double d = achieved.data()[k] - goal.data()[k];
    s += d * d;
  }
  return s / static_cast<double>(achieved.size());
}

double control_error(const SystemState& achieved, const SystemState& goal) {
  return control_error(achieved.values, goal.values);
}

}  // namespace ckpm
