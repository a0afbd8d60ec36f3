#pragma once

// Control synthesis over identified linear embedding dynamics.
//
// The open-loop problem over T states (T-1 actions) is
//   min_U  ||g^T - g*||^2 + lambda * sum_t ||u^t||^2
// subject to g^{t+1} = K g^t + L u^t. Eliminating states gives
//   g^T = K^{T-1} g^1 + sum_s K^{T-1-s} L u^s = K^{T-1} g^1 + M U
// and the normal equations (M^T M + lambda I) U = M^T (g* - K^{T-1} g^1).

#include <cstddef>
#include <span>
#include <vector>

#include "ckpm/embeddings.hpp"
#include "ckpm/envs.hpp"
#include "ckpm/scene_graph.hpp"
#include "ckpm/sysid.hpp"

namespace ckpm {

inline constexpr double kDefaultActionPenalty = 1e-3;

struct ControlProblem {
  BlockDynamics dyn;
  Embedding g_start;
  Embedding g_goal;
  int horizon = 2;  // number of states, T - 1 actions
  double action_penalty = kDefaultActionPenalty;
  std::vector<bool> actuation_mask;  // empty: every object is actuated

  // Throws DimensionError / ArgumentError.
  void validate() const;
};

struct ControlSolution {
  std::vector<ControlInput> controls;  // T - 1 entries, N x l
  Embedding predicted_terminal;
  double objective_value = 0.0;
};

ControlSolution solve_open_loop(const ControlProblem& problem);

// Cost recomputed from controls through rollout_linear.
double control_objective(const ControlProblem& problem, std::span<const ControlInput> controls);
// Gradient of the objective with respect to every control entry, obtained by
// propagating the terminal error backwards through K^T.
std::vector<DenseMatrix> control_objective_gradient(const ControlProblem& problem,
                                                    std::span<const ControlInput> controls);

struct MpcResult {
  Trajectory trajectory;
  std::vector<ControlSolution> solves;
  std::vector<int> solve_steps;       // step index at which each solve happened
  double saturation_fraction = 0.0;   // applied entries with |u| > action_bound
};

struct MpcOptions {
  int horizon = 64;
  int feedback_period = 32;
  double action_penalty = kDefaultActionPenalty;
  // Simulator action = action_scale * model action.
  double action_scale = 1.0;
};

// Encodes the true state every feedback_period steps, re-solves the open-loop
// problem for the remaining horizon and applies the next actions to the
// simulator. A period >= horizon is a single open-loop solve.
MpcResult run_mpc(const Environment& env, const Observer& observer, const SceneGraph& graph,
                  const BlockDynamics& dyn, const SystemState& start, const SystemState& goal,
                  const MpcOptions& options);

// Mean over all N*d entries of the squared difference.
double control_error(const SystemState& achieved, const SystemState& goal);
double control_error(const DenseMatrix& achieved, const DenseMatrix& goal);

}  // namespace ckpm
