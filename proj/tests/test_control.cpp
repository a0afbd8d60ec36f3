#include <doctest.h>

#include <random>

#include "ckpm/control.hpp"
#include "ckpm/errors.hpp"
#include "fd_oracle.hpp"
#include "spring_oracle.hpp"

using namespace ckpm;
using namespace ckpm::testing;

namespace {

BlockDynamics identity_dynamics(std::size_t n, std::size_t m) {
  BlockDynamics d;
  d.m = m;
  d.l = m;
  d.types = diag_type_map(n);
  d.K_hat = {DenseMatrix::identity(m)};
  d.L_hat = {DenseMatrix::identity(m)};
  return d;
}

struct SpringSetup {
  EnvConfig config;
  BlockDynamics dyn;
};

SpringSetup spring_setup(int n) {
  EnvConfig cfg = EnvConfig::defaults(EnvKind::SpringBalls, n, 3);
  cfg.params.stiffness = 0.5;
  Environment env(cfg);
  std::vector<EmbeddingSequence> data;
  for (std::uint64_t s = 0; s < 2; ++s) {
    EnvConfig c = cfg;
    c.seed = 100 + s;
    Environment e(c);
    data.push_back(identity_sequence(rollout_env(e, e.initial_state(), random_exploration_policy(e, s), 300)));
  }
  return {cfg, identify_structured(data, build_complete_graph(n), 1e-10)};
}

// Goal reached by the true simulator under the exploration forces.
Trajectory reaching_episode(const Environment& env, const SystemState& start, int steps,
                            std::uint64_t seed) {
  return rollout_env(env, start, random_exploration_policy(env, seed), steps);
}

SystemState reachable_goal(const Environment& env, const SystemState& start, int steps,
                           std::uint64_t seed) {
  return reaching_episode(env, start, steps, seed).states.back();
}

// Objective recomputed with the full matrices in a plain loop.
double direct_objective(const ControlProblem& p, const std::vector<ControlInput>& controls) {
  const auto mat = materialize(p.dyn);
  DenseMatrix g = flatten_objects(p.g_start);
  double cost = 0.0;
  for (const auto& u : controls) {
    g = matmul(mat.K, g) + matmul(mat.L, flatten_objects(u));
    for (double v : u.data()) cost += p.action_penalty * v * v;
  }
  const DenseMatrix goal = flatten_objects(p.g_goal);
  for (std::size_t k = 0; k < g.size(); ++k) cost += (g.data()[k] - goal.data()[k]) * (g.data()[k] - goal.data()[k]);
  return cost;
}

}  // namespace

TEST_CASE("one step with identity dynamics") {
  for (double lambda : {0.0, 0.5, 2.0}) {
    const DenseMatrix goal{{1.0, -2.0}, {0.5, 3.0}};
    ControlProblem p{identity_dynamics(2, 2), DenseMatrix(2, 2), goal, 2, lambda, {}};
    const ControlSolution sol = solve_open_loop(p);
    REQUIRE(sol.controls.size() == 1);
    CHECK(max_abs(sol.controls[0] - (1.0 / (1.0 + lambda)) * goal) < 1e-14);
  }
}

TEST_CASE("exactly linear spring system reaches the goal") {
  const SpringSetup s = spring_setup(5);
  Environment env(s.config);
  const SystemState start = env.initial_state();
  const Trajectory reach = reaching_episode(env, start, 20, 77);
  const SystemState& goal = reach.states.back();
  const double lambda = 1e-6;
  ControlProblem p{s.dyn, start.values, goal.values, 20, lambda, {}};
  const ControlSolution sol = solve_open_loop(p);
  CHECK(sol.controls.size() == 19);
  // For g* = K^{T-1} g1 + M U0 the terminal error is lambda (M M^T + lambda)^{-1} M U0,
  // bounded by sqrt(lambda) ||U0|| / 2.
  double u0 = 0.0;
  for (const auto& u : reach.controls) u0 += std::pow(frobenius_norm(u), 2);
  const double bound = 0.5 * std::sqrt(lambda) * std::sqrt(u0);
  const double terminal = frobenius_norm(sol.predicted_terminal - goal.values);
  CHECK(terminal <= bound + 1e-9);

  // First-order optimality: analytic gradient and a central-difference probe.
  double grad_inf = 0.0;
  for (const auto& g : control_objective_gradient(p, sol.controls)) grad_inf = std::max(grad_inf, max_abs(g));
  CHECK(grad_inf < 1e-8);
  std::vector<ControlInput> probe = sol.controls;
  const double h = 1e-3;
  double fd_inf = 0.0;
  for (std::size_t t = 0; t < probe.size(); t += 6) {
    for (std::size_t e = 0; e < probe[t].size(); ++e) {
      const double orig = probe[t].data()[e];
      probe[t].data()[e] = orig + h;
      const double fp = direct_objective(p, probe);
      probe[t].data()[e] = orig - h;
      const double fm = direct_objective(p, probe);
      probe[t].data()[e] = orig;
      fd_inf = std::max(fd_inf, std::abs(fp - fm) / (2 * h));
    }
  }
  CHECK(fd_inf < 1e-8);

  // The controls steer the true simulator to the predicted terminal state.
  Trajectory applied = rollout_env(env, start, [&](int t, const SystemState&) { return sol.controls[static_cast<std::size_t>(t)]; }, 20);
  CHECK(frobenius_norm(applied.states.back().values - sol.predicted_terminal) < 1e-8);
}

TEST_CASE("objective consistency and no descent direction") {
  std::mt19937_64 rng(4);
  BlockDynamics d;
  d.m = 3;
  d.l = 1;
  d.types = type_map(build_rope_graph(4));
  for (int c = 0; c < 10; ++c) {
    d.K_hat.push_back(0.3 * random_matrix(3, 3, rng));
    d.L_hat.push_back(random_matrix(3, 1, rng));
  }
  ControlProblem p{d, random_matrix(4, 3, rng), random_matrix(4, 3, rng), 8, 1e-2, {true, false, true, true}};
  const ControlSolution sol = solve_open_loop(p);
  CHECK(std::abs(sol.objective_value - direct_objective(p, sol.controls)) < 1e-9);
  for (const auto& u : sol.controls) CHECK(u(1, 0) == 0.0);
  std::vector<ControlInput> probe = sol.controls;
  for (int trial = 0; trial < 50; ++trial) {
    const double step = 1e-4;
    std::vector<DenseMatrix> dir;
    for (const auto& u : sol.controls) {
      DenseMatrix r = random_matrix(u.rows(), u.cols(), rng);
      for (double& v : r.row(1)) v = 0.0;
      dir.push_back(r);
    }
    for (double sign : {1.0, -1.0}) {
      for (std::size_t t = 0; t < probe.size(); ++t) probe[t] = sol.controls[t] + (sign * step) * dir[t];
      CHECK(direct_objective(p, probe) > sol.objective_value - 1e-8);
    }
  }
}

TEST_CASE("rank-deficient problem without penalty") {
  BlockDynamics d = identity_dynamics(2, 2);
  d.L_hat = {DenseMatrix(2, 2)};
  ControlProblem p{d, DenseMatrix(2, 2), DenseMatrix(2, 2, 1.0), 3, 0.0, {}};
  CHECK_THROWS_AS(solve_open_loop(p), NumericalError);
  p.action_penalty = 1e-3;
  CHECK_NOTHROW(solve_open_loop(p));
  p.horizon = 1;
  CHECK_THROWS_AS(solve_open_loop(p), ArgumentError);
  p.horizon = 3;
  p.g_goal = DenseMatrix(3, 2);
  CHECK_THROWS_AS(solve_open_loop(p), DimensionError);
}

TEST_CASE("mpc with a long period equals one open-loop solve") {
  const SpringSetup s = spring_setup(4);
  Environment env(s.config);
  const SceneGraph g = build_complete_graph(4);
  const auto obs = make_identity_observer(4);
  const SystemState start = env.initial_state();
  const SystemState goal = reachable_goal(env, start, 16, 5);
  const MpcResult once = run_mpc(env, *obs, g, s.dyn, start, goal, {16, 100, 1e-6});
  CHECK(once.solves.size() == 1);
  const ControlSolution direct = solve_open_loop({s.dyn, start.values, goal.values, 16, 1e-6, {}});
  REQUIRE(once.trajectory.controls.size() == 15);
  for (std::size_t t = 0; t < 15; ++t) CHECK(once.trajectory.controls[t] == direct.controls[t]);

  const MpcResult fb = run_mpc(env, *obs, g, s.dyn, start, goal, {16, 4, 1e-6});
  CHECK(fb.solves.size() == 4);
  CHECK(fb.solve_steps == std::vector<int>{0, 4, 8, 12});
  const double open_cost = std::pow(frobenius_norm(once.trajectory.states.back().values - goal.values), 2);
  const double mpc_cost = std::pow(frobenius_norm(fb.trajectory.states.back().values - goal.values), 2);
  CHECK(mpc_cost <= open_cost + 1e-9);
}

TEST_CASE("evaluation protocols solve the expected number of times") {
  {
    EnvConfig cfg = EnvConfig::defaults(EnvKind::SoftLattice2D, 5, 2);
    Environment env(cfg);
    const SceneGraph g = build_graph(env);
    std::vector<EmbeddingSequence> data;
    for (std::uint64_t s = 0; s < 2; ++s) {
      data.push_back(identity_sequence(rollout_env(env, env.initial_state(), random_exploration_policy(env, s), 100)));
    }
    const BlockDynamics dyn = identify_structured(data, g);
    const auto obs = make_identity_observer(16);
    const SystemState start = env.initial_state();
    const SystemState goal = rollout_env(env, start, random_exploration_policy(env, 9), 64).states.back();
    const MpcResult r = run_mpc(env, *obs, g, dyn, start, goal, {65, 32, 1e-3});
    CHECK(r.solves.size() == 2);
    CHECK(r.trajectory.controls.size() == 64);
    CHECK(r.saturation_fraction >= 0.0);
    const auto act = env.actuated();
    for (const auto& u : r.trajectory.controls) {
      for (std::size_t j = 0; j < act.size(); ++j) {
        if (!act[j]) CHECK(u(j, 0) == 0.0);
      }
    }
  }
  {
    EnvConfig cfg = EnvConfig::defaults(EnvKind::Rope2D, 5, 2);
    Environment env(cfg);
    const SceneGraph g = build_graph(env);
    const std::vector<EmbeddingSequence> data{identity_sequence(
        rollout_env(env, env.initial_state(), random_exploration_policy(env, 1), 100))};
    const BlockDynamics dyn = identify_structured(data, g);
    const auto obs = make_identity_observer(4);
    const SystemState start = env.initial_state();
    const MpcResult r = run_mpc(env, *obs, g, dyn, start, start, {41, 40, 1e-3});
    CHECK(r.solves.size() == 1);
    CHECK(r.trajectory.controls.size() == 40);
  }
}

TEST_CASE("control error") {
  std::mt19937_64 rng(6);
  const DenseMatrix a = random_matrix(5, 4, rng);
  CHECK(control_error(a, a) == 0.0);
  DenseMatrix shifted = a;
  for (double& v : shifted.data()) v += 0.3;
  CHECK(control_error(shifted, a) == doctest::Approx(0.09).epsilon(1e-12));
  const DenseMatrix b = random_matrix(5, 4, rng);
  double s = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
  }
  CHECK(std::abs(control_error(a, b) - s / 20.0) < 1e-12);
  CHECK_THROWS_AS(control_error(a, DenseMatrix(4, 4)), DimensionError);
}
