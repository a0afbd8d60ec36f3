#include <doctest.h>

#include <chrono>
#include <random>

#include "ckpm/errors.hpp"
#include "ckpm/sysid.hpp"
#include "fd_oracle.hpp"
#include "spring_oracle.hpp"
#include "sysid_oracle.hpp"

using namespace ckpm;
using namespace ckpm::testing;

namespace {

// Stable random matrix: spectral radius kept below 1 by scaling.
DenseMatrix stable_matrix(std::size_t n, std::mt19937_64& rng) {
  DenseMatrix a = random_matrix(n, n, rng);
  return (0.9 / (frobenius_norm(a) + 1e-12)) * a;
}

EmbeddingSequence linear_sequence(const DenseMatrix& k, const DenseMatrix& l, std::size_t n,
                                  std::size_t steps, std::mt19937_64& rng, double noise = 0.0) {
  const std::size_t m = k.rows() / n, lw = l.cols() / n;
  std::normal_distribution<double> eps(0.0, 1.0);
  EmbeddingSequence seq;
  seq.g.push_back(random_matrix(n, m, rng));
  for (std::size_t t = 1; t < steps; ++t) {
    DenseMatrix u = random_matrix(n, lw, rng);
    DenseMatrix next = matmul(k, flatten_objects(seq.g.back()));
    if (lw > 0) next += matmul(l, flatten_objects(u));
    for (double& v : next.data()) v += noise * eps(rng);
    seq.u.push_back(u);
    seq.g.push_back(unflatten_objects(next, n));
  }
  return seq;
}

double max_block_error(const BlockDynamics& a, const BruteForceResult& b) {
  double err = 0.0;
  for (std::size_t c = 0; c < a.K_hat.size(); ++c) {
    err = std::max(err, frobenius_norm(a.K_hat[c] - b.K_hat[c]));
    err = std::max(err, frobenius_norm(a.L_hat[c] - b.L_hat[c]));
  }
  return err;
}

Trajectory spring_episode(int n, std::uint64_t seed, int steps, bool forced) {
  EnvConfig cfg = EnvConfig::defaults(EnvKind::SpringBalls, n, seed);
  cfg.params.stiffness = 0.5;
  Environment env(cfg);
  const Policy policy = forced ? random_exploration_policy(env, seed) : zero_policy(env);
  return rollout_env(env, env.initial_state(), policy, steps);
}

}  // namespace

TEST_CASE("unstructured fit of identity transitions") {
  std::mt19937_64 rng(1);
  std::vector<EmbeddingSequence> data;
  for (int e = 0; e < 40; ++e) {
    EmbeddingSequence s;
    s.g.push_back(random_matrix(3, 2, rng));
    s.g.push_back(s.g.back());
    s.u.push_back(DenseMatrix(3, 0));
    data.push_back(s);
  }
  const BlockDynamics d = identify_unstructured(data, 1e-9);
  CHECK(frobenius_norm(d.K - DenseMatrix::identity(6)) < 1e-6);
  CHECK(d.L.cols() == 0);
}

TEST_CASE("unstructured fit recovers a known system") {
  std::mt19937_64 rng(2);
  const DenseMatrix k0 = stable_matrix(12, rng);
  const DenseMatrix l0 = random_matrix(12, 3, rng);
  const std::vector<EmbeddingSequence> data{linear_sequence(k0, l0, 3, 200, rng)};
  const BlockDynamics d = identify_unstructured(data, 1e-12);
  CHECK(frobenius_norm(d.K - k0) < 1e-6);
  CHECK(frobenius_norm(d.L - l0) < 1e-6);
}

TEST_CASE("least squares optimality against the generating system") {
  std::mt19937_64 rng(3);
  const DenseMatrix k0 = stable_matrix(6, rng);
  const DenseMatrix l0 = random_matrix(6, 2, rng);
  const std::vector<EmbeddingSequence> data{linear_sequence(k0, l0, 2, 60, rng, 0.05)};
  const double ridge = 1e-3;
  const BlockDynamics fit = identify_unstructured(data, ridge);
  BlockDynamics truth = fit;
  truth.K = k0;
  truth.L = l0;
  const double rho = ridge;
  auto objective = [&](const BlockDynamics& d) {
    const double wk = frobenius_norm(d.K), wl = frobenius_norm(d.L);
    return residual(d, data) + rho * (wk * wk + wl * wl);
  };
  CHECK(objective(fit) <= objective(truth) + 1e-12);
  CHECK(residual(fit, data) <= residual(truth, data) + rho * (std::pow(frobenius_norm(k0), 2) +
                                                              std::pow(frobenius_norm(l0), 2)));
}

TEST_CASE("structured fit of identity-observed spring balls") {
  const Trajectory traj = spring_episode(5, 11, 500, true);
  const std::vector<EmbeddingSequence> data{identity_sequence(traj)};
  const auto start = std::chrono::steady_clock::now();
  const BlockDynamics d = identify_structured(data, build_complete_graph(5), 1e-8);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const SpringBlocks oracle = spring_balls_blocks(0.5, 5, 0.01);
  CHECK(frobenius_norm(d.K_hat[0] - oracle.self) < 1e-6);
  CHECK(frobenius_norm(d.K_hat[1] - oracle.pair) < 1e-6);
  CHECK(secs < 1.0);

  const std::vector<ControlInput> controls(traj.controls.begin(), traj.controls.begin() + 100);
  const auto pred = rollout_linear(d, traj.states[0].values, controls);
  double mse = 0.0;
  for (std::size_t t = 1; t <= 100; ++t) {
    const DenseMatrix e = pred[t] - traj.states[t].values;
    mse += std::pow(frobenius_norm(e), 2) / static_cast<double>(e.size());
  }
  CHECK(mse / 100.0 < 1e-8);
}

TEST_CASE("structured fit with forces recovers the input block") {
  std::vector<EmbeddingSequence> data;
  for (std::uint64_t s = 0; s < 3; ++s) data.push_back(identity_sequence(spring_episode(4, s, 200, true)));
  const BlockDynamics d = identify_structured(data, build_complete_graph(4), 1e-10);
  const SpringBlocks oracle = spring_balls_blocks(0.5, 4, 0.01);
  CHECK(frobenius_norm(d.K_hat[0] - oracle.self) < 1e-6);
  CHECK(frobenius_norm(d.K_hat[1] - oracle.pair) < 1e-6);
  CHECK(frobenius_norm(d.L_hat[0] - spring_balls_input_block(0.01)) < 1e-6);
  CHECK(frobenius_norm(d.L_hat[1]) < 1e-6);
}

TEST_CASE("one object and one type reduces to the unstructured fit") {
  std::mt19937_64 rng(4);
  const DenseMatrix k0 = stable_matrix(3, rng);
  const DenseMatrix l0 = random_matrix(3, 2, rng);
  const std::vector<EmbeddingSequence> data{linear_sequence(k0, l0, 1, 30, rng, 0.1)};
  const BlockDynamics s = identify_structured(data, TypeMap{1, 1, {1}}, 1e-6);
  const BlockDynamics u = identify_unstructured(data, 1e-6);
  CHECK(frobenius_norm(s.K_hat[0] - u.K) < 1e-12);
  CHECK(frobenius_norm(s.L_hat[0] - u.L) < 1e-12);
  const BlockDynamics dg = identify_diag(data, 1e-6);
  CHECK(frobenius_norm(dg.K_hat[0] - u.K) < 1e-12);
}

TEST_CASE("structured fit matches the brute-force constrained oracle") {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto [data, types] = random_structured_instance(rng);
    const BlockDynamics d = identify_structured(data, types, 1e-6);
    worst = std::max(worst, max_block_error(d, brute_force_structured(data, types, 1e-6)));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("diag mode on decoupled and coupled data") {
  std::mt19937_64 rng(6);
  const DenseMatrix shared = stable_matrix(3, rng);
  const DenseMatrix shared_l = random_matrix(3, 1, rng);
  BlockDynamics truth;
  truth.mode = StructureMode::Diag;
  truth.m = 3;
  truth.l = 1;
  truth.types = diag_type_map(4);
  truth.K_hat = {shared};
  truth.L_hat = {shared_l};
  const auto mat = materialize(truth);
  const std::vector<EmbeddingSequence> decoupled{linear_sequence(mat.K, mat.L, 4, 80, rng)};
  const BlockDynamics d = identify_diag(decoupled, 1e-12);
  CHECK(frobenius_norm(d.K_hat[0] - shared) < 1e-6);
  CHECK(frobenius_norm(d.L_hat[0] - shared_l) < 1e-6);
  CHECK(d.mode == StructureMode::Diag);

  std::vector<EmbeddingSequence> coupled;
  for (std::uint64_t s = 0; s < 2; ++s) coupled.push_back(identity_sequence(spring_episode(4, s, 100, true)));
  const SceneGraph g = build_complete_graph(4);
  CHECK(residual(identify_diag(coupled, 1e-8), coupled) >
        residual(identify_structured(coupled, g, 1e-8), coupled));
}

TEST_CASE("residuals are ordered by model class") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3, m = 2;
    const DenseMatrix k0 = stable_matrix(n * m, rng);
    const DenseMatrix l0 = random_matrix(n * m, n, rng);
    const std::vector<EmbeddingSequence> data{linear_sequence(k0, l0, n, 40, rng, 0.05)};
    const SceneGraph g = build_rope_graph(3);
    const double r_none = residual(identify(StructureMode::None, data, g, 1e-9), data);
    const double r_block = residual(identify(StructureMode::Block, data, g, 1e-9), data);
    const double r_diag = residual(identify(StructureMode::Diag, data, g, 1e-9), data);
    CHECK(r_none <= r_block);
    CHECK(r_block <= r_diag);
  }
}

TEST_CASE("materialize") {
  BlockDynamics d;
  d.m = 2;
  d.l = 1;
  d.types = TypeMap{2, 1, {1, 1, 1, 1}};
  d.K_hat = {DenseMatrix{{1, 2}, {3, 4}}};
  d.L_hat = {DenseMatrix{{5}, {6}}};
  const auto mat = materialize(d);
  CHECK(mat.K == DenseMatrix{{1, 2, 1, 2}, {3, 4, 3, 4}, {1, 2, 1, 2}, {3, 4, 3, 4}});
  CHECK(mat.L == DenseMatrix{{5, 5}, {6, 6}, {5, 5}, {6, 6}});

  // Spring layout: diagonal blocks of one type, off-diagonal of another.
  const SceneGraph g = build_rope_graph(6);
  std::mt19937_64 rng(8);
  BlockDynamics r;
  r.m = 3;
  r.l = 1;
  r.types = type_map(g);
  for (int c = 0; c < g.h(); ++c) {
    r.K_hat.push_back(random_matrix(3, 3, rng));
    r.L_hat.push_back(random_matrix(3, 1, rng));
  }
  const auto big = materialize(r);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      const int c = g.sigma(i, j);
      const DenseMatrix blk = big.K.block(i * 3, j * 3, 3, 3);
      if (c == 0) {
        CHECK(max_abs(blk) == 0.0);
      } else {
        CHECK(blk == r.K_hat[static_cast<std::size_t>(c - 1)]);
      }
    }
  }
}

TEST_CASE("structured rollout agrees with the materialized product") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const SceneGraph g = build_lattice_graph(random_lattice_layout(5, static_cast<std::uint64_t>(trial)));
    BlockDynamics d;
    d.m = 3;
    d.l = 1;
    d.types = type_map(g);
    for (int c = 0; c < g.h(); ++c) {
      d.K_hat.push_back(0.3 * random_matrix(3, 3, rng));
      d.L_hat.push_back(random_matrix(3, 1, rng));
    }
    std::vector<DenseMatrix> controls;
    for (int t = 0; t < 20; ++t) controls.push_back(random_matrix(5, 1, rng));
    const DenseMatrix g1 = random_matrix(5, 3, rng);
    const auto structured = rollout_linear(d, g1, controls);
    const auto mat = materialize(d);
    DenseMatrix x = flatten_objects(g1);
    for (std::size_t t = 0; t < controls.size(); ++t) {
      x = matmul(mat.K, x) + matmul(mat.L, flatten_objects(controls[t]));
      CHECK(max_abs(flatten_objects(structured[t + 1]) - x) < 1e-12);
    }
  }
  BlockDynamics id;
  id.m = 2;
  id.l = 1;
  id.types = diag_type_map(3);
  id.K_hat = {DenseMatrix::identity(2)};
  id.L_hat = {DenseMatrix(2, 1)};
  const DenseMatrix g1 = random_matrix(3, 2, rng);
  const std::vector<DenseMatrix> u(5, random_matrix(3, 1, rng));
  for (const auto& gt : rollout_linear(id, g1, u)) CHECK(gt == g1);
  CHECK_THROWS_AS(rollout_linear(id, g1, {}), ArgumentError);
}

TEST_CASE("parameter count is independent of N") {
  std::mt19937_64 rng(10);
  for (int n : {5, 14}) {
    const SceneGraph g = build_rope_graph(n);
    EmbeddingSequence s;
    for (int t = 0; t < 30; ++t) s.g.push_back(random_matrix(static_cast<std::size_t>(n), 4, rng));
    for (int t = 0; t < 29; ++t) s.u.push_back(random_matrix(static_cast<std::size_t>(n), 1, rng));
    const std::vector<EmbeddingSequence> data{s};
    CHECK(identify_structured(data, g).parameter_count() == 10u * 4u * 5u);
  }
}

TEST_CASE("missing block types are zero and flagged") {
  std::mt19937_64 rng(11);
  EmbeddingSequence s;
  for (int t = 0; t < 20; ++t) s.g.push_back(random_matrix(3, 2, rng));
  for (int t = 0; t < 19; ++t) s.u.push_back(random_matrix(3, 1, rng));
  const std::vector<EmbeddingSequence> data{s};
  const BlockDynamics d = identify_structured(data, build_rope_graph(3));
  CHECK(d.has_warning());
  // top -> top never occurs.
  const int top_top = 3;
  CHECK(std::find(d.missing_types.begin(), d.missing_types.end(), top_top) != d.missing_types.end());
  CHECK(max_abs(d.K_hat[top_top - 1]) == 0.0);
}

TEST_CASE("degenerate data without ridge is a numerical error") {
  EmbeddingSequence s;
  for (int t = 0; t < 5; ++t) s.g.push_back(DenseMatrix(2, 2, 1.0));
  for (int t = 0; t < 4; ++t) s.u.push_back(DenseMatrix(2, 0));
  const std::vector<EmbeddingSequence> data{s};
  CHECK_THROWS_AS(identify_unstructured(data, 0.0), NumericalError);
  CHECK_THROWS_AS(identify_unstructured(data, -1.0), ArgumentError);
  CHECK_NOTHROW(identify_unstructured(data, 1e-6));
}

TEST_CASE("sequence validation") {
  EmbeddingSequence s;
  s.g = {DenseMatrix(2, 2), DenseMatrix(2, 2)};
  CHECK_THROWS_AS(s.validate(), DimensionError);
  s.u = {DenseMatrix(3, 1)};
  CHECK_THROWS_AS(s.validate(), DimensionError);
  s.u = {DenseMatrix(2, 1)};
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("json round trip") {
  std::mt19937_64 rng(12);
  auto [data, types] = random_structured_instance(rng);
  const BlockDynamics d = identify_structured(data, types);
  const nlohmann::json j = d;
  for (const char* key : {"mode", "h", "m", "l", "sigma", "K_hat", "L_hat"}) CHECK(j.contains(key));
  const auto back = j.get<BlockDynamics>();
  CHECK(back.K_hat == d.K_hat);
  CHECK(back.L_hat == d.L_hat);
  CHECK(back.types == d.types);

  const BlockDynamics u = identify_unstructured(data);
  const auto ub = nlohmann::json(u).get<BlockDynamics>();
  CHECK(ub.K == u.K);
  CHECK(ub.L == u.L);
  const nlohmann::json weird = {{"mode", "Weird"}};
  CHECK_THROWS_AS(weird.get<BlockDynamics>(), ConfigError);
}

TEST_CASE("tape identification matches the value path") {
  std::mt19937_64 rng(13);
  const SceneGraph g = build_rope_graph(4);
  const TypeMap types = type_map(g);
  EmbeddingSequence s;
  for (int t = 0; t < 12; ++t) s.g.push_back(random_matrix(4, 3, rng));
  DenseMatrix u(11 * 4, 1);
  for (int t = 0; t < 11; ++t) {
    DenseMatrix ut(4, 1);
    ut(0, 0) = std::uniform_real_distribution<double>(-1, 1)(rng);
    s.u.push_back(ut);
    u.set_block(static_cast<std::size_t>(t) * 4, 0, ut);
  }
  const std::vector<EmbeddingSequence> data{s};
  const BlockDynamics value = identify_structured(data, types, 1e-4);
  ad::Tape tape;
  const ad::Var stacked = tape.variable(vconcat(s.g));
  for (bool stop : {false, true}) {
    const BlockDynamics taped = to_block_dynamics(identify_structured_tape(stacked, u, types, 1e-4, stop));
    for (std::size_t c = 0; c < value.K_hat.size(); ++c) {
      CHECK(max_abs(taped.K_hat[c] - value.K_hat[c]) < 1e-10);
      CHECK(max_abs(taped.L_hat[c] - value.L_hat[c]) < 1e-10);
    }
  }
  const TapeDynamics td = identify_structured_tape(stacked, u, types, 1e-4);
  const ad::Var roll = rollout_tape(td, tape.constant(s.g[0]), u, 11);
  const auto ref = rollout_linear(value, s.g[0], s.u);
  for (std::size_t t = 0; t < ref.size(); ++t) {
    CHECK(max_abs(roll.value().block(t * 4, 0, 4, 3) - ref[t]) < 1e-9);
  }
}

TEST_CASE("sysid residual gradient matches finite differences") {
  std::mt19937_64 rng(14);
  for (bool with_graph : {true, false}) {
    const TypeMap types = with_graph ? type_map(build_rope_graph(3)) : diag_type_map(3);
    DenseMatrix u(5 * 3, 1);
    for (std::size_t t = 0; t < 5; ++t) u(t * 3, 0) = std::uniform_real_distribution<double>(-1, 1)(rng);
    const DenseMatrix target = random_matrix(6 * 3, 2, rng);
    auto f = [&](ad::Tape& tape, std::span<const ad::Var> in) {
      const TapeDynamics d = identify_structured_tape(in[0], u, types, 1e-3);
      ad::Var roll = rollout_tape(d, ad::slice_rows(in[0], 0, 3), u, 5);
      return ad::frobenius(roll - tape.constant(target)) + ad::sum(d.W);
    };
    const auto check = check_gradient(f, {random_matrix(6 * 3, 2, rng)});
    CHECK(check.max_rel_error < 1e-4);
  }
}

TEST_CASE("rebinding shared blocks to more objects") {
  std::mt19937_64 rng(15);
  EmbeddingSequence s;
  for (int t = 0; t < 30; ++t) s.g.push_back(random_matrix(5, 2, rng));
  for (int t = 0; t < 29; ++t) s.u.push_back(random_matrix(5, 1, rng));
  const std::vector<EmbeddingSequence> data{s};
  const BlockDynamics d = identify_structured(data, build_rope_graph(5));
  const BlockDynamics big = d.rebind(type_map(build_rope_graph(12)));
  CHECK(big.num_objects() == 12);
  CHECK(big.parameter_count() == d.parameter_count());
  CHECK(step_linear(big, random_matrix(12, 2, rng), random_matrix(12, 1, rng)).all_finite());
  CHECK_THROWS_AS(identify_unstructured(data).rebind(type_map(build_rope_graph(12))), ArgumentError);
}
