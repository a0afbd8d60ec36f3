#include "ckpm/envs.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#include "ckpm/errors.hpp"

namespace ckpm {

std::string_view to_string(QuadKind kind) {
  switch (kind) {
    case QuadKind::Rigid: return "rigid";
    case QuadKind::Soft: return "soft";
    case QuadKind::Actuated: return "actuated";
    case QuadKind::Fixed: return "fixed";
  }
  return "unknown";
}

std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::SpringBalls: return "SpringBalls";
    case EnvKind::Rope2D: return "Rope2D";
    case EnvKind::SoftLattice2D: return "SoftLattice2D";
  }
  return "unknown";
}

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "SpringBalls") return EnvKind::SpringBalls;
  if (name == "Rope2D") return EnvKind::Rope2D;
  if (name == "SoftLattice2D") return EnvKind::SoftLattice2D;
  throw ConfigError("unknown env_kind '" + name + "'");
}

int state_dim(EnvKind kind) { return kind == EnvKind::SoftLattice2D ? 16 : 4; }
int action_dim(EnvKind kind) { return kind == EnvKind::SpringBalls ? 2 : 1; }

void EnvConfig::validate() const {
  if (num_objects < 2 || num_objects > 64) {
    throw ConfigError("num_objects must be in [2, 64], got " + std::to_string(num_objects));
  }
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(params.stiffness > 0.0)) throw ConfigError("stiffness must be positive");
  if (!(params.mass > 0.0)) throw ConfigError("mass must be positive");
  if (params.damping < 0.0) throw ConfigError("damping must be non-negative");
  if (params.action_bound < 0.0) throw ConfigError("action_bound must be non-negative");
}

EnvConfig EnvConfig::defaults(EnvKind kind, int num_objects, std::uint64_t seed) {
  EnvConfig c;
  c.env_kind = kind;
  c.num_objects = num_objects;
  c.dt = 0.01;
  c.seed = seed;
  switch (kind) {
    case EnvKind::SpringBalls:
      c.params = {0.5, 0.0, 1.0, 0.0, 1.0};
      break;
    case EnvKind::Rope2D:
      c.params = {400.0, 0.5, 1.0, 9.8, 60.0};
      break;
    case EnvKind::SoftLattice2D:
      c.params = {50.0, 1.0, 0.2, 9.8, 3.0};
      break;
  }
  return c;
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{{"env_kind", to_string(c.env_kind)},
                     {"num_objects", c.num_objects},
                     {"dt", c.dt},
                     {"seed", c.seed},
                     {"params",
                      {{"stiffness", c.params.stiffness},
                       {"damping", c.params.damping},
                       {"mass", c.params.mass},
                       {"gravity", c.params.gravity},
                       {"action_bound", c.params.action_bound}}}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  try {
    const EnvKind kind = env_kind_from_string(j.at("env_kind").get<std::string>());
    EnvConfig d = EnvConfig::defaults(kind, j.at("num_objects").get<int>());
    d.dt = j.value("dt", d.dt);
    d.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("params")) {
      const auto& p = j.at("params");
      d.params.stiffness = p.value("stiffness", d.params.stiffness);
      d.params.damping = p.value("damping", d.params.damping);
      d.params.mass = p.value("mass", d.params.mass);
      d.params.gravity = p.value("gravity", d.params.gravity);
      d.params.action_bound = p.value("action_bound", d.params.action_bound);
    }
    c = d;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid EnvConfig JSON: ") + e.what());
  }
}

namespace {

void require_finite(const SystemState& s, const char* env) {
  if (!s.values.all_finite()) {
    throw InstabilityError(std::string(env) + ": non-finite state after step", -1);
  }
}

void require_shape(const SystemState& s, int d, const char* env) {
  if (s.per_object_dim() != static_cast<std::size_t>(d)) {
    throw DimensionError(std::string(env) + ": expected per-object dim " + std::to_string(d) +
                         ", got " + std::to_string(s.per_object_dim()));
  }
}

struct Spring {
  std::size_t a, b;
  double rest, k;
};

// Adds the force of a linear spring between points a and b.
void apply_spring(const std::vector<double>& px, const std::vector<double>& py, const Spring& s,
                  std::vector<double>& fx, std::vector<double>& fy) {
  const double dx = px[s.b] - px[s.a];
  const double dy = py[s.b] - py[s.a];
  const double len = std::sqrt(dx * dx + dy * dy);
  if (len == 0.0) return;
  const double f = s.k * (len - s.rest) / len;
  fx[s.a] += f * dx;
  fy[s.a] += f * dy;
  fx[s.b] -= f * dx;
  fy[s.b] -= f * dy;
}

// ---- rope ----------------------------------------------------------------

std::vector<Spring> rope_springs(std::size_t n, double k) {
  std::vector<Spring> springs;
  for (std::size_t i = 0; i + 1 < n; ++i) springs.push_back({i, i + 1, kRopeRestLength, k});
  for (std::size_t i = 0; i + 2 < n; ++i) {
    springs.push_back({i, i + 2, 2.0 * kRopeRestLength, kRopeBendingRatio * k});
  }
  return springs;
}

SystemState rope_step_impl(const SystemState& state, double force, const EnvConfig& cfg,
                           double damping) {
  const std::size_t n = state.num_objects();
  const auto& p = cfg.params;
  std::vector<double> px(n), py(n), fx(n, 0.0), fy(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = state.values(i, 0);
    py[i] = state.values(i, 1);
  }
  for (const Spring& s : rope_springs(n, p.stiffness)) apply_spring(px, py, s, fx, fy);
  SystemState next = state;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = state.values(i, 2), vy = state.values(i, 3);
    double ax = fx[i] / p.mass - damping * vx;
    double ay = fy[i] / p.mass - damping * vy - p.gravity;
    if (i == 0) {
      ax += force / p.mass;
      ay = 0.0;
    }
    const double nvx = vx + cfg.dt * ax;
    const double nvy = i == 0 ? 0.0 : vy + cfg.dt * ay;
    next.values(i, 0) = px[i] + cfg.dt * nvx;
    next.values(i, 1) = i == 0 ? py[i] : py[i] + cfg.dt * nvy;
    next.values(i, 2) = nvx;
    next.values(i, 3) = nvy;
  }
  return next;
}

// ---- lattice -------------------------------------------------------------

struct LatticeMesh {
  std::vector<std::pair<int, int>> vertices;              // grid coordinates
  std::vector<std::array<std::size_t, 4>> quad_corners;   // BL, BR, TR, TL
  std::vector<bool> pinned;
  // Owner (quad, corner) that carries the canonical copy of each vertex.
  std::vector<std::pair<std::size_t, int>> owner;
};

LatticeMesh build_mesh(const LatticeLayout& layout) {
  LatticeMesh mesh;
  std::map<std::pair<int, int>, std::size_t> index;
  static constexpr int dc[4] = {0, 1, 1, 0};
  static constexpr int dr[4] = {0, 0, 1, 1};
  for (std::size_t q = 0; q < layout.size(); ++q) {
    std::array<std::size_t, 4> corners{};
    for (int c = 0; c < 4; ++c) {
      const std::pair<int, int> key{layout[q].col + dc[c], layout[q].row + dr[c]};
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, mesh.vertices.size()).first;
        mesh.vertices.push_back(key);
        mesh.pinned.push_back(false);
        mesh.owner.emplace_back(q, c);
      }
      corners[c] = it->second;
      if (layout[q].kind == QuadKind::Fixed) mesh.pinned[it->second] = true;
    }
    mesh.quad_corners.push_back(corners);
  }
  return mesh;
}

double quad_stiffness_factor(QuadKind kind) {
  return kind == QuadKind::Rigid || kind == QuadKind::Fixed ? kLatticeRigidFactor : 1.0;
}

}  // namespace

SystemState spring_balls_step(const SystemState& state, const EnvConfig& config,
                              const ControlInput* u) {
  require_shape(state, 4, "SpringBalls");
  const std::size_t n = state.num_objects();
  if (u != nullptr && (u->rows() != n || u->cols() != 2)) {
    throw DimensionError("SpringBalls: control must be " + std::to_string(n) + "x2, got " +
                         u->shape_string());
  }
  const auto& p = config.params;
  std::vector<double> ax(n, 0.0), ay(n, 0.0);
  // Pairwise forces are applied with opposite signs so internal forces cancel.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double fx = p.stiffness * (state.values(j, 0) - state.values(i, 0));
      const double fy = p.stiffness * (state.values(j, 1) - state.values(i, 1));
      ax[i] += fx;
      ay[i] += fy;
      ax[j] -= fx;
      ay[j] -= fy;
    }
  }
  SystemState next = state;
  for (std::size_t i = 0; i < n; ++i) {
    double fx = ax[i], fy = ay[i];
    if (u != nullptr) {
      fx += (*u)(i, 0);
      fy += (*u)(i, 1);
    }
    const double vx = state.values(i, 2) + config.dt * (fx / p.mass - p.damping * state.values(i, 2));
    const double vy = state.values(i, 3) +
                      config.dt * (fy / p.mass - p.damping * state.values(i, 3) - p.gravity);
    next.values(i, 0) = state.values(i, 0) + config.dt * vx;
    next.values(i, 1) = state.values(i, 1) + config.dt * vy;
    next.values(i, 2) = vx;
    next.values(i, 3) = vy;
  }
  require_finite(next, "SpringBalls");
  return next;
}

SystemState rope_step(const SystemState& state, const ControlInput& u, const EnvConfig& config) {
  require_shape(state, 4, "Rope2D");
  if (u.rows() != state.num_objects() || u.cols() != 1) {
    throw DimensionError("Rope2D: control must be " + std::to_string(state.num_objects()) +
                         "x1, got " + u.shape_string());
  }
  SystemState next = rope_step_impl(state, u(0, 0), config, config.params.damping);
  require_finite(next, "Rope2D");
  return next;
}

SystemState soft_lattice_step(const SystemState& state, const ControlInput& u,
                              const EnvConfig& config, const LatticeLayout& layout) {
  require_shape(state, 16, "SoftLattice2D");
  const std::size_t nq = layout.size();
  if (state.num_objects() != nq) {
    throw DimensionError("SoftLattice2D: state has " + std::to_string(state.num_objects()) +
                         " quads, layout has " + std::to_string(nq));
  }
  if (u.rows() != nq || u.cols() != 1) {
    throw DimensionError("SoftLattice2D: control must be " + std::to_string(nq) + "x1, got " +
                         u.shape_string());
  }
  const auto& p = config.params;
  const LatticeMesh mesh = build_mesh(layout);
  const std::size_t nv = mesh.vertices.size();

  SystemState next = state;
  if (next.actuation.size() != nq) next.actuation.assign(nq, 1.0);
  for (std::size_t q = 0; q < nq; ++q) {
    if (layout[q].kind != QuadKind::Actuated) continue;
    next.actuation[q] =
        std::clamp(next.actuation[q] + config.dt * u(q, 0), kActuationMin, kActuationMax);
  }

  std::vector<double> px(nv), py(nv), vx(nv), vy(nv), fx(nv, 0.0), fy(nv, 0.0);
  for (std::size_t v = 0; v < nv; ++v) {
    const auto [q, c] = mesh.owner[v];
    px[v] = state.values(q, 4 * c + 0);
    py[v] = state.values(q, 4 * c + 1);
    vx[v] = state.values(q, 4 * c + 2);
    vy[v] = state.values(q, 4 * c + 3);
  }
  static constexpr int edges[6][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {0, 2}, {1, 3}};
  for (std::size_t q = 0; q < nq; ++q) {
    const double k = p.stiffness * quad_stiffness_factor(layout[q].kind);
    const double scale = next.actuation[q];
    for (int e = 0; e < 6; ++e) {
      const double rest = (e < 4 ? 1.0 : std::sqrt(2.0)) * scale;
      apply_spring(px, py, Spring{mesh.quad_corners[q][edges[e][0]],
                                  mesh.quad_corners[q][edges[e][1]], rest, k},
                   fx, fy);
    }
  }
  for (std::size_t v = 0; v < nv; ++v) {
    if (mesh.pinned[v]) {
      vx[v] = vy[v] = 0.0;
      continue;
    }
    vx[v] += config.dt * (fx[v] / p.mass - p.damping * vx[v]);
    vy[v] += config.dt * (fy[v] / p.mass - p.damping * vy[v] - p.gravity);
    px[v] += config.dt * vx[v];
    py[v] += config.dt * vy[v];
  }
  for (std::size_t q = 0; q < nq; ++q) {
    for (int c = 0; c < 4; ++c) {
      const std::size_t v = mesh.quad_corners[q][c];
      next.values(q, 4 * c + 0) = px[v];
      next.values(q, 4 * c + 1) = py[v];
      next.values(q, 4 * c + 2) = vx[v];
      next.values(q, 4 * c + 3) = vy[v];
    }
  }
  require_finite(next, "SoftLattice2D");
  return next;
}

LatticeLayout random_lattice_layout(int num_quads, std::uint64_t seed) {
  if (num_quads < 1) throw ConfigError("lattice needs at least one quad");
  std::mt19937_64 rng(seed ^ 0x5eed1a77ULL);
  LatticeLayout layout{{0, 0, QuadKind::Fixed}};
  std::set<std::pair<int, int>> used{{0, 0}};
  static constexpr int dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  while (layout.size() < static_cast<std::size_t>(num_quads)) {
    const auto& base = layout[std::uniform_int_distribution<std::size_t>(0, layout.size() - 1)(rng)];
    const auto& d = dirs[std::uniform_int_distribution<int>(0, 3)(rng)];
    const std::pair<int, int> cell{base.col + d[0], base.row + d[1]};
    if (cell.second < 0 || used.count(cell) != 0) continue;
    used.insert(cell);
    static constexpr QuadKind kinds[3] = {QuadKind::Rigid, QuadKind::Soft, QuadKind::Actuated};
    layout.push_back({cell.first, cell.second, kinds[std::uniform_int_distribution<int>(0, 2)(rng)]});
  }
  const bool has_actuator = std::any_of(layout.begin(), layout.end(), [](const LatticeCell& c) {
    return c.kind == QuadKind::Actuated;
  });
  if (!has_actuator && layout.size() > 1) layout.back().kind = QuadKind::Actuated;
  return layout;
}

SystemState lattice_rest_state(const LatticeLayout& layout) {
  static constexpr int dc[4] = {0, 1, 1, 0};
  static constexpr int dr[4] = {0, 0, 1, 1};
  SystemState s{DenseMatrix(layout.size(), 16), std::vector<double>(layout.size(), 1.0)};
  for (std::size_t q = 0; q < layout.size(); ++q) {
    for (int c = 0; c < 4; ++c) {
      s.values(q, 4 * c + 0) = layout[q].col + dc[c];
      s.values(q, 4 * c + 1) = layout[q].row + dr[c];
    }
  }
  return s;
}

double quad_area(const SystemState& state, std::size_t quad) {
  double area = 0.0;
  for (int c = 0; c < 4; ++c) {
    const int n = (c + 1) % 4;
    area += state.values(quad, 4 * c) * state.values(quad, 4 * n + 1) -
            state.values(quad, 4 * n) * state.values(quad, 4 * c + 1);
  }
  return 0.5 * area;
}

Environment::Environment(EnvConfig config) : config_(config) {
  config_.validate();
  if (config_.env_kind == EnvKind::SoftLattice2D) {
    layout_ = random_lattice_layout(config_.num_objects, config_.seed);
  }
  if (config_.env_kind == EnvKind::Rope2D && config_.num_objects < 3) {
    throw ConfigError("Rope2D needs at least 3 masses");
  }
}

std::vector<bool> Environment::actuated() const {
  const auto n = static_cast<std::size_t>(config_.num_objects);
  switch (config_.env_kind) {
    case EnvKind::SpringBalls:
      return std::vector<bool>(n, true);
    case EnvKind::Rope2D: {
      std::vector<bool> mask(n, false);
      mask[0] = true;
      return mask;
    }
    case EnvKind::SoftLattice2D: {
      std::vector<bool> mask(n, false);
      for (std::size_t q = 0; q < n; ++q) mask[q] = layout_[q].kind == QuadKind::Actuated;
      return mask;
    }
  }
  return {};
}

SystemState Environment::initial_state() const {
  std::mt19937_64 rng(config_.seed ^ 0x1a171a1ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto n = static_cast<std::size_t>(config_.num_objects);
  switch (config_.env_kind) {
    case EnvKind::SpringBalls: {
      SystemState s{DenseMatrix(n, 4), {}};
      for (std::size_t i = 0; i < n; ++i) {
        s.values(i, 0) = unit(rng);
        s.values(i, 1) = unit(rng);
        s.values(i, 2) = 0.5 * unit(rng);
        s.values(i, 3) = 0.5 * unit(rng);
      }
      return s;
    }
    case EnvKind::Rope2D: {
      // Hang the rope from the origin and let it settle under heavy damping.
      SystemState s{DenseMatrix(n, 4), {}};
      const auto& p = config_.params;
      double y = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        s.values(i, 1) = y;
        y -= kRopeRestLength + static_cast<double>(n - 1 - i) * p.mass * p.gravity / p.stiffness;
      }
      for (int k = 0; k < 400; ++k) s = rope_step_impl(s, 0.0, config_, 20.0);
      for (std::size_t i = 1; i < n; ++i) {
        s.values(i, 2) = 0.2 * unit(rng);
        s.values(i, 3) = 0.05 * unit(rng);
      }
      return s;
    }
    case EnvKind::SoftLattice2D:
      return lattice_rest_state(layout_);
  }
  return {};
}

SystemState Environment::step(const SystemState& state, const ControlInput& u) const {
  switch (config_.env_kind) {
    case EnvKind::SpringBalls: return spring_balls_step(state, config_, &u);
    case EnvKind::Rope2D: return rope_step(state, u, config_);
    case EnvKind::SoftLattice2D: return soft_lattice_step(state, u, config_, layout_);
  }
  return state;
}

Policy zero_policy(const Environment& env) {
  const auto n = static_cast<std::size_t>(env.config().num_objects);
  const auto l = static_cast<std::size_t>(env.action_dim());
  return [n, l](int, const SystemState&) { return ControlInput(n, l); };
}

Policy random_exploration_policy(const Environment& env, std::uint64_t seed) {
  struct PolicyState {
    std::mt19937_64 rng;
    ControlInput current;
  };
  const auto n = static_cast<std::size_t>(env.config().num_objects);
  const auto l = static_cast<std::size_t>(env.action_dim());
  auto st = std::make_shared<PolicyState>(PolicyState{std::mt19937_64(seed ^ 0xac7104ULL),
                                                      ControlInput(n, l)});
  const double bound = env.config().params.action_bound;
  const std::vector<bool> mask = env.actuated();
  return [st, bound, mask](int, const SystemState&) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < st->current.rows(); ++i) {
      for (std::size_t j = 0; j < st->current.cols(); ++j) {
        const double xi = dist(st->rng);
        st->current(i, j) = mask[i] ? 0.8 * st->current(i, j) + 0.2 * xi : 0.0;
      }
    }
    return st->current;
  };
}

Trajectory rollout_env(const EnvConfig& config, const Policy& policy, int T) {
  const Environment env(config);
  return rollout_env(env, env.initial_state(), policy, T);
}

Trajectory rollout_env(const Environment& env, const SystemState& start, const Policy& policy,
                       int T) {
  if (T < 2) throw ArgumentError("rollout_env: T must be at least 2, got " + std::to_string(T));
  Trajectory traj;
  traj.config = env.config();
  traj.states.reserve(static_cast<std::size_t>(T));
  traj.controls.reserve(static_cast<std::size_t>(T - 1));
  traj.states.push_back(start);
  for (int t = 0; t + 1 < T; ++t) {
    ControlInput u = policy(t, traj.states.back());
    try {
      traj.states.push_back(env.step(traj.states.back(), u));
    } catch (const InstabilityError& e) {
      throw InstabilityError(std::string(e.what()) + " (episode seed " +
                                 std::to_string(env.config().seed) + ", step " +
                                 std::to_string(t) + ")",
                             t);
    }
    traj.controls.push_back(std::move(u));
  }
  return traj;
}

namespace {

void append_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_rows(std::string& out, const std::vector<const DenseMatrix*>& mats) {
  out += '[';
  for (std::size_t k = 0; k < mats.size(); ++k) {
    if (k) out += ',';
    out += '[';
    const auto d = mats[k]->data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i) out += ',';
      append_number(out, d[i]);
    }
    out += ']';
  }
  out += ']';
}

}  // namespace

std::string trajectory_to_json_line(const Trajectory& traj) {
  std::string out = "{\"config\":";
  out += nlohmann::json(traj.config).dump();
  std::vector<const DenseMatrix*> states, controls;
  for (const auto& s : traj.states) states.push_back(&s.values);
  for (const auto& u : traj.controls) controls.push_back(&u);
  out += ",\"states\":";
  append_rows(out, states);
  out += ",\"controls\":";
  append_rows(out, controls);
  out += '}';
  return out;
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory traj;
  traj.config = j.at("config").get<EnvConfig>();
  const auto n = static_cast<std::size_t>(traj.config.num_objects);
  const auto d = static_cast<std::size_t>(state_dim(traj.config.env_kind));
  const auto l = static_cast<std::size_t>(action_dim(traj.config.env_kind));
  for (const auto& row : j.at("states")) {
    auto v = row.get<std::vector<double>>();
    if (v.size() != n * d) throw ConfigError("episode state has wrong length");
    traj.states.push_back(SystemState{DenseMatrix(n, d, std::move(v)), {}});
  }
  for (const auto& row : j.at("controls")) {
    auto v = row.get<std::vector<double>>();
    if (v.size() != n * l) throw ConfigError("episode control has wrong length");
    traj.controls.emplace_back(n, l, std::move(v));
  }
  if (traj.controls.size() + 1 != traj.states.size()) {
    throw ConfigError("episode controls must align with transitions");
  }
  if (traj.config.env_kind == EnvKind::SoftLattice2D && !traj.states.empty()) {
    traj.states.front().actuation.assign(n, 1.0);
  }
  return traj;
}

}  // namespace ckpm
