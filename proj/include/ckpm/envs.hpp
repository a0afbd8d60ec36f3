#pragma once

// Ground-truth simulators: linear spring balls, a 2D rope with an actuated
// pinned top mass and a 2D soft-body lattice. All use semi-implicit Euler.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/lattice.hpp"
#include "ckpm/matrix.hpp"

namespace ckpm {

enum class EnvKind { SpringBalls, Rope2D, SoftLattice2D };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

struct PhysicalParams {
  double stiffness = 1.0;     // N/m
  double damping = 0.0;       // 1/s, viscous
  double mass = 1.0;          // kg
  double gravity = 0.0;       // m/s^2
  double action_bound = 1.0;  // exploration bound for random policies
};

struct EnvConfig {
  EnvKind env_kind = EnvKind::SpringBalls;
  int num_objects = 2;
  double dt = 0.01;
  std::uint64_t seed = 0;
  PhysicalParams params;

  // Throws ConfigError.
  void validate() const;

  static EnvConfig defaults(EnvKind kind, int num_objects, std::uint64_t seed = 0);
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

/// Per-object states, one row per object.
struct SystemState {
  DenseMatrix values;
  // SoftLattice2D only: current rest-length scale of every quad. Not observed.
  std::vector<double> actuation;

  std::size_t num_objects() const { return values.rows(); }
  std::size_t per_object_dim() const { return values.cols(); }
};

// One row per object, one column per action channel.
using ControlInput = DenseMatrix;

int state_dim(EnvKind kind);
int action_dim(EnvKind kind);

struct Trajectory {
  std::vector<SystemState> states;
  std::vector<ControlInput> controls;
  EnvConfig config;
};

// Rope geometry shared by the simulator and its graph.
inline constexpr double kRopeRestLength = 0.5;
inline constexpr double kRopeBendingRatio = 0.25;

// Lattice geometry: unit cells, rigid quads and the pinned quad are stiffer.
inline constexpr double kLatticeRigidFactor = 2.0;
inline constexpr double kActuationMin = 0.7;
inline constexpr double kActuationMax = 1.3;

SystemState spring_balls_step(const SystemState& state, const EnvConfig& config,
                              const ControlInput* u = nullptr);
SystemState rope_step(const SystemState& state, const ControlInput& u, const EnvConfig& config);
SystemState soft_lattice_step(const SystemState& state, const ControlInput& u,
                              const EnvConfig& config, const LatticeLayout& layout);

// Random connected layout with N cells, cell 0 fixed at the origin and at
// least one actuated cell; a deterministic function of (N, seed).
LatticeLayout random_lattice_layout(int num_quads, std::uint64_t seed);

// Observation of a layout at rest: 4 corners x [x, y, vx, vy] per quad.
SystemState lattice_rest_state(const LatticeLayout& layout);

// Quad area from the shoelace formula over the corner order used in states.
double quad_area(const SystemState& state, std::size_t quad);

/// Simulator bound to one configuration.
class Environment {
 public:
  explicit Environment(EnvConfig config);

  const EnvConfig& config() const noexcept { return config_; }
  int state_dim() const { return ckpm::state_dim(config_.env_kind); }
  int action_dim() const { return ckpm::action_dim(config_.env_kind); }
  // Objects that may receive nonzero actions.
  std::vector<bool> actuated() const;
  const LatticeLayout& layout() const noexcept { return layout_; }

  // Deterministic in config.seed.
  SystemState initial_state() const;
  SystemState step(const SystemState& state, const ControlInput& u) const;

 private:
  EnvConfig config_;
  LatticeLayout layout_;
};

// Returns the action for transition t given the current state.
using Policy = std::function<ControlInput(int t, const SystemState& state)>;

Policy zero_policy(const Environment& env);
// i.i.d. uniform actions in [-bound, bound] passed through a 0.8 momentum
// filter, restricted to actuated objects.
Policy random_exploration_policy(const Environment& env, std::uint64_t seed);

// Runs T states (T-1 transitions). Step failures are rethrown with context.
Trajectory rollout_env(const EnvConfig& config, const Policy& policy, int T);
Trajectory rollout_env(const Environment& env, const SystemState& start, const Policy& policy,
                       int T);

// One JSON object per line; floats with 17 significant digits.
std::string trajectory_to_json_line(const Trajectory& traj);
Trajectory trajectory_from_json(const nlohmann::json& j);

}  // namespace ckpm
