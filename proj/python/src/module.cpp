#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "ckpm/bench.hpp"
#include "ckpm/control.hpp"
#include "ckpm/embeddings.hpp"
#include "ckpm/envs.hpp"
#include "ckpm/errors.hpp"
#include "ckpm/scene_graph.hpp"
#include "ckpm/sysid.hpp"

namespace py = pybind11;
using namespace ckpm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return DenseMatrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const DenseMatrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

// (T, N, c) array <-> T matrices of N x c.
std::vector<DenseMatrix> to_frames(const Array& a) {
  if (a.ndim() != 3) throw DimensionError("expected a 3-d array (steps, objects, width)");
  const auto t = static_cast<std::size_t>(a.shape(0)), n = static_cast<std::size_t>(a.shape(1)),
             c = static_cast<std::size_t>(a.shape(2));
  std::vector<DenseMatrix> out;
  for (std::size_t k = 0; k < t; ++k) {
    const double* p = a.data() + k * n * c;
    out.emplace_back(n, c, std::vector<double>(p, p + n * c));
  }
  return out;
}

Array to_array(const std::vector<DenseMatrix>& frames, std::size_t n, std::size_t c) {
  Array out({frames.size(), n, c});
  double* p = out.mutable_data();
  for (const auto& f : frames) p = std::copy(f.data().begin(), f.data().end(), p);
  return out;
}

py::dict trajectory_dict(const Trajectory& traj) {
  std::vector<DenseMatrix> states;
  for (const auto& s : traj.states) states.push_back(s.values);
  const std::size_t n = static_cast<std::size_t>(traj.config.num_objects);
  py::dict d;
  d["states"] = to_array(states, states.front().rows(), states.front().cols());
  d["controls"] = to_array(traj.controls, n, static_cast<std::size_t>(action_dim(traj.config.env_kind)));
  d["config"] = nlohmann::json(traj.config).dump();
  return d;
}

EnvConfig env_config(const std::string& kind, int num_objects, std::uint64_t seed) {
  return EnvConfig::defaults(env_kind_from_string(kind), num_objects, seed);
}

bench::ExperimentSpec spec_from(const std::string& config_json) {
  try {
    return nlohmann::json::parse(config_json).get<bench::ExperimentSpec>();
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("invalid experiment JSON: ") + e.what());
  }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Compositional Koopman operators: simulators, system identification, control and the "
            "experiment harness.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  m.def(
      "rollout",
      [](const std::string& kind, int num_objects, std::uint64_t seed, int steps, bool forced) {
        const EnvConfig cfg = env_config(kind, num_objects, seed);
        Environment env(cfg);
        const Policy policy = forced ? random_exploration_policy(env, seed) : zero_policy(env);
        return trajectory_dict(rollout_env(env, env.initial_state(), policy, steps));
      },
      py::arg("kind"), py::arg("num_objects"), py::arg("seed") = 0, py::arg("steps") = 100,
      py::arg("forced") = true,
      "Simulates one episode. Returns states (T, N, d), controls (T-1, N, l) and the JSON config.");

  py::class_<SceneGraph>(m, "SceneGraph")
      .def_property_readonly("num_objects", &SceneGraph::num_objects)
      .def_property_readonly("h", &SceneGraph::h)
      .def("sigma", [](const SceneGraph& g) {
        const std::size_t n = g.num_objects();
        py::array_t<int> out({n, n});
        std::copy(g.sigma_flat().begin(), g.sigma_flat().end(), out.mutable_data());
        return out;
      });
  m.def("rope_graph", &build_rope_graph, py::arg("num_masses"));
  m.def("complete_graph", &build_complete_graph, py::arg("num_objects"));
  m.def(
      "env_graph",
      [](const std::string& kind, int num_objects, std::uint64_t seed) {
        return build_graph(Environment(env_config(kind, num_objects, seed)));
      },
      py::arg("kind"), py::arg("num_objects"), py::arg("seed") = 0);

  py::class_<BlockDynamics>(m, "Dynamics")
      .def_property_readonly("mode", [](const BlockDynamics& d) { return to_string(d.mode); })
      .def_property_readonly("K_hat", [](const BlockDynamics& d) {
        std::vector<Array> out;
        for (const auto& k : d.K_hat) out.push_back(to_array(k));
        return out;
      })
      .def_property_readonly("L_hat", [](const BlockDynamics& d) {
        std::vector<Array> out;
        for (const auto& l : d.L_hat) out.push_back(to_array(l));
        return out;
      })
      .def("materialize", [](const BlockDynamics& d) {
        const auto mat = materialize(d);
        return py::make_tuple(to_array(mat.K), to_array(mat.L));
      })
      .def("parameter_count", &BlockDynamics::parameter_count)
      .def(
          "rollout",
          [](const BlockDynamics& d, const Array& g1, const Array& controls) {
            const auto us = to_frames(controls);
            const auto roll = rollout_linear(d, to_matrix(g1), us);
            return to_array(roll, roll.front().rows(), roll.front().cols());
          },
          py::arg("g1"), py::arg("controls"));

  m.def(
      "identify",
      [](const std::vector<Array>& embeddings, const std::vector<Array>& controls, const SceneGraph& graph,
         const std::string& mode, double ridge) {
        if (embeddings.size() != controls.size()) throw DimensionError("one control array per embedding array");
        std::vector<EmbeddingSequence> data;
        for (std::size_t k = 0; k < embeddings.size(); ++k) data.push_back({to_frames(embeddings[k]), to_frames(controls[k])});
        return identify(structure_mode_from_string(mode), data, graph, Ridge(ridge));
      },
      py::arg("embeddings"), py::arg("controls"), py::arg("graph"), py::arg("mode") = "Block",
      py::arg("ridge") = 1e-8, "Least-squares fit of g' = K g + L u with an absolute ridge.");

  m.def(
      "solve_control",
      [](const BlockDynamics& d, const Array& start, const Array& goal, int horizon, double penalty) {
        const ControlSolution sol = solve_open_loop(ControlProblem{d, to_matrix(start), to_matrix(goal), horizon, penalty, {}});
        const std::size_t n = sol.predicted_terminal.rows();
        return py::make_tuple(to_array(sol.controls, n, d.l), to_array(sol.predicted_terminal));
      },
      py::arg("dynamics"), py::arg("start"), py::arg("goal"), py::arg("horizon"),
      py::arg("penalty") = kDefaultActionPenalty,
      "Open-loop controls over `horizon` states and the predicted terminal embedding.");

  py::class_<KoopmanModel>(m, "KoopmanModel")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_static(
          "for_graph",
          [](const SceneGraph& g, int state_dim, int m_dim, int hidden, std::uint64_t seed) {
            return KoopmanModel::for_graph(g, state_dim, m_dim, hidden, seed);
          },
          py::arg("graph"), py::arg("state_dim"), py::arg("m"), py::arg("hidden"), py::arg("seed") = 0)
      .def_property_readonly("m", &KoopmanModel::m)
      .def_property_readonly("state_dim", &KoopmanModel::state_dim)
      .def("parameter_count", &KoopmanModel::parameter_count)
      .def(
          "encode",
          [](const KoopmanModel& model, const SceneGraph& g, const Array& states) {
            std::vector<SystemState> frames;
            for (auto& f : to_frames(states)) frames.push_back(SystemState{std::move(f), {}});
            const auto e = model.encode_frames(g, frames);
            return to_array(e, g.num_objects(), static_cast<std::size_t>(model.m()));
          },
          py::arg("graph"), py::arg("states"), "Embeds (T, N, d) states to (T, N, m).")
      .def(
          "decode",
          [](const KoopmanModel& model, const SceneGraph& g, const Array& embeddings) {
            const auto x = model.decode_frames(g, to_frames(embeddings));
            return to_array(x, g.num_objects(), static_cast<std::size_t>(model.state_dim()));
          },
          py::arg("graph"), py::arg("embeddings"));

  // Harness commands take the experiment config as JSON text and return the report as JSON text.
  m.def("_datagen", [](const std::string& cfg) { return bench::run_datagen(spec_from(cfg)).manifest.dump(); });
  m.def("_train", [](const std::string& cfg) { return bench::run_train(spec_from(cfg)).report.dump(); });
  m.def("_eval_sim", [](const std::string& cfg, const std::string& mode, bool extrapolate) {
    return bench::run_eval_sim(spec_from(cfg), bench::eval_mode_from_string(mode), extrapolate).report.dump();
  });
  m.def("_eval_control", [](const std::string& cfg, const std::string& mode, bool extrapolate) {
    return bench::run_eval_control(spec_from(cfg), bench::eval_mode_from_string(mode), extrapolate).report.dump();
  });
  m.def("_sweep", [](const std::string& cfg) { return bench::run_sweep(spec_from(cfg)).report.dump(); });
  m.def("_report", [](const std::string& cfg) { return bench::run_report(spec_from(cfg)).dump(); });
}
