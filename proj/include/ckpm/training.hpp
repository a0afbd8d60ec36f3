#pragma once

// Training of the encoder/decoder pair with
//   L = L_ae + lambda1 * L_pred + lambda2 * L_metric
// on sub-sequences, with structured system identification run inside every
// sub-sequence and Adam updates on the averaged batch gradient.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/embeddings.hpp"
#include "ckpm/envs.hpp"
#include "ckpm/scene_graph.hpp"
#include "ckpm/sysid.hpp"
#include "ckpm/tape.hpp"

namespace ckpm {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 8;
  double lambda1 = 1.0;
  double lambda2 = 0.3;
  int subseq_len = 64;
  int iterations = 5000;
  int metric_pair_count = 64;  // 0 enumerates every pair
  std::uint64_t seed = 0;
  bool backprop_through_sysid = true;
  StructureMode structure = StructureMode::Block;  // Block or Diag
  double ridge_factor = 1e-3;                      // trace-scaled
  double divergence_factor = 1e3;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<DenseMatrix> first;
  std::vector<DenseMatrix> second;
};

AdamState make_adam(std::span<const DenseMatrix> params);
void adam_update(std::vector<DenseMatrix>& params, std::span<const DenseMatrix> grads,
                 AdamState& state, double learning_rate);

// Actions in model units: raw actions divided by the environment's bound.
DenseMatrix scale_controls(const DenseMatrix& u, double action_bound);
DenseMatrix unscale_controls(const DenseMatrix& u, double action_bound);

// One episode prepared for repeated loss evaluation.
struct PreparedEpisode {
  SceneGraph graph;
  TypeMap types;
  DenseMatrix normalized;  // (T*N) x d, model units
  DenseMatrix controls;    // ((T-1)*N) x l, model units
  std::size_t frames = 0;
  std::size_t objects = 0;
};

PreparedEpisode prepare_episode(const KoopmanModel& model, const Trajectory& traj,
                                StructureMode structure);
// Frames [begin, begin + len) of a prepared episode.
PreparedEpisode slice_episode(const PreparedEpisode& ep, std::size_t begin, std::size_t len);

struct LossVars {
  ad::Var total;
  ad::Var ae;
  ad::Var pred;
  ad::Var metric;
};

struct LossValues {
  double total = 0.0;
  double ae = 0.0;
  double pred = 0.0;
  double metric = 0.0;
};

// Index pairs (i < j) over `frames` steps: `count` uniform draws, or all pairs
// when count is 0.
std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t frames, int count,
                                                              std::uint64_t seed);

LossVars build_loss(ad::Tape& tape, const KoopmanModel& model, std::span<const ad::Var> params,
                    const PreparedEpisode& ep, const TrainConfig& config, std::uint64_t pair_seed);

// Value-only losses on one prepared (sub-)episode.
double loss_ae(const KoopmanModel& model, const PreparedEpisode& ep);
double loss_pred(const KoopmanModel& model, const PreparedEpisode& ep, const TrainConfig& config);
double loss_pred(const KoopmanModel& model, const PreparedEpisode& ep, const BlockDynamics& dyn);
double loss_metric(const KoopmanModel& model, const PreparedEpisode& ep, int pair_count,
                   std::uint64_t seed);
LossValues evaluate_loss(const KoopmanModel& model, const PreparedEpisode& ep,
                         const TrainConfig& config, std::uint64_t pair_seed);

// Median over sampled pairs of |log(||g_i - g_j|| / ||x_i - x_j||)|, with
// distances over whole-system vectors in model units.
double distance_ratio_log_median(const KoopmanModel& model, const PreparedEpisode& ep,
                                 int pair_count, std::uint64_t seed);

struct LossRecord {
  int iteration = 0;
  LossValues values;
};

struct TrainResult {
  KoopmanModel model;
  std::vector<LossRecord> curve;
};

using TrainCallback = std::function<void(const LossRecord&)>;

// Fits the normaliser on the dataset when the model standardises, then runs
// the configured number of Adam iterations. Deterministic given the seed.
// Throws NumericalError when the loss diverges.
TrainResult train(const TrainConfig& config, std::span<const Trajectory> dataset,
                  KoopmanModel model, const TrainCallback& on_iteration = {});

void write_loss_curve(const std::string& path, std::span<const LossRecord> curve);

}  // namespace ckpm
