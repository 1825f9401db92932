#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "galign/energy.hpp"
#include "galign/graph.hpp"
#include "galign/rng.hpp"
#include "galign/se3.hpp"

namespace galign {

// Langevin-dynamics search for the transform minimizing the learned energy:
// per restart a random start, a rotation-model pass, a translation-model
// pass, a short rotation refinement, then selection by combined energy.

struct SamplerConfig {
  int n_steps = 150;           // per mode pass
  double lambda_rot = 1e-2;    // step scale, rotation passes
  double lambda_trans = 1e-3;  // step scale, translation pass (metres^2-scaled)
  double sigma0_trans = 0.02;  // noise scale at step 0
  double sigma0_rot = 5.0 * M_PI / 180.0;
  double sigma_decay = 0.98;   // sigma_k = sigma0 * decay^k, non-increasing
  int n_restarts = 8;
  int restart_batch = 8;       // restarts evaluated together in one graph
  int rotation_refine_steps = 30;  // 0 disables the final refinement pass
  int halve_streak = 10;  // halve lambda after this many energy increases in a row
  double init_trans = 0.8;  // random-start ranges (training phase-1 ranges)
  double init_rot = 3.14159265358979323846;
  double budget_seconds = 0;  // > 0: no new restart batch past this wall time
  uint64_t seed = 0;
};

// Rejects non-positive step scales, a growing noise schedule, zero restarts.
void validate(const SamplerConfig& c);

// Energy source the sampler walks on: the trained model, or an analytic
// oracle in tests. Candidates are independent restarts.
struct EnergyBackend {
  virtual ~EnergyBackend() = default;
  virtual int n_candidates() const = 0;
  // Energies and pose gradients (twist at identity, [translation, rotation],
  // world frame) for every candidate from one batched pass.
  virtual void evaluate(Eigen::VectorXd& energies,
                        std::vector<Eigen::Matrix<double, 6, 1>>& grads) = 0;
  virtual void energies_only(Eigen::VectorXd& energies) = 0;
  virtual void move(int candidate, const RigidTransform& t) = 0;
  virtual Eigen::Vector3d centroid(int candidate) const = 0;  // rotation anchor
};

// Backend over an alignment graph and model parameters. The graph is mutated
// in place by move(); the index must belong to it.
template <typename S>
class ModelBackend : public EnergyBackend {
 public:
  ModelBackend(AlignmentGraph& graph, const GraphIndex& index,
               const EnergyModelParams<S>& params)
      : g_(&graph), idx_(&index), p_(&params) {}
  int n_candidates() const override { return g_->n_candidates; }
  void evaluate(Eigen::VectorXd& energies,
                std::vector<Eigen::Matrix<double, 6, 1>>& grads) override;
  void energies_only(Eigen::VectorXd& energies) override;
  void move(int candidate, const RigidTransform& t) override;
  Eigen::Vector3d centroid(int candidate) const override;

 private:
  AlignmentGraph* g_;
  const GraphIndex* idx_;
  const EnergyModelParams<S>* p_;
};

// One Langevin increment from a world-frame pose gradient: drift by
// -(lambda/2) * g plus noise ~ N(0, sigma^2), both restricted to the active
// mode and anchored at `anchor` so a rotation step spins the candidate in
// place. Rotation mode moves the anchor by ~1e-16 per step; translation mode
// leaves rotation bitwise identical.
RigidTransform langevin_increment(const Eigen::Matrix<double, 6, 1>& pose_grad,
                                  const Eigen::Vector3d& anchor, double lambda, double sigma,
                                  EnergyMode mode, Rng& rng);

// Single-candidate step against the model: pose gradient at identity,
// increment, applied via transform_candidate. A non-finite gradient sets
// *skipped and applies nothing.
template <typename S>
RigidTransform langevin_step(AlignmentGraph& graph, const GraphIndex& index, int candidate,
                             const EnergyModelParams<S>& params, double lambda, double sigma,
                             EnergyMode mode, Rng& rng, bool* skipped = nullptr);

struct PassOptions {
  EnergyMode mode = EnergyMode::Rotation;
  int n_steps = 0;
  double lambda = 0;
  double sigma0 = 0;
  double sigma_decay = 1.0;
  int halve_streak = 10;
};

// Per-candidate sampler state carried across passes.
struct ChainState {
  RigidTransform applied;          // cumulative transform, start pose -> now
  bool failed = false;             // non-finite energy/gradient; chain frozen
  std::vector<double> trace;       // active-model energy per step
  double last_energy = 0;          // final recorded energy
};

// Runs one mode pass over all backend candidates together: per step one
// batched evaluate, then per candidate streak bookkeeping (lambda halves
// after `halve_streak` consecutive energy increases), increment, move.
void langevin_pass(EnergyBackend& backend, const PassOptions& opt, Rng& rng,
                   std::vector<ChainState>& state);

struct RestartResult {
  RigidTransform transform;   // observed grasped pose -> aligned pose
  double energy = 0;          // final combined rotation + translation energy
  std::vector<double> trace;  // active-model energy per step, passes concatenated
  bool failed = false;
};

struct InferenceResult {
  RigidTransform best_transform;
  double best_energy = 0;
  std::vector<RestartResult> restarts;
  double seconds = 0;
  int restarts_planned = 0;  // > restarts.size() when the budget truncated
};

// Full search. Demos and test come from the same encoder as both models
// (digest-checked); models must be a rotation/translation pair.
template <typename S>
InferenceResult optimize_alignment(const std::vector<PairGraph>& demos, const PairGraph& test,
                                   const EnergyModelParams<S>& rot_model,
                                   const EnergyModelParams<S>& trans_model,
                                   const SamplerConfig& config);

// Independent optimize_alignment per waypoint index, conditioning on each
// demo's alignment at that index. demo_trajectories[d][t] = demo d, waypoint
// t; every demo must provide the same number of waypoints.
template <typename S>
std::vector<InferenceResult> infer_waypoints(
    const std::vector<std::vector<PairGraph>>& demo_trajectories, const PairGraph& test,
    const EnergyModelParams<S>& rot_model, const EnergyModelParams<S>& trans_model,
    const SamplerConfig& config);

// JSON report: per-restart final energies and failure flags, the chosen
// transform (12 row-major doubles), wall time.
std::string inference_report_json(const InferenceResult& result);

}  // namespace galign
