#include "galign/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <Eigen/Geometry>

#include <nlohmann/json.hpp>

#include "galign/error.hpp"

namespace galign {

namespace {

bool finite6(const Eigen::Matrix<double, 6, 1>& g) { return g.allFinite(); }

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

Eigen::Vector3d grasped_centroid(const AlignmentGraph& g, int candidate) {
  const int32_t base = g.cand_node_start[size_t(candidate)];
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (int32_t i = 0; i < g.k; ++i) c += g.nodes[size_t(base + i)].position;
  return c / double(g.k);
}

}  // namespace

void validate(const SamplerConfig& c) {
  check(c.n_steps >= 0, ErrorKind::Config, "sampler: n_steps must be >= 0");
  check(c.lambda_rot > 0 && c.lambda_trans > 0, ErrorKind::Config,
        "sampler: step scales must be positive");
  check(c.sigma0_trans >= 0 && c.sigma0_rot >= 0, ErrorKind::Config,
        "sampler: noise scales must be >= 0");
  check(c.sigma_decay > 0 && c.sigma_decay <= 1.0, ErrorKind::Config,
        "sampler: noise schedule must be non-increasing (decay in (0, 1])");
  check(c.n_restarts >= 1, ErrorKind::Config, "sampler: need at least one restart");
  check(c.restart_batch >= 1, ErrorKind::Config, "sampler: restart_batch must be >= 1");
  check(c.rotation_refine_steps >= 0, ErrorKind::Config,
        "sampler: rotation_refine_steps must be >= 0");
  check(c.halve_streak >= 1, ErrorKind::Config, "sampler: halve_streak must be >= 1");
  check(c.init_trans >= 0 && c.init_rot >= 0, ErrorKind::Config,
        "sampler: init ranges must be >= 0");
  check(c.budget_seconds >= 0, ErrorKind::Config, "sampler: budget_seconds must be >= 0");
}

template <typename S>
void ModelBackend<S>::evaluate(Eigen::VectorXd& energies,
                               std::vector<Eigen::Matrix<double, 6, 1>>& grads) {
  VecX<S> e;
  grads = pose_gradients_batch(*g_, *idx_, *p_, &e);
  energies = e.template cast<double>();
}

template <typename S>
void ModelBackend<S>::energies_only(Eigen::VectorXd& energies) {
  energies = energy_forward(*g_, *idx_, *p_).template cast<double>();
}

template <typename S>
void ModelBackend<S>::move(int candidate, const RigidTransform& t) {
  transform_candidate(*g_, candidate, t);
}

template <typename S>
Eigen::Vector3d ModelBackend<S>::centroid(int candidate) const {
  return grasped_centroid(*g_, candidate);
}

RigidTransform langevin_increment(const Eigen::Matrix<double, 6, 1>& pose_grad,
                                  const Eigen::Vector3d& anchor, double lambda, double sigma,
                                  EnergyMode mode, Rng& rng) {
  const Eigen::Vector3d gv = pose_grad.head<3>();
  const Eigen::Vector3d gw = pose_grad.tail<3>();
  if (mode == EnergyMode::Translation) {
    // Pure translation: rotation stays bitwise identity.
    Eigen::Vector3d u = -(lambda / 2.0) * gv + sigma * rng.normal3();
    return expmap(Twist{Eigen::Vector3d::Zero(), u});
  }
  // Rotation about the anchor. The world-frame twist gradient decomposes as
  // g_omega = g_about_anchor + anchor x g_v, so the anchored rotation
  // gradient is g_omega - anchor x g_v.
  Eigen::Vector3d gtheta = gw - anchor.cross(gv);
  Twist drift{-(lambda / 2.0) * gtheta, Eigen::Vector3d::Zero()};
  Twist noise{sigma * rng.normal3(), Eigen::Vector3d::Zero()};
  return RigidTransform::translation(anchor) * expmap(drift) * expmap(noise) *
         RigidTransform::translation(-anchor);
}

template <typename S>
RigidTransform langevin_step(AlignmentGraph& graph, const GraphIndex& index, int candidate,
                             const EnergyModelParams<S>& params, double lambda, double sigma,
                             EnergyMode mode, Rng& rng, bool* skipped) {
  check(candidate >= 0 && candidate < graph.n_candidates, ErrorKind::Domain,
        "langevin_step: no such candidate");
  if (skipped) *skipped = false;
  Eigen::Matrix<double, 6, 1> g = pose_gradient(graph, index, params, candidate);
  if (!finite6(g)) {
    if (skipped) *skipped = true;
    return RigidTransform();
  }
  RigidTransform inc =
      langevin_increment(g, grasped_centroid(graph, candidate), lambda, sigma, mode, rng);
  transform_candidate(graph, candidate, inc);
  return inc;
}

void langevin_pass(EnergyBackend& backend, const PassOptions& opt, Rng& rng,
                   std::vector<ChainState>& state) {
  const int m = backend.n_candidates();
  check(int(state.size()) == m, ErrorKind::Domain, "langevin_pass: state size mismatch");
  std::vector<double> lambda(size_t(m), opt.lambda);
  std::vector<int> streak(size_t(m), 0);
  std::vector<double> prev(size_t(m), 0);
  std::vector<bool> has_prev(size_t(m), false);
  Eigen::VectorXd energies;
  std::vector<Eigen::Matrix<double, 6, 1>> grads;

  double sigma = opt.sigma0;
  for (int step = 0; step < opt.n_steps; ++step) {
    backend.evaluate(energies, grads);
    for (int ci = 0; ci < m; ++ci) {
      ChainState& st = state[size_t(ci)];
      if (st.failed) continue;  // frozen after the first non-finite step
      double e = energies(ci);
      if (!std::isfinite(e) || !finite6(grads[size_t(ci)])) {
        st.failed = true;
        continue;
      }
      st.trace.push_back(e);
      st.last_energy = e;
      if (has_prev[size_t(ci)] && e > prev[size_t(ci)]) {
        if (++streak[size_t(ci)] >= opt.halve_streak) {
          lambda[size_t(ci)] /= 2.0;
          streak[size_t(ci)] = 0;
        }
      } else {
        streak[size_t(ci)] = 0;
      }
      prev[size_t(ci)] = e;
      has_prev[size_t(ci)] = true;

      RigidTransform inc = langevin_increment(grads[size_t(ci)], backend.centroid(ci),
                                              lambda[size_t(ci)], sigma, opt.mode, rng);
      backend.move(ci, inc);
      st.applied = inc * st.applied;
    }
    sigma *= opt.sigma_decay;
  }
}

template <typename S>
InferenceResult optimize_alignment(const std::vector<PairGraph>& demos, const PairGraph& test,
                                   const EnergyModelParams<S>& rot_model,
                                   const EnergyModelParams<S>& trans_model,
                                   const SamplerConfig& config) {
  validate(config);
  check(!demos.empty(), ErrorKind::Domain, "optimize_alignment: need at least one demo");
  check(rot_model.config.mode == EnergyMode::Rotation &&
            trans_model.config.mode == EnergyMode::Translation,
        ErrorKind::Config, "optimize_alignment: need a rotation/translation model pair");
  check(rot_model.encoder_digest == trans_model.encoder_digest, ErrorKind::Config,
        "optimize_alignment: models come from different encoders");

  const double t0 = now_seconds();
  InferenceResult result;
  result.restarts_planned = config.n_restarts;
  Rng rng(derive_seed(config.seed, "langevin"));

  int remaining = config.n_restarts;
  while (remaining > 0) {
    const int b = std::min(config.restart_batch, remaining);
    AlignmentGraph graph = attach_context(demos, test);
    attach_candidates(graph, b);
    GraphIndex index = build_index(graph);

    std::vector<ChainState> state(static_cast<size_t>(b));
    for (int ci = 0; ci < b; ++ci) {
      // Random start in the training phase-1 ranges: spin in place, then
      // shift. Centroids are identical across fresh clones.
      RigidTransform rt = random_transform(config.init_trans, config.init_rot, rng);
      RigidTransform init =
          RigidTransform::translation(rt.translation()) *
          RigidTransform::rotation_about(rt.rotation(), grasped_centroid(graph, ci));
      transform_candidate(graph, ci, init);
      state[size_t(ci)].applied = init;
    }

    ModelBackend<S> rot_b(graph, index, rot_model);
    ModelBackend<S> trans_b(graph, index, trans_model);

    PassOptions rot_pass{EnergyMode::Rotation, config.n_steps, config.lambda_rot,
                         config.sigma0_rot, config.sigma_decay, config.halve_streak};
    langevin_pass(rot_b, rot_pass, rng, state);

    PassOptions trans_pass{EnergyMode::Translation, config.n_steps, config.lambda_trans,
                           config.sigma0_trans, config.sigma_decay, config.halve_streak};
    langevin_pass(trans_b, trans_pass, rng, state);

    if (config.rotation_refine_steps > 0) {
      // Continue the decayed schedule so refinement is near-deterministic.
      PassOptions refine = rot_pass;
      refine.n_steps = config.rotation_refine_steps;
      refine.sigma0 = config.sigma0_rot * std::pow(config.sigma_decay, config.n_steps);
      langevin_pass(rot_b, refine, rng, state);
    }

    Eigen::VectorXd e_rot, e_trans;
    rot_b.energies_only(e_rot);
    trans_b.energies_only(e_trans);
    for (int ci = 0; ci < b; ++ci) {
      RestartResult r;
      r.transform = state[size_t(ci)].applied;
      r.failed = state[size_t(ci)].failed;
      double e = e_rot(ci) + e_trans(ci);
      r.failed = r.failed || !std::isfinite(e);
      r.energy = e;
      r.trace = std::move(state[size_t(ci)].trace);
      result.restarts.push_back(std::move(r));
    }

    remaining -= b;
    if (remaining > 0 && config.budget_seconds > 0 &&
        now_seconds() - t0 >= config.budget_seconds)
      break;  // budget truncates the remaining restarts
  }

  int best = -1;
  for (size_t i = 0; i < result.restarts.size(); ++i) {
    if (result.restarts[i].failed) continue;
    if (best < 0 || result.restarts[i].energy < result.restarts[size_t(best)].energy)
      best = int(i);
  }
  check(best >= 0, ErrorKind::Numeric, "optimize_alignment: every restart diverged");
  result.best_transform = result.restarts[size_t(best)].transform;
  result.best_energy = result.restarts[size_t(best)].energy;
  result.seconds = now_seconds() - t0;
  return result;
}

template <typename S>
std::vector<InferenceResult> infer_waypoints(
    const std::vector<std::vector<PairGraph>>& demo_trajectories, const PairGraph& test,
    const EnergyModelParams<S>& rot_model, const EnergyModelParams<S>& trans_model,
    const SamplerConfig& config) {
  check(!demo_trajectories.empty(), ErrorKind::Domain, "infer_waypoints: need demos");
  const size_t t_w = demo_trajectories.front().size();
  check(t_w >= 1, ErrorKind::Domain, "infer_waypoints: empty trajectory");
  for (const auto& traj : demo_trajectories)
    check(traj.size() == t_w, ErrorKind::Domain,
          "infer_waypoints: demos disagree on waypoint count");

  std::vector<InferenceResult> out;
  out.reserve(t_w);
  for (size_t t = 0; t < t_w; ++t) {
    std::vector<PairGraph> demos_t;
    demos_t.reserve(demo_trajectories.size());
    for (const auto& traj : demo_trajectories) demos_t.push_back(traj[t]);
    SamplerConfig cfg_t = config;
    // Waypoint 0 keeps the caller's stream so a length-1 trajectory is plain
    // optimize_alignment; later waypoints get derived streams.
    if (t > 0) cfg_t.seed = derive_seed(config.seed, "waypoint", uint64_t(t));
    out.push_back(optimize_alignment(demos_t, test, rot_model, trans_model, cfg_t));
  }
  return out;
}

std::string inference_report_json(const InferenceResult& result) {
  nlohmann::json j;
  j["best_energy"] = result.best_energy;
  j["best_transform"] = result.best_transform.to_array();
  j["seconds"] = result.seconds;
  j["restarts_planned"] = result.restarts_planned;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.restarts) {
    nlohmann::json row;
    row["energy"] = r.energy;
    row["failed"] = r.failed;
    row["steps"] = r.trace.size();
    rows.push_back(std::move(row));
  }
  j["restarts"] = std::move(rows);
  return j.dump(2);
}

#define GALIGN_INFER_INSTANTIATE(S)                                                             \
  template class ModelBackend<S>;                                                               \
  template RigidTransform langevin_step<S>(AlignmentGraph&, const GraphIndex&, int,             \
                                           const EnergyModelParams<S>&, double, double,         \
                                           EnergyMode, Rng&, bool*);                            \
  template InferenceResult optimize_alignment<S>(                                               \
      const std::vector<PairGraph>&, const PairGraph&, const EnergyModelParams<S>&,             \
      const EnergyModelParams<S>&, const SamplerConfig&);                                       \
  template std::vector<InferenceResult> infer_waypoints<S>(                                     \
      const std::vector<std::vector<PairGraph>>&, const PairGraph&,                             \
      const EnergyModelParams<S>&, const EnergyModelParams<S>&, const SamplerConfig&);

GALIGN_INFER_INSTANTIATE(float)
GALIGN_INFER_INSTANTIATE(double)

}  // namespace galign
