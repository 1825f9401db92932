#include "galign/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

#include <Eigen/Geometry>

#include "galign/error.hpp"
#include "galign/shapes.hpp"

namespace galign {

namespace {

const char* mode_name(EnergyMode m) {
  return m == EnergyMode::Rotation ? "rotation" : "translation";
}

Eigen::Vector3d grasped_centroid_of(const PairGraph& pair) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (int i = 0; i < pair.k; ++i) c += pair.nodes[size_t(i)].position;
  return c / double(pair.k);
}

// Demos + target pair graphs from the cached encodings.
void build_pairs(const EncodedSample& s, int l_edge, std::vector<PairGraph>& demos,
                 PairGraph& target) {
  check(s.pairs.size() >= 2, ErrorKind::Data, "training sample needs >= 1 context pair");
  demos.clear();
  for (size_t i = 0; i + 1 < s.pairs.size(); ++i)
    demos.push_back(build_pair_graph(s.pairs[i].first, s.pairs[i].second, l_edge));
  target = build_pair_graph(s.pairs.back().first, s.pairs.back().second, l_edge);
}

// One mode-restricted draw in the given ranges about the anchor, no guard.
RigidTransform draw_perturbation(EnergyMode mode, double trans_range, double rot_range,
                                 const Eigen::Vector3d& anchor, Rng& rng) {
  RigidTransform raw = random_transform(trans_range, rot_range, rng);
  if (mode == EnergyMode::Rotation)
    return RigidTransform::rotation_about(raw.rotation(), anchor);
  return RigidTransform::translation(raw.translation());
}

struct Grads {
  EnergyModelParams<float> acc;
  bool used = false;
};

void accumulate(Grads& g, EnergyModelParams<float>&& grads, float scale) {
  if (!g.used) {
    g.acc = std::move(grads);
    g.used = true;
    if (scale != 1.0f)
      for (auto [p, n] : energy_param_refs(g.acc))
        for (int64_t i = 0; i < n; ++i) p[i] *= scale;
    return;
  }
  auto dst = energy_param_refs(g.acc);
  auto src = energy_param_refs(grads);
  for (size_t r = 0; r < dst.size(); ++r)
    for (int64_t i = 0; i < dst[r].second; ++i) dst[r].first[i] += scale * src[r].first[i];
}

void adamw_update(EnergyModelParams<float>& params, EnergyModelParams<float>& grads,
                  AdamState& opt, const TrainConfig& cfg, int step) {
  auto refs = energy_param_refs(params);
  auto grefs = energy_param_refs(grads);
  if (opt.m.size() != refs.size()) {
    opt.m.assign(refs.size(), Eigen::VectorXf());
    opt.v.assign(refs.size(), Eigen::VectorXf());
    for (size_t r = 0; r < refs.size(); ++r) {
      opt.m[r] = Eigen::VectorXf::Zero(refs[r].second);
      opt.v[r] = Eigen::VectorXf::Zero(refs[r].second);
    }
    opt.t = 0;
  }
  opt.t += 1;
  const double lr = lr_at(cfg, step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(opt.t));
  for (size_t r = 0; r < refs.size(); ++r) {
    float* p = refs[r].first;
    const float* g = grefs[r].first;
    float* m = opt.m[r].data();
    float* v = opt.v[r].data();
    for (int64_t i = 0; i < refs[r].second; ++i) {
      m[i] = float(cfg.beta1) * m[i] + float(1.0 - cfg.beta1) * g[i];
      v[i] = float(cfg.beta2) * v[i] + float(1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = double(m[i]) / bc1;
      double vhat = double(v[i]) / bc2;
      p[i] -= float(lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[i]));
    }
  }
}

void zero_moments(AdamState& opt) {
  for (auto& m : opt.m) m.setZero();
  for (auto& v : opt.v) v.setZero();
  opt.t = 0;
}

// Gradient-penalty value plus its parameter gradient, accumulated scaled by
// coeff. The parameter gradient of mean |dE/de_j|^2 is recovered from a
// central difference of dE/dtheta along the edge-feature direction u = dE/de
// (two extra passes on the single-candidate graph).
double penalty_with_param_grad(const AlignmentGraph& graph, const GraphIndex& idx,
                               const EnergyModelParams<float>& params, float coeff, Grads& out) {
  EdgeFeatureOverride<float> dir;
  float penalty = gradient_penalty(graph, idx, params, 0, &dir);
  if (dir.edge_ids.empty()) return double(penalty);

  double unorm2 = 0, fnorm2 = 0;
  for (size_t j = 0; j < dir.edge_ids.size(); ++j) {
    unorm2 += double(dir.features[j].squaredNorm());
    fnorm2 += double(graph.edges[size_t(dir.edge_ids[j])].feature.squaredNorm());
  }
  if (unorm2 < 1e-24) return double(penalty);  // flat: no parameter signal
  const double t = 1e-3 * (std::sqrt(fnorm2) + 1e-9) / std::sqrt(unorm2);

  EdgeFeatureOverride<float> plus = dir, minus = dir;
  for (size_t j = 0; j < dir.edge_ids.size(); ++j) {
    VecX<float> base = graph.edges[size_t(dir.edge_ids[j])].feature.cast<float>();
    plus.features[j] = base + float(t) * dir.features[j];
    minus.features[j] = base - float(t) * dir.features[j];
  }
  VecX<float> upstream = VecX<float>::Ones(1);
  EnergyForwardCache<float> cp, cm;
  energy_forward(graph, idx, params, &cp, &plus);
  auto bp = energy_backward(graph, idx, params, cp, upstream, false);
  energy_forward(graph, idx, params, &cm, &minus);
  auto bm = energy_backward(graph, idx, params, cm, upstream, false);

  const float scale = coeff * 2.0f / (float(dir.edge_ids.size()) * 2.0f * float(t));
  auto gp = energy_param_refs(bp.grads);
  auto gm = energy_param_refs(bm.grads);
  for (size_t r = 0; r < gp.size(); ++r)
    for (int64_t i = 0; i < gp[r].second; ++i)
      gp[r].first[i] = gp[r].first[i] - gm[r].first[i];
  accumulate(out, std::move(bp.grads), scale);
  return double(penalty);
}

std::string metrics_path(const std::string& out_dir, EnergyMode mode) {
  return out_dir + "/metrics_" + mode_name(mode) + ".csv";
}

void append_metrics(const std::string& path, const StepMetrics& m) {
  FILE* f = std::fopen(path.c_str(), "a");
  check(f != nullptr, ErrorKind::Io, "cannot open metric log: " + path);
  if (std::ftell(f) == 0) std::fprintf(f, "step,loss,e_pos,e_neg_mean,e_max,e_min,phase\n");
  std::fprintf(f, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", m.step, m.loss, m.e_pos, m.e_neg_mean,
               m.e_max, m.e_min, m.phase);
  std::fclose(f);
}

}  // namespace

void validate(const TrainConfig& c) {
  check(c.n_neg >= 1, ErrorKind::Config, "train: n_neg must be >= 1");
  check(c.batch_size >= 1, ErrorKind::Config, "train: batch_size must be >= 1");
  check(c.total_steps >= 1, ErrorKind::Config, "train: total_steps must be >= 1");
  check(c.phase1_steps >= 0, ErrorKind::Config, "train: phase1_steps must be >= 0");
  check(c.langevin_every >= 1, ErrorKind::Config, "train: langevin_every must be >= 1");
  check(c.l2_logit_coeff > 0 && c.grad_penalty_coeff > 0, ErrorKind::Config,
        "train: regularizer coefficients must be positive");
  check(c.lr > 0 && c.lr_floor_frac >= 0 && c.lr_floor_frac <= 1, ErrorKind::Config,
        "train: bad learning rate");
  check(c.weight_decay >= 0, ErrorKind::Config, "train: weight_decay must be >= 0");
  check(c.phase1_trans > 0 && c.phase1_rot > 0 && c.phase2_trans > 0 && c.phase2_rot > 0,
        ErrorKind::Config, "train: sampling ranges must be positive");
  check(c.phase2_trans <= c.phase1_trans && c.phase2_rot <= c.phase1_rot, ErrorKind::Config,
        "train: phase-2 ranges must not exceed phase-1 ranges");
  check(c.guard_trans > 0 && c.guard_rot > 0, ErrorKind::Config,
        "train: guard tolerances must be positive");
  check(c.phase2_trans > c.guard_trans && c.phase2_rot > c.guard_rot, ErrorKind::Config,
        "train: sampling ranges must exceed the collision guard");
  check(c.langevin_share >= 0 && c.langevin_share <= 1, ErrorKind::Config,
        "train: langevin_share must be in [0, 1]");
  check(c.langevin_neg_steps >= 1, ErrorKind::Config, "train: langevin_neg_steps must be >= 1");
  check(c.subset_pretrain_size >= 1 && c.subset_pretrain_steps >= 0, ErrorKind::Config,
        "train: bad subset pretraining settings");
  check(c.checkpoint_every >= 1 && c.ring_size >= 1, ErrorKind::Config,
        "train: bad checkpoint settings");
  check(c.smoke_samples >= 1 && c.smoke_restarts >= 1 && c.smoke_steps >= 1, ErrorKind::Config,
        "train: bad smoke-test settings");
  check(c.max_aborts >= 0, ErrorKind::Config, "train: max_aborts must be >= 0");
}

InfoNceResult infonce_loss(double e_pos, const Eigen::VectorXd& e_negs) {
  check(e_negs.size() > 0, ErrorKind::Domain, "infonce: need at least one negative");
  // L = e_pos + log(exp(-e_pos) + sum exp(-e_neg)), shifted by the smallest
  // energy so the largest exponent is exactly 0.
  const double m = std::min(e_pos, e_negs.minCoeff());
  double z = std::exp(-(e_pos - m));
  const double z_pos = z;
  for (int64_t i = 0; i < e_negs.size(); ++i) z += std::exp(-(e_negs(i) - m));
  InfoNceResult r;
  r.loss = (e_pos - m) + std::log(z);
  const double p_pos = z_pos / z;
  r.d_pos = 1.0 - p_pos;
  r.d_negs.resize(e_negs.size());
  for (int64_t i = 0; i < e_negs.size(); ++i) r.d_negs(i) = -std::exp(-(e_negs(i) - m)) / z;
  return r;
}

bool within_collision_guard(const RigidTransform& t, const Eigen::Vector3d& anchor,
                            double guard_trans, double guard_rot) {
  return rotation_distance(t.rotation(), Eigen::Matrix3d::Identity()) < guard_rot &&
         (t.apply(anchor) - anchor).norm() < guard_trans;
}

RigidTransform sample_negative_transform(EnergyMode mode, double trans_range, double rot_range,
                                         double guard_trans, double guard_rot,
                                         const Eigen::Vector3d& anchor, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    RigidTransform t = draw_perturbation(mode, trans_range, rot_range, anchor, rng);
    if (!within_collision_guard(t, anchor, guard_trans, guard_rot)) return t;
  }
  throw Error(ErrorKind::Numeric, "negative sampling: guard rejected 1000 draws");
}

template <typename S>
NegativeSet sample_negatives(const TrainConfig& cfg, int step, EnergyMode mode,
                             const std::vector<PairGraph>& demos, const PairGraph& target,
                             const EnergyModelParams<S>& params, Rng& rng) {
  NegativeSet out;
  const Eigen::Vector3d anchor = grasped_centroid_of(target);
  const bool phase2 = step >= cfg.phase1_steps;
  const double tr = phase2 ? cfg.phase2_trans : cfg.phase1_trans;
  const double rr = phase2 ? cfg.phase2_rot : cfg.phase1_rot;

  const bool chain_step = phase2 && ((step - cfg.phase1_steps) % cfg.langevin_every == 0);
  int n_chain = chain_step ? int(std::lround(cfg.langevin_share * cfg.n_neg)) : 0;
  n_chain = std::min(n_chain, cfg.n_neg);

  if (n_chain > 0) {
    // Short single-mode chains against the current params, each from its own
    // random phase-1 pose; results that collapsed onto the positive (or blew
    // up) fall back to uniform draws below.
    AlignmentGraph graph = attach_context(demos, target);
    attach_candidates(graph, n_chain);
    GraphIndex idx = build_index(graph);
    std::vector<ChainState> state(static_cast<size_t>(n_chain));
    for (int ci = 0; ci < n_chain; ++ci) {
      RigidTransform init =
          draw_perturbation(mode, cfg.phase1_trans, cfg.phase1_rot, anchor, rng);
      transform_candidate(graph, ci, init);
      state[size_t(ci)].applied = init;
    }
    ModelBackend<S> backend(graph, idx, params);
    SamplerConfig sampler;  // chain steps reuse the inference defaults
    PassOptions pass{mode, cfg.langevin_neg_steps,
                     mode == EnergyMode::Rotation ? sampler.lambda_rot : sampler.lambda_trans,
                     mode == EnergyMode::Rotation ? sampler.sigma0_rot : sampler.sigma0_trans,
                     sampler.sigma_decay, sampler.halve_streak};
    langevin_pass(backend, pass, rng, state);
    for (int ci = 0; ci < n_chain; ++ci) {
      const RigidTransform& t = state[size_t(ci)].applied;
      if (!state[size_t(ci)].failed &&
          !within_collision_guard(t, anchor, cfg.guard_trans, cfg.guard_rot))
        out.transforms.push_back(t);
    }
    out.n_langevin = int(out.transforms.size());
  }

  while (int(out.transforms.size()) < cfg.n_neg)
    out.transforms.push_back(
        sample_negative_transform(mode, tr, rr, cfg.guard_trans, cfg.guard_rot, anchor, rng));
  return out;
}

EncodedSample encode_sample(const AlignmentSample& s, const EncoderParams& enc) {
  EncodedSample out;
  out.sample_seed = s.sample_seed;
  out.gt_modes = s.modes;
  out.pairs.reserve(s.pairs.size());
  for (size_t i = 0; i < s.pairs.size(); ++i) {
    uint64_t fa = derive_seed(s.sample_seed, "fps", 2 * i);
    uint64_t fb = derive_seed(s.sample_seed, "fps", 2 * i + 1);
    out.pairs.emplace_back(encode_cloud(s.pairs[i].cloud_a, enc, fa),
                           encode_cloud(s.pairs[i].cloud_b, enc, fb));
  }
  return out;
}

AlignmentGraph assemble_graph(const EncodedSample& s, int n_candidates, int l_edge) {
  std::vector<PairGraph> demos;
  PairGraph target;
  build_pairs(s, l_edge, demos, target);
  AlignmentGraph graph = attach_context(demos, target);
  attach_candidates(graph, n_candidates);
  return graph;
}

double lr_at(const TrainConfig& cfg, int step) {
  const double floor = cfg.lr * cfg.lr_floor_frac;
  const double t = std::min(1.0, double(step) / double(cfg.total_steps));
  return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(M_PI * t));
}

StepMetrics train_step(const TrainConfig& cfg, ModeTrainState& state,
                       const std::vector<const EncodedSample*>& batch,
                       const EnergyModelParams<float>& fallback, Rng& rng) {
  check(!batch.empty(), ErrorKind::Domain, "train_step: empty batch");
  const EnergyMode mode = state.params.config.mode;
  const int l_edge = state.params.config.l_edge;
  const float inv_b = 1.0f / float(batch.size());

  StepMetrics m;
  m.step = state.step;
  m.phase = state.step >= cfg.phase1_steps ? 2 : 1;
  m.e_max = -1e300;
  m.e_min = 1e300;

  Grads grads;
  for (const EncodedSample* sample : batch) {
    std::vector<PairGraph> demos;
    PairGraph target;
    build_pairs(*sample, l_edge, demos, target);

    NegativeSet negs =
        sample_negatives(cfg, state.step, mode, demos, target, state.params, rng);

    AlignmentGraph graph = attach_context(demos, target);
    attach_candidates(graph, 1 + cfg.n_neg);
    GraphIndex idx = build_index(graph);
    for (int i = 0; i < cfg.n_neg; ++i)
      transform_candidate(graph, 1 + i, negs.transforms[size_t(i)]);

    EnergyForwardCache<float> cache;
    VecX<float> e = energy_forward(graph, idx, state.params, &cache);
    const double e_pos = double(e(0));
    Eigen::VectorXd e_negs = e.tail(cfg.n_neg).cast<double>();

    InfoNceResult nce = infonce_loss(e_pos, e_negs);
    double loss = nce.loss;
    // L2 keeps the logits near zero instead of drifting in lockstep.
    loss += cfg.l2_logit_coeff * (e_pos * e_pos + e_negs.squaredNorm() / double(cfg.n_neg));
    VecX<float> upstream(1 + cfg.n_neg);
    upstream(0) = float(nce.d_pos + 2.0 * cfg.l2_logit_coeff * e_pos);
    for (int i = 0; i < cfg.n_neg; ++i)
      upstream(1 + i) =
          float(nce.d_negs(i) + 2.0 * cfg.l2_logit_coeff * e_negs(i) / double(cfg.n_neg));
    auto back = energy_backward(graph, idx, state.params, cache, upstream, false);
    accumulate(grads, std::move(back.grads), inv_b);

    // Penalty on its own single-candidate graph: the positive at rest.
    AlignmentGraph pgraph = attach_context(demos, target);
    GraphIndex pidx = build_index(pgraph);
    double penalty = penalty_with_param_grad(pgraph, pidx, state.params,
                                             float(cfg.grad_penalty_coeff) * inv_b, grads);
    loss += cfg.grad_penalty_coeff * penalty;

    m.loss += loss / double(batch.size());
    m.e_pos += e_pos / double(batch.size());
    m.e_neg_mean += e_negs.mean() / double(batch.size());
    m.e_max = std::max(m.e_max, double(e.maxCoeff()));
    m.e_min = std::min(m.e_min, double(e.minCoeff()));
  }

  if (!std::isfinite(m.loss)) {
    // Roll back to the newest evaluated checkpoint and keep going.
    m.aborted = true;
    state.aborts += 1;
    check(state.aborts <= cfg.max_aborts, ErrorKind::Numeric,
          "training diverged repeatedly; giving up");
    if (!state.ring.empty())
      state.params = load_energy_model<float>(state.ring.back().path);
    else
      state.params = fallback;
    zero_moments(state.opt);
    state.step += 1;
    return m;
  }

  adamw_update(state.params, grads.acc, state.opt, cfg, state.step);
  spectral_normalize(state.params);
  state.step += 1;
  return m;
}

double smoke_eval(const TrainConfig& cfg, const EnergyModelParams<float>& params,
                  const std::vector<EncodedSample>& val, uint64_t seed) {
  const EnergyMode mode = params.config.mode;
  SamplerConfig sampler;
  std::vector<double> errors;
  for (size_t i = 0; i < val.size(); ++i) {
    AlignmentGraph graph = assemble_graph(val[i], cfg.smoke_restarts, params.config.l_edge);
    GraphIndex idx = build_index(graph);
    const Eigen::Vector3d anchor = [&] {
      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      for (int32_t j = 0; j < graph.k; ++j)
        c += graph.nodes[size_t(graph.cand_node_start[0] + j)].position;
      return Eigen::Vector3d(c / double(graph.k));
    }();

    Rng rng(derive_seed(seed, "smoke", i));
    std::vector<ChainState> state(static_cast<size_t>(cfg.smoke_restarts));
    for (int ci = 0; ci < cfg.smoke_restarts; ++ci) {
      RigidTransform init =
          draw_perturbation(mode, cfg.phase1_trans, cfg.phase1_rot, anchor, rng);
      transform_candidate(graph, ci, init);
      state[size_t(ci)].applied = init;
    }
    ModelBackend<float> backend(graph, idx, params);
    PassOptions pass{mode, cfg.smoke_steps,
                     mode == EnergyMode::Rotation ? sampler.lambda_rot : sampler.lambda_trans,
                     mode == EnergyMode::Rotation ? sampler.sigma0_rot : sampler.sigma0_trans,
                     sampler.sigma_decay, sampler.halve_streak};
    langevin_pass(backend, pass, rng, state);

    Eigen::VectorXd energies;
    backend.energies_only(energies);
    int best = -1;
    for (int ci = 0; ci < cfg.smoke_restarts; ++ci) {
      if (state[size_t(ci)].failed || !std::isfinite(energies(ci))) continue;
      if (best < 0 || energies(ci) < energies(best)) best = ci;
    }
    if (best < 0) {
      errors.push_back(mode == EnergyMode::Rotation ? M_PI : cfg.phase1_trans);
      continue;
    }
    const RigidTransform& t = state[size_t(best)].applied;
    // Residual of the round trip gt -> random start -> recovered.
    if (mode == EnergyMode::Rotation)
      errors.push_back(rotation_distance(t.rotation(), Eigen::Matrix3d::Identity()));
    else
      errors.push_back((t.apply(anchor) - anchor).norm());
  }
  std::sort(errors.begin(), errors.end());
  const size_t n = errors.size();
  return n % 2 == 1 ? errors[n / 2] : 0.5 * (errors[n / 2 - 1] + errors[n / 2]);
}

ModeTrainResult train_mode(const TrainConfig& cfg, EnergyMode mode,
                           const std::vector<EncodedSample>& samples,
                           const std::vector<EncodedSample>& val, uint64_t encoder_digest,
                           const std::string& out_dir, ModeTrainState& state,
                           const TrainProgress& progress) {
  validate(cfg);
  check(!samples.empty(), ErrorKind::Domain, "train: no samples");
  std::filesystem::create_directories(out_dir);

  ModelConfig mc = cfg.model;
  mc.mode = mode;
  state.params = init_energy_model<float>(mc, derive_seed(cfg.seed, "init", uint64_t(mode)));
  state.params.encoder_digest = encoder_digest;
  spectral_normalize(state.params);  // seed the tracked power-iteration state
  state.opt = AdamState{};
  state.step = 0;
  state.aborts = 0;
  state.ring.clear();
  state.log.clear();
  const EnergyModelParams<float> fallback = state.params;

  const uint64_t smoke_seed = derive_seed(cfg.seed, "smoke-fixed", uint64_t(mode));
  ModeTrainResult result;
  result.init_score = smoke_eval(cfg, state.params, val, smoke_seed);

  const std::string mpath = metrics_path(out_dir, mode);
  std::remove(mpath.c_str());
  Rng rng(derive_seed(cfg.seed, "train", uint64_t(mode)));

  CheckpointInfo best;
  best.step = -1;
  const int pool_small = std::min<int>(cfg.subset_pretrain_size, int(samples.size()));

  for (int step = 0; step < cfg.total_steps; ++step) {
    const int pool = step < cfg.subset_pretrain_steps ? pool_small : int(samples.size());
    std::vector<const EncodedSample*> batch;
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(&samples[size_t(rng.uniform_int(uint64_t(pool)))]);

    StepMetrics m = train_step(cfg, state, batch, fallback, rng);
    append_metrics(mpath, m);
    state.log.push_back(m);
    if (progress) progress(mode, m);

    if (state.step > cfg.sigma_warmup && cfg.sigma_assert_every > 0 &&
        state.step % cfg.sigma_assert_every == 0) {
      for (float s : spectral_estimates(state.params))
        check(s <= 0.05f || (s >= 0.9f && s <= 1.1f), ErrorKind::Numeric,
              "spectral estimate out of the [0.9, 1.1] band");
    }

    const bool last = step + 1 == cfg.total_steps;
    if ((step + 1) % cfg.checkpoint_every == 0 || last) {
      CheckpointInfo info;
      info.step = step + 1;
      info.path = out_dir + "/" + mode_name(mode) + "_" + std::to_string(step + 1) + ".ckpt";
      state.params.step = int64_t(step + 1);
      save_energy_model(state.params, info.path);
      info.score = smoke_eval(cfg, state.params, val, smoke_seed);
      state.ring.push_back(info);
      if (best.step < 0 || info.score < best.score) best = info;
      if (int(state.ring.size()) > cfg.ring_size) {
        // Evict the oldest; its file survives only while it is the best.
        CheckpointInfo old = state.ring.front();
        state.ring.erase(state.ring.begin());
        if (old.step != best.step) std::remove(old.path.c_str());
      }
    }
  }

  check(best.step > 0, ErrorKind::Numeric, "train: no checkpoint was evaluated");
  result.selected_checkpoint = best.path;
  result.selected_score = best.score;
  result.selected_step = best.step;
  return result;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const EncoderParams& encoder,
                  const std::string& out_dir, const TrainProgress& progress) {
  validate(cfg);
  check(!data.samples.empty(), ErrorKind::Data, "train: empty dataset");
  check(encoder.config.channels == cfg.model.channels, ErrorKind::Config,
        "train: model channel count must match the encoder");
  const uint64_t digest = encoder_weights_digest(encoder);

  std::vector<EncodedSample> samples;
  samples.reserve(data.samples.size());
  for (const auto& s : data.samples) samples.push_back(encode_sample(s, encoder));

  // Fixed validation samples for checkpoint scoring: same generator as the
  // dataset but single-mode, on an independent stream.
  std::vector<EncodedSample> val;
  SampleConfig vc = data.config;
  vc.multimodal = false;
  for (int i = 0; i < cfg.smoke_samples; ++i) {
    AlignmentSample s = build_sample(vc, derive_seed(cfg.seed, "val", uint64_t(i)));
    val.push_back(encode_sample(s, encoder));
  }

  TrainResult res;
  res.rotation = train_mode(cfg, EnergyMode::Rotation, samples, val, digest, out_dir,
                            res.state.rotation, progress);
  res.translation = train_mode(cfg, EnergyMode::Translation, samples, val, digest, out_dir,
                               res.state.translation, progress);
  return res;
}

template NegativeSet sample_negatives<float>(const TrainConfig&, int, EnergyMode,
                                             const std::vector<PairGraph>&, const PairGraph&,
                                             const EnergyModelParams<float>&, Rng&);
template NegativeSet sample_negatives<double>(const TrainConfig&, int, EnergyMode,
                                              const std::vector<PairGraph>&, const PairGraph&,
                                              const EnergyModelParams<double>&, Rng&);

}  // namespace galign
