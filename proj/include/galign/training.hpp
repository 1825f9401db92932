#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "galign/dataset.hpp"
#include "galign/encoder.hpp"
#include "galign/energy.hpp"
#include "galign/graph.hpp"
#include "galign/inference.hpp"
#include "galign/rng.hpp"
#include "galign/se3.hpp"

namespace galign {

// Contrastive energy training: one positive candidate (the sample's stored
// aligned pose) against n_neg perturbed clones, mixed uniform/Langevin
// negative sampling in two phases, AdamW with cosine annealing, spectral
// normalization every step, and checkpoint selection by an inference smoke
// test. Rotation and translation models train independently on the same data
// with mode-restricted perturbations.

struct TrainConfig {
  int n_neg = 256;
  int batch_size = 1;      // samples per optimizer step (paper leaves unstated)
  int total_steps = 30000;  // per trained mode
  int phase1_steps = 10000;
  int langevin_every = 5;
  double phase1_trans = 0.8;  // metres
  double phase1_rot = 3.14159265358979323846;
  double phase2_trans = 0.1;
  double phase2_rot = 3.14159265358979323846 / 4.0;
  double l2_logit_coeff = 1e-4;
  double grad_penalty_coeff = 1e-2;
  double lr = 1e-4;  // cosine-annealed towards lr * lr_floor_frac (non-paper)
  double lr_floor_frac = 0.01;
  double weight_decay = 1e-4;  // decoupled
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int subset_pretrain_size = 1000;
  int subset_pretrain_steps = 5000;  // steps on the subset, within total_steps
  double langevin_share = 0.5;  // negatives from chains on chain steps
  int langevin_neg_steps = 8;   // chain length per mode pass
  double guard_trans = 1e-3;    // positive-collision guard: 1 mm ...
  double guard_rot = 0.1 * 3.14159265358979323846 / 180.0;  // ... and 0.1 degree
  int checkpoint_every = 1000;
  int ring_size = 10;      // evaluated checkpoints retained
  int smoke_samples = 10;  // fixed val samples scoring each checkpoint
  int smoke_restarts = 4;
  int smoke_steps = 60;
  int sigma_assert_every = 500;  // spectral estimates must sit in [0.9, 1.1]
  int sigma_warmup = 1000;       // steps before the band is enforced
  int max_aborts = 3;            // non-finite recoveries before giving up
  uint64_t seed = 0;
  ModelConfig model;  // mode is overridden per trained model
};

// Positive coefficients, phase2 ranges <= phase1 ranges, ranges above the
// collision guard (so resampling terminates).
void validate(const TrainConfig& c);

struct InfoNceResult {
  double loss = 0;
  double d_pos = 0;        // dL/de_pos
  Eigen::VectorXd d_negs;  // dL/de_neg_i
};

// -log(exp(-e_pos) / (exp(-e_pos) + sum exp(-e_negs))), max-shifted; stable
// for |e| up to 1e4. Gradients come along for free from the softmax.
InfoNceResult infonce_loss(double e_pos, const Eigen::VectorXd& e_negs);

// Mode-restricted perturbation: rotation mode spins about the anchor (the
// anchor stays put), translation mode shifts (rotation stays identity).
// Redrawn while within (guard_trans, guard_rot) of identity at the anchor.
RigidTransform sample_negative_transform(EnergyMode mode, double trans_range, double rot_range,
                                         double guard_trans, double guard_rot,
                                         const Eigen::Vector3d& anchor, Rng& rng);

// True when t moves the anchor less than guard_trans and rotates less than
// guard_rot: too close to the positive to be a negative.
bool within_collision_guard(const RigidTransform& t, const Eigen::Vector3d& anchor,
                            double guard_trans, double guard_rot);

struct NegativeSet {
  std::vector<RigidTransform> transforms;  // n_neg, relative to the gt pose
  int n_langevin = 0;                      // leading entries that came from chains
};

// The step's negatives. Phase 1 (step < phase1_steps): uniform in the phase-1
// ranges. Phase 2: uniform in the phase-2 ranges, and on every
// langevin_every-th step a langevin_share portion comes from short
// inference-sampler chains against the current params, started at random
// phase-1 poses. Chain results inside the guard (or non-finite) fall back to
// fresh uniform draws.
template <typename S>
NegativeSet sample_negatives(const TrainConfig& cfg, int step, EnergyMode mode,
                             const std::vector<PairGraph>& demos, const PairGraph& target,
                             const EnergyModelParams<S>& params, Rng& rng);

// Per-sample encodings, computed once (the encoder is frozen); graphs are
// assembled per step from these.
struct EncodedSample {
  std::vector<std::pair<LocalFeatureSet, LocalFeatureSet>> pairs;  // (grasped, target)
  uint64_t sample_seed = 0;
  std::vector<RigidTransform> gt_modes;  // target-pair alternatives, for eval
};

EncodedSample encode_sample(const AlignmentSample& s, const EncoderParams& enc);

// Context + candidate graph for one sample: demos from pairs[0..n-2], test
// from the last pair, 1 + n_candidates clones (candidate 0 is the positive).
AlignmentGraph assemble_graph(const EncodedSample& s, int n_candidates, int l_edge);

struct AdamState {
  std::vector<Eigen::VectorXf> m, v;  // per registry tensor, flat
  int64_t t = 0;
};

struct StepMetrics {
  int step = 0;
  double loss = 0, e_pos = 0, e_neg_mean = 0, e_max = 0, e_min = 0;
  int phase = 1;
  bool aborted = false;
};

struct CheckpointInfo {
  int step = 0;
  double score = 0;  // smoke-test median error (radians or metres by mode)
  std::string path;
};

struct ModeTrainState {
  EnergyModelParams<float> params;
  AdamState opt;
  int step = 0;
  int aborts = 0;
  std::vector<CheckpointInfo> ring;  // newest last, capped at ring_size
  std::vector<StepMetrics> log;
};

// Both trained modes; the spec-level training state.
struct TrainState {
  ModeTrainState rotation, translation;
};

// One optimizer step on a batch of samples: per sample negatives drawn and
// applied, InfoNCE + L2-logit + gradient-penalty loss, gradients averaged,
// one AdamW update, one spectral normalization. A non-finite loss rolls
// params back to the newest ring checkpoint (or the supplied fallback) and
// zeroes the moments instead of updating.
StepMetrics train_step(const TrainConfig& cfg, ModeTrainState& state,
                       const std::vector<const EncodedSample*>& batch,
                       const EnergyModelParams<float>& fallback, Rng& rng);

// Cosine-annealed learning rate at a step.
double lr_at(const TrainConfig& cfg, int step);

// Median smoke-test error of `params` over the fixed val samples: scramble
// the target candidate (mode-restricted, phase-1 ranges), run a single-mode
// Langevin search, measure how much of the scramble survives.
double smoke_eval(const TrainConfig& cfg, const EnergyModelParams<float>& params,
                  const std::vector<EncodedSample>& val, uint64_t seed);

struct ModeTrainResult {
  std::string selected_checkpoint;
  double selected_score = 0;
  double init_score = 0;
  int selected_step = 0;
};

struct TrainResult {
  ModeTrainResult rotation, translation;
  TrainState state;
};

using TrainProgress = std::function<void(EnergyMode mode, const StepMetrics&)>;

// Trains one mode end to end: subset pretraining, phase switch, periodic
// checkpoint evaluation into the ring, selection of the lowest-score
// checkpoint. Appends metrics to <out_dir>/metrics_<mode>.csv.
ModeTrainResult train_mode(const TrainConfig& cfg, EnergyMode mode,
                           const std::vector<EncodedSample>& samples,
                           const std::vector<EncodedSample>& val, uint64_t encoder_digest,
                           const std::string& out_dir, ModeTrainState& state,
                           const TrainProgress& progress = {});

// Both modes against a frozen encoder; returns selected checkpoints sharing
// the encoder digest.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const EncoderParams& encoder,
                  const std::string& out_dir, const TrainProgress& progress = {});

}  // namespace galign
