#include "galign/training.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/Geometry>

#include "galign/error.hpp"
#include "galign/rng.hpp"

using namespace galign;

namespace {

LocalFeatureSet random_features(Rng& rng, int k, int c) {
  LocalFeatureSet f;
  f.positions.resize(k, 3);
  for (int i = 0; i < k; ++i) {
    f.positions.row(i) = (0.2 * rng.normal3()).transpose();
    Eigen::Matrix<double, Eigen::Dynamic, 3> m(c, 3);
    for (int r = 0; r < c; ++r) m.row(r) = rng.normal3().transpose();
    f.features.push_back(m);
  }
  return f;
}

ModelConfig mini_config(EnergyMode mode) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 3;
  cfg.mlp_dims = {5, 4};
  cfg.l_edge = 2;
  cfg.channels = 4;
  cfg.mode = mode;
  return cfg;
}

EnergyModelParams<float> random_fmodel(EnergyMode mode, uint64_t seed) {
  auto p = init_energy_model<float>(mini_config(mode), seed);
  Rng rng(seed + 17);
  for (auto [ptr, n] : energy_param_refs(p))
    for (int64_t i = 0; i < n; ++i) ptr[i] = float(0.3 * rng.normal());
  return p;
}

// n_demos context pairs plus a target pair, straight from fake encodings.
EncodedSample synthetic_sample(Rng& rng, int n_demos, int k = 3, int c = 4) {
  EncodedSample s;
  s.sample_seed = rng.next_u64();
  for (int i = 0; i < n_demos + 1; ++i)
    s.pairs.emplace_back(random_features(rng, k, c), random_features(rng, k, c));
  return s;
}

Eigen::Vector3d target_centroid(const EncodedSample& s) {
  const auto& pos = s.pairs.back().first.positions;
  return pos.colwise().mean().transpose();
}

TrainConfig tiny_config(EnergyMode mode) {
  TrainConfig cfg;
  cfg.model = mini_config(mode);
  cfg.n_neg = 8;
  cfg.total_steps = 12;
  cfg.phase1_steps = 5;
  cfg.langevin_every = 3;
  cfg.langevin_neg_steps = 2;
  cfg.checkpoint_every = 6;
  cfg.smoke_samples = 2;
  cfg.smoke_restarts = 2;
  cfg.smoke_steps = 3;
  cfg.subset_pretrain_steps = 0;
  cfg.seed = 5;
  return cfg;
}

std::string fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("galign_train_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool params_equal(EnergyModelParams<float>& a, EnergyModelParams<float>& b) {
  auto ra = energy_param_refs(a);
  auto rb = energy_param_refs(b);
  if (ra.size() != rb.size()) return false;
  for (size_t r = 0; r < ra.size(); ++r) {
    if (ra[r].second != rb[r].second) return false;
    for (int64_t i = 0; i < ra[r].second; ++i)
      if (ra[r].first[i] != rb[r].first[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("train config validation rejects broken settings") {
  TrainConfig good;
  good.model = mini_config(EnergyMode::Rotation);
  CHECK_NOTHROW(validate(good));

  auto broken = [&](auto&& poke) {
    TrainConfig c = good;
    poke(c);
    CHECK_THROWS_AS(validate(c), Error);
  };
  broken([](TrainConfig& c) { c.n_neg = 0; });
  broken([](TrainConfig& c) { c.batch_size = 0; });
  broken([](TrainConfig& c) { c.l2_logit_coeff = 0; });
  broken([](TrainConfig& c) { c.grad_penalty_coeff = -1; });
  broken([](TrainConfig& c) { c.lr = 0; });
  broken([](TrainConfig& c) { c.phase2_trans = c.phase1_trans * 2; });
  broken([](TrainConfig& c) { c.phase2_rot = c.phase1_rot * 2; });
  broken([](TrainConfig& c) { c.phase2_trans = c.guard_trans / 2; });
  broken([](TrainConfig& c) { c.langevin_share = 1.5; });
  broken([](TrainConfig& c) { c.langevin_every = 0; });
  broken([](TrainConfig& c) { c.ring_size = 0; });
}

TEST_CASE("infonce loss matches the softmax oracle") {
  SUBCASE("equal energies give log(n+1) regardless of the common level") {
    for (double c : {-3.0, 0.0, 2.5, 1e4}) {
      Eigen::VectorXd negs = Eigen::VectorXd::Constant(255, c);
      InfoNceResult r = infonce_loss(c, negs);
      CHECK(r.loss == doctest::Approx(std::log(256.0)).epsilon(1e-12));
    }
  }

  SUBCASE("small hand case") {
    Eigen::VectorXd negs(2);
    negs << 1.0, 2.0;
    InfoNceResult r = infonce_loss(0.0, negs);
    const double oracle = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
    CHECK(r.loss == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(0.4076).epsilon(2e-4));
  }

  SUBCASE("dominant positive drives the loss to zero") {
    Eigen::VectorXd negs(3);
    negs << 1.0, 2.0, 3.0;
    InfoNceResult r = infonce_loss(-40.0, negs);
    CHECK(r.loss >= 0.0);
    CHECK(r.loss < 1e-12);
  }

  SUBCASE("stable at energy magnitude 1e4") {
    Eigen::VectorXd negs(2);
    negs << -1e4, 0.0;
    InfoNceResult hi = infonce_loss(1e4, negs);
    CHECK(std::isfinite(hi.loss));
    CHECK(hi.loss > 1.9e4);

    Eigen::VectorXd far(1);
    far << 1e4;
    InfoNceResult lo = infonce_loss(-1e4, far);
    CHECK(std::isfinite(lo.loss));
    CHECK(lo.loss >= 0.0);
    CHECK(lo.loss < 1e-12);
  }

  SUBCASE("gradients match finite differences and sum to zero") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
      const double e_pos = 2.0 * rng.normal();
      Eigen::VectorXd negs(6);
      for (int i = 0; i < 6; ++i) negs(i) = 2.0 * rng.normal();
      InfoNceResult r = infonce_loss(e_pos, negs);
      CHECK(r.loss >= 0.0);

      const double h = 1e-6;
      double fd_pos =
          (infonce_loss(e_pos + h, negs).loss - infonce_loss(e_pos - h, negs).loss) / (2 * h);
      CHECK(r.d_pos == doctest::Approx(fd_pos).epsilon(1e-5));
      double sum = r.d_pos;
      for (int i = 0; i < 6; ++i) {
        Eigen::VectorXd np = negs, nm = negs;
        np(i) += h;
        nm(i) -= h;
        double fd = (infonce_loss(e_pos, np).loss - infonce_loss(e_pos, nm).loss) / (2 * h);
        CHECK(r.d_negs(i) == doctest::Approx(fd).epsilon(1e-5));
        sum += r.d_negs(i);
      }
      CHECK(std::abs(sum) < 1e-12);
    }
  }
}

TEST_CASE("negative perturbations respect mode and guard") {
  Rng rng(7);
  const Eigen::Vector3d anchor(0.3, -0.2, 0.5);
  const double guard_t = 1e-3, guard_r = 0.1 * M_PI / 180.0;

  SUBCASE("rotation mode keeps the anchor and clears the guard") {
    const double range = 3.0 * guard_r;  // most raw draws are rejected
    for (int i = 0; i < 2000; ++i) {
      RigidTransform t = sample_negative_transform(EnergyMode::Rotation, 0.1, range, guard_t,
                                                   guard_r, anchor, rng);
      CHECK((t.apply(anchor) - anchor).norm() < 1e-12);
      const double ang = rotation_distance(t.rotation(), Eigen::Matrix3d::Identity());
      CHECK(ang >= guard_r);
      CHECK(ang <= range + 1e-12);
    }
  }

  SUBCASE("translation mode keeps the rotation and clears the guard") {
    const double range = 3.0 * guard_t;
    for (int i = 0; i < 2000; ++i) {
      RigidTransform t = sample_negative_transform(EnergyMode::Translation, range, 1.0, guard_t,
                                                   guard_r, anchor, rng);
      CHECK((t.rotation() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
      CHECK((t.apply(anchor) - anchor).norm() >= guard_t);
      CHECK(t.translation().cwiseAbs().maxCoeff() <= range);
    }
  }
}

TEST_CASE("negative sets follow the phase schedule") {
  Rng rng(91);
  EncodedSample s = synthetic_sample(rng, 1);
  std::vector<PairGraph> demos{
      build_pair_graph(s.pairs[0].first, s.pairs[0].second, 2)};
  PairGraph target = build_pair_graph(s.pairs[1].first, s.pairs[1].second, 2);
  const Eigen::Vector3d anchor = target_centroid(s);

  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  cfg.n_neg = 16;
  cfg.phase1_steps = 10;
  cfg.langevin_every = 5;
  cfg.phase1_trans = 0.4;
  cfg.phase1_rot = M_PI;
  cfg.phase2_trans = 0.05;
  cfg.phase2_rot = M_PI / 8;

  auto params = random_fmodel(EnergyMode::Translation, 3);

  SUBCASE("phase 1 is uniform at the wide ranges") {
    Rng r2(1);
    NegativeSet negs =
        sample_negatives(cfg, 0, EnergyMode::Translation, demos, target, params, r2);
    CHECK(int(negs.transforms.size()) == 16);
    CHECK(negs.n_langevin == 0);
    bool any_wide = false;
    for (const auto& t : negs.transforms) {
      CHECK((t.rotation() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
      CHECK(t.translation().cwiseAbs().maxCoeff() <= 0.4 + 1e-12);
      any_wide = any_wide || t.translation().cwiseAbs().maxCoeff() > 0.05;
    }
    CHECK(any_wide);  // phase-2 ranges would make this astronomically unlikely
  }

  SUBCASE("phase 2 off-cycle steps shrink to the tight ranges") {
    Rng r2(2);
    NegativeSet negs =
        sample_negatives(cfg, 11, EnergyMode::Translation, demos, target, params, r2);
    CHECK(negs.n_langevin == 0);
    for (const auto& t : negs.transforms) {
      CHECK(t.translation().cwiseAbs().maxCoeff() <= 0.05 + 1e-12);
      CHECK(!within_collision_guard(t, anchor, cfg.guard_trans, cfg.guard_rot));
    }
  }

  SUBCASE("phase 2 chain steps mix in mode-pure sampler negatives") {
    Rng r2(3);
    NegativeSet negs =
        sample_negatives(cfg, 10, EnergyMode::Translation, demos, target, params, r2);
    CHECK(int(negs.transforms.size()) == 16);
    CHECK(negs.n_langevin <= 8);
    CHECK(negs.n_langevin >= 1);  // a wholesale collapse onto the positive would be a bug
    for (const auto& t : negs.transforms) {
      CHECK((t.rotation() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
      CHECK(!within_collision_guard(t, anchor, cfg.guard_trans, cfg.guard_rot));
    }
  }

  SUBCASE("rotation mode pins the anchor through chains") {
    TrainConfig rc = cfg;
    rc.model = mini_config(EnergyMode::Rotation);
    auto rparams = random_fmodel(EnergyMode::Rotation, 4);
    Rng r2(4);
    NegativeSet negs =
        sample_negatives(rc, 10, EnergyMode::Rotation, demos, target, rparams, r2);
    CHECK(int(negs.transforms.size()) == 16);
    for (const auto& t : negs.transforms) {
      CHECK((t.apply(anchor) - anchor).norm() < 1e-9);
      CHECK(!within_collision_guard(t, anchor, cfg.guard_trans, cfg.guard_rot));
    }
  }
}

TEST_CASE("a fresh model starts at the uniform-softmax loss") {
  Rng rng(17);
  EncodedSample s = synthetic_sample(rng, 1);

  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  cfg.n_neg = 256;
  ModeTrainState state;
  state.params = init_energy_model<float>(cfg.model, 9);  // zero head: all energies 0
  const EnergyModelParams<float> fallback = state.params;

  Rng step_rng(1);
  StepMetrics m = train_step(cfg, state, {&s}, fallback, step_rng);
  CHECK(m.loss == doctest::Approx(std::log(257.0)).epsilon(1e-9));
  CHECK(std::abs(m.loss - std::log(257.0)) < 0.1);
  CHECK(m.e_pos == 0.0);
  CHECK(m.e_neg_mean == 0.0);
  CHECK(m.e_max == 0.0);
  CHECK(m.e_min == 0.0);
  CHECK(m.phase == 1);
  CHECK(!m.aborted);
  CHECK(state.step == 1);
}

TEST_CASE("repeated steps on one sample reduce the loss") {
  Rng rng(23);
  EncodedSample s = synthetic_sample(rng, 1);

  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  cfg.n_neg = 8;
  cfg.total_steps = 30;
  cfg.phase1_steps = 100;  // stay in phase 1: pure uniform negatives
  cfg.lr = 3e-3;

  ModeTrainState state;
  state.params = random_fmodel(EnergyMode::Translation, 29);
  const EnergyModelParams<float> fallback = state.params;
  Rng step_rng(2);

  std::vector<double> losses;
  for (int i = 0; i < 30; ++i) {
    StepMetrics m = train_step(cfg, state, {&s}, fallback, step_rng);
    CHECK(std::isfinite(m.loss));
    CHECK(!m.aborted);
    losses.push_back(m.loss);
  }
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += losses[size_t(i)] / 5;
    tail += losses[size_t(25 + i)] / 5;
  }
  CHECK(tail < head);
}

TEST_CASE("non-finite losses roll back to the newest checkpoint") {
  Rng rng(41);
  EncodedSample s = synthetic_sample(rng, 1);
  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  const std::string dir = fresh_dir("abort");

  ModeTrainState state;
  state.params = random_fmodel(EnergyMode::Translation, 43);
  EnergyModelParams<float> snapshot = state.params;
  const EnergyModelParams<float> fallback = state.params;

  SUBCASE("restores from the ring and zeroes the moments") {
    CheckpointInfo info;
    info.step = 1;
    info.score = 0.5;
    info.path = dir + "/ck.ckpt";
    save_energy_model(state.params, info.path);
    state.ring.push_back(info);

    state.params.head_b.back()(0) = std::numeric_limits<float>::quiet_NaN();
    Rng step_rng(3);
    StepMetrics m = train_step(cfg, state, {&s}, fallback, step_rng);
    CHECK(m.aborted);
    CHECK(state.aborts == 1);
    CHECK(params_equal(state.params, snapshot));
    CHECK(state.opt.t == 0);

    // A clean step runs fine afterwards.
    StepMetrics m2 = train_step(cfg, state, {&s}, fallback, step_rng);
    CHECK(!m2.aborted);
    CHECK(std::isfinite(m2.loss));
  }

  SUBCASE("falls back to the supplied params when the ring is empty") {
    state.params.head_b.back()(0) = std::numeric_limits<float>::quiet_NaN();
    Rng step_rng(4);
    StepMetrics m = train_step(cfg, state, {&s}, fallback, step_rng);
    CHECK(m.aborted);
    CHECK(params_equal(state.params, snapshot));
  }

  SUBCASE("gives up after max_aborts recoveries") {
    TrainConfig strict = cfg;
    strict.max_aborts = 0;
    state.params.head_b.back()(0) = std::numeric_limits<float>::quiet_NaN();
    Rng step_rng(5);
    CHECK_THROWS_AS(train_step(strict, state, {&s}, fallback, step_rng), Error);
  }
}

TEST_CASE("the phase switch passes without tripping the abort guard") {
  Rng rng(53);
  std::vector<EncodedSample> samples{synthetic_sample(rng, 1), synthetic_sample(rng, 2)};
  std::vector<EncodedSample> val{synthetic_sample(rng, 1), synthetic_sample(rng, 1)};

  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  cfg.n_neg = 6;
  const std::string dir = fresh_dir("phase");

  ModeTrainState state;
  ModeTrainResult res =
      train_mode(cfg, EnergyMode::Translation, samples, val, 777, dir, state);

  REQUIRE(int(state.log.size()) == cfg.total_steps);
  for (const StepMetrics& m : state.log) {
    CHECK(!m.aborted);
    CHECK(std::isfinite(m.loss));
    CHECK(m.phase == (m.step >= cfg.phase1_steps ? 2 : 1));
  }
  CHECK(state.log[4].phase == 1);
  CHECK(state.log[5].phase == 2);

  CHECK(std::filesystem::exists(res.selected_checkpoint));
  CHECK(res.selected_score >= 0.0);
  CHECK(res.init_score > 0.0);
  REQUIRE(int(state.ring.size()) == 2);  // checkpoints at steps 6 and 12
  CHECK(state.ring[0].step == 6);
  CHECK(state.ring[1].step == 12);
  const double best = std::min(state.ring[0].score, state.ring[1].score);
  CHECK(res.selected_score == best);

  const std::string csv = slurp(dir + "/metrics_translation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == cfg.total_steps + 1);
  CHECK(csv.rfind("step,loss,e_pos,e_neg_mean,e_max,e_min,phase\n", 0) == 0);
}

TEST_CASE("identical runs write identical metric logs") {
  Rng rng(67);
  std::vector<EncodedSample> samples{synthetic_sample(rng, 1), synthetic_sample(rng, 1)};
  std::vector<EncodedSample> val{synthetic_sample(rng, 1)};

  TrainConfig cfg = tiny_config(EnergyMode::Rotation);
  cfg.n_neg = 6;

  const std::string da = fresh_dir("det_a");
  const std::string db = fresh_dir("det_b");
  ModeTrainState sa, sb;
  train_mode(cfg, EnergyMode::Rotation, samples, val, 1, da, sa);
  train_mode(cfg, EnergyMode::Rotation, samples, val, 1, db, sb);

  CHECK(slurp(da + "/metrics_rotation.csv") == slurp(db + "/metrics_rotation.csv"));
  CHECK(params_equal(sa.params, sb.params));
}

TEST_CASE("the checkpoint ring keeps its cap and the best survives eviction") {
  Rng rng(71);
  std::vector<EncodedSample> samples{synthetic_sample(rng, 1)};
  std::vector<EncodedSample> val{synthetic_sample(rng, 1)};

  TrainConfig cfg = tiny_config(EnergyMode::Translation);
  cfg.n_neg = 4;
  cfg.total_steps = 10;
  cfg.phase1_steps = 100;
  cfg.checkpoint_every = 2;
  cfg.ring_size = 3;
  cfg.smoke_restarts = 1;
  cfg.smoke_steps = 2;
  const std::string dir = fresh_dir("ring");

  ModeTrainState state;
  ModeTrainResult res =
      train_mode(cfg, EnergyMode::Translation, samples, val, 2, dir, state);

  REQUIRE(int(state.ring.size()) == 3);  // 5 evaluated, 2 evicted
  CHECK(state.ring[0].step == 6);
  CHECK(state.ring[2].step == 10);
  for (const CheckpointInfo& c : state.ring) CHECK(std::filesystem::exists(c.path));
  CHECK(std::filesystem::exists(res.selected_checkpoint));  // even if evicted

  double best = state.ring[0].score;
  for (const CheckpointInfo& c : state.ring) best = std::min(best, c.score);
  CHECK(res.selected_score <= best);
}

TEST_CASE("training on a generated dataset produces loadable checkpoints") {
  SampleConfig sc;
  sc.n_pairs = 2;
  sc.n_views = 1;
  sc.points_per_view = 96;
  Dataset data = generate_dataset(sc, 3, 2024);

  EncoderConfig ec;
  ec.k_centroids = 4;
  ec.channels = 8;
  ec.l_freq_query = 4;
  EncoderParams enc = init_encoder(ec, 5);

  TrainConfig cfg;
  cfg.model = mini_config(EnergyMode::Rotation);
  cfg.model.channels = 8;
  cfg.n_neg = 5;
  cfg.batch_size = 2;
  cfg.total_steps = 6;
  cfg.phase1_steps = 3;
  cfg.langevin_every = 2;
  cfg.langevin_neg_steps = 2;
  cfg.checkpoint_every = 3;
  cfg.subset_pretrain_size = 2;
  cfg.subset_pretrain_steps = 2;
  cfg.smoke_samples = 2;
  cfg.smoke_restarts = 2;
  cfg.smoke_steps = 3;
  cfg.seed = 11;
  const std::string dir = fresh_dir("e2e");

  TrainResult res = train(cfg, data, enc, dir);

  auto rot = load_energy_model<float>(res.rotation.selected_checkpoint);
  auto tra = load_energy_model<float>(res.translation.selected_checkpoint);
  CHECK(rot.config.mode == EnergyMode::Rotation);
  CHECK(tra.config.mode == EnergyMode::Translation);
  CHECK(rot.encoder_digest == encoder_weights_digest(enc));
  CHECK(tra.encoder_digest == rot.encoder_digest);
  CHECK(rot.step > 0);

  CHECK(std::isfinite(res.rotation.selected_score));
  CHECK(std::isfinite(res.translation.selected_score));
  CHECK(res.rotation.init_score > 0.0);
  CHECK(res.translation.init_score > 0.0);

  for (const char* f : {"/metrics_rotation.csv", "/metrics_translation.csv"}) {
    const std::string csv = slurp(dir + f);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == cfg.total_steps + 1);
  }
}

TEST_CASE("a channel mismatch against the encoder is rejected") {
  SampleConfig sc;
  sc.n_pairs = 2;
  sc.n_views = 1;
  sc.points_per_view = 96;
  Dataset data = generate_dataset(sc, 1, 3);

  EncoderConfig ec;
  ec.k_centroids = 4;
  ec.channels = 8;
  EncoderParams enc = init_encoder(ec, 5);

  TrainConfig cfg = tiny_config(EnergyMode::Rotation);  // channels 4 != 8
  CHECK_THROWS_AS(train(cfg, data, enc, fresh_dir("mismatch")), Error);
}

TEST_CASE("encoder weight digests track every byte") {
  EncoderConfig ec;
  ec.k_centroids = 4;
  ec.channels = 8;
  EncoderParams a = init_encoder(ec, 1);
  EncoderParams b = init_encoder(ec, 1);
  EncoderParams c = init_encoder(ec, 2);
  CHECK(encoder_weights_digest(a) == encoder_weights_digest(b));
  CHECK(encoder_weights_digest(a) != encoder_weights_digest(c));
  b.layers[0].w(0, 0) += 1e-12;
  CHECK(encoder_weights_digest(a) != encoder_weights_digest(b));
}

TEST_CASE("the cosine schedule spans the learning rate down to its floor") {
  TrainConfig cfg;
  cfg.lr = 2e-4;
  cfg.lr_floor_frac = 0.05;
  cfg.total_steps = 1000;
  CHECK(lr_at(cfg, 0) == doctest::Approx(2e-4).epsilon(1e-15));
  CHECK(lr_at(cfg, 1000) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(cfg, 2000) == doctest::Approx(1e-5).epsilon(1e-12));  // clamped past the end
  CHECK(lr_at(cfg, 500) == doctest::Approx(0.5 * (2e-4 + 1e-5)).epsilon(1e-12));
  double prev = lr_at(cfg, 0);
  for (int s = 1; s <= 1000; ++s) {
    double cur = lr_at(cfg, s);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }
}

TEST_CASE("assembled graphs put the positive candidate at the stored pose") {
  Rng rng(83);
  EncodedSample s = synthetic_sample(rng, 2, 3, 4);
  AlignmentGraph g = assemble_graph(s, 5, 2);
  CHECK(g.n_demos == 2);
  CHECK(g.n_candidates == 5);
  CHECK(g.k == 3);
  const auto& pos = s.pairs.back().first.positions;
  for (int i = 0; i < 3; ++i) {
    const auto& node = g.nodes[size_t(g.cand_node_start[0] + i)];
    CHECK((node.position - pos.row(i).transpose()).norm() == 0.0);
  }
}

TEST_CASE("smoke evaluation is deterministic and penalizes a dead model") {
  Rng rng(97);
  std::vector<EncodedSample> val{synthetic_sample(rng, 1), synthetic_sample(rng, 1)};
  TrainConfig cfg = tiny_config(EnergyMode::Rotation);
  cfg.smoke_restarts = 2;
  cfg.smoke_steps = 4;

  // Zero head: no gradient, chains never move, the random scramble survives.
  auto dead = init_energy_model<float>(cfg.model, 3);
  const double a = smoke_eval(cfg, dead, val, 123);
  const double b = smoke_eval(cfg, dead, val, 123);
  CHECK(a == b);
  CHECK(a > 0.01);
  CHECK(a <= M_PI);
}
