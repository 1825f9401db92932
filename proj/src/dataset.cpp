#include "galign/dataset.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "galign/binio.hpp"
#include "galign/error.hpp"
#include "galign/parallel.hpp"
#include "galign/rng.hpp"

namespace galign {

namespace {

constexpr char kMagic[8] = {'G', 'A', 'L', 'N', 'D', 'S', '0', '1'};
constexpr uint32_t kVersion = 1;

void put_pose(BinWriter& w, const RigidTransform& t) {
  for (double v : t.to_array()) w.put(v);
}

RigidTransform get_pose(BinReader& r) {
  std::array<double, 12> a;
  for (double& v : a) v = r.get<double>();
  return RigidTransform::from_array(a);
}

void put_cloud(BinWriter& w, const PointCloud& c) {
  w.put(uint32_t(c.size()));
  uint8_t flags = uint8_t((c.has_ids() ? 1 : 0) | (c.has_normals() ? 2 : 0));
  w.put(flags);
  w.put_bytes(c.points.data(), size_t(c.size()) * 3 * sizeof(float));
  if (c.has_ids()) w.put_bytes(c.ids.data(), c.ids.size() * sizeof(int32_t));
  if (c.has_normals()) w.put_bytes(c.normals.data(), size_t(c.size()) * 3 * sizeof(float));
}

PointCloud get_cloud(BinReader& r) {
  PointCloud c;
  uint32_t n = r.get<uint32_t>();
  uint8_t flags = r.get<uint8_t>();
  c.points.resize(n, 3);
  r.get_bytes(c.points.data(), size_t(n) * 3 * sizeof(float));
  if (flags & 1) {
    c.ids.resize(n);
    r.get_bytes(c.ids.data(), size_t(n) * sizeof(int32_t));
  }
  if (flags & 2) {
    c.normals.resize(n, 3);
    r.get_bytes(c.normals.data(), size_t(n) * 3 * sizeof(float));
  }
  return c;
}

void put_sample(BinWriter& w, const AlignmentSample& s) {
  w.put(s.sample_seed);
  w.put(s.category_a);
  w.put(s.category_b);
  w.put(s.instance_seed_a);
  w.put(s.instance_seed_b);
  w.put(s.anchor_a);
  w.put(s.anchor_b);
  w.put(s.anchor_a2);
  w.put(s.anchor_b2);
  w.put(uint32_t(s.modes.size()));
  for (const auto& m : s.modes) put_pose(w, m);
  w.put(uint32_t(s.pairs.size()));
  for (size_t i = 0; i < s.pairs.size(); ++i) {
    w.put(s.pair_mode[i]);
    put_pose(w, s.pairs[i].pose_a);
    put_pose(w, s.pairs[i].pose_b);
    put_pose(w, s.pairs[i].gt_relative);
    put_cloud(w, s.pairs[i].cloud_a);
    put_cloud(w, s.pairs[i].cloud_b);
  }
}

AlignmentSample get_sample(BinReader& r) {
  AlignmentSample s;
  s.sample_seed = r.get<uint64_t>();
  s.category_a = r.get<int32_t>();
  s.category_b = r.get<int32_t>();
  s.instance_seed_a = r.get<uint64_t>();
  s.instance_seed_b = r.get<uint64_t>();
  s.anchor_a = r.get<int32_t>();
  s.anchor_b = r.get<int32_t>();
  s.anchor_a2 = r.get<int32_t>();
  s.anchor_b2 = r.get<int32_t>();
  uint32_t n_modes = r.get<uint32_t>();
  for (uint32_t i = 0; i < n_modes; ++i) s.modes.push_back(get_pose(r));
  uint32_t n_pairs = r.get<uint32_t>();
  for (uint32_t i = 0; i < n_pairs; ++i) {
    s.pair_mode.push_back(r.get<int32_t>());
    AlignedPair p;
    p.pose_a = get_pose(r);
    p.pose_b = get_pose(r);
    p.gt_relative = get_pose(r);
    p.cloud_a = get_cloud(r);
    p.cloud_b = get_cloud(r);
    s.pairs.push_back(std::move(p));
  }
  return s;
}

bool pose_equal(const RigidTransform& a, const RigidTransform& b) {
  return a.to_array() == b.to_array();
}

}  // namespace

bool Dataset::operator==(const Dataset& o) const {
  if (root_seed != o.root_seed || samples.size() != o.samples.size()) return false;
  if (config.digest() != o.config.digest()) return false;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto &a = samples[i], &b = o.samples[i];
    if (a.sample_seed != b.sample_seed || a.category_a != b.category_a ||
        a.category_b != b.category_b || a.instance_seed_a != b.instance_seed_a ||
        a.instance_seed_b != b.instance_seed_b || a.anchor_a != b.anchor_a ||
        a.anchor_b != b.anchor_b || a.anchor_a2 != b.anchor_a2 || a.anchor_b2 != b.anchor_b2 ||
        a.pair_mode != b.pair_mode || a.modes.size() != b.modes.size() ||
        a.pairs.size() != b.pairs.size())
      return false;
    for (size_t m = 0; m < a.modes.size(); ++m)
      if (!pose_equal(a.modes[m], b.modes[m])) return false;
    for (size_t p = 0; p < a.pairs.size(); ++p) {
      if (!pose_equal(a.pairs[p].pose_a, b.pairs[p].pose_a) ||
          !pose_equal(a.pairs[p].pose_b, b.pairs[p].pose_b) ||
          !pose_equal(a.pairs[p].gt_relative, b.pairs[p].gt_relative) ||
          !(a.pairs[p].cloud_a == b.pairs[p].cloud_a) ||
          !(a.pairs[p].cloud_b == b.pairs[p].cloud_b))
        return false;
    }
  }
  return true;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  BinWriter header;
  header.put_bytes(kMagic, sizeof(kMagic));
  header.put(kVersion);
  header.put(ds.config.digest());
  header.put(ds.root_seed);
  header.put(uint64_t(ds.samples.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrorKind::Io, "save_dataset: cannot open " + path);
  f.write(header.buf.data(), std::streamsize(header.buf.size()));
  for (const auto& s : ds.samples) {
    BinWriter w;
    put_sample(w, s);
    uint64_t len = w.buf.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(w.buf.data(), std::streamsize(w.buf.size()));
  }
  check(f.good(), ErrorKind::Io, "save_dataset: write failed for " + path);
  f.close();

  nlohmann::json j;
  j["version"] = kVersion;
  j["config_digest"] = ds.config.digest();
  j["root_seed"] = ds.root_seed;
  j["n_samples"] = ds.samples.size();
  j["config"] = {{"n_pairs", ds.config.n_pairs},
                 {"magnitude_lo", ds.config.magnitude_lo},
                 {"magnitude_hi", ds.config.magnitude_hi},
                 {"aniso_extent", ds.config.aniso_extent},
                 {"n_warp_kernels", ds.config.n_warp_kernels},
                 {"multimodal", ds.config.multimodal},
                 {"neighborhood_radius", ds.config.neighborhood_radius},
                 {"n_views", ds.config.n_views},
                 {"points_per_view", ds.config.points_per_view},
                 {"place_trans_range", ds.config.place_trans_range},
                 {"residual_limit_factor", ds.config.residual_limit_factor},
                 {"categories", ds.config.categories}};
  std::vector<uint64_t> seeds;
  for (const auto& s : ds.samples) seeds.push_back(s.sample_seed);
  j["sample_seeds"] = seeds;
  std::ofstream side(path + ".json");
  check(side.good(), ErrorKind::Io, "save_dataset: cannot open sidecar");
  side << j.dump(1) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Io, "load_dataset: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string bytes = ss.str();
  BinReader r{bytes.data(), bytes.data() + bytes.size()};

  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  check(std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::Data,
        "load_dataset: bad magic (not a dataset file or corrupt header)");
  uint32_t version = r.get<uint32_t>();
  check(version == kVersion, ErrorKind::Data,
        "load_dataset: unsupported version " + std::to_string(version));
  Dataset ds;
  uint64_t digest = r.get<uint64_t>();
  ds.root_seed = r.get<uint64_t>();
  uint64_t n = r.get<uint64_t>();
  ds.samples.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    uint64_t len = r.get<uint64_t>();
    check(r.p + len <= r.end, ErrorKind::Data, "load_dataset: truncated record");
    BinReader rec{r.p, r.p + len};
    ds.samples.push_back(get_sample(rec));
    check(rec.p == rec.end, ErrorKind::Data, "load_dataset: record length mismatch");
    r.p += len;
  }
  check(r.p == r.end, ErrorKind::Data, "load_dataset: trailing bytes");

  // Config lives in the sidecar; restore what downstream consumers need.
  std::ifstream side(path + ".json");
  if (side.good()) {
    nlohmann::json j;
    side >> j;
    const auto& c = j.at("config");
    ds.config.n_pairs = c.at("n_pairs");
    ds.config.magnitude_lo = c.at("magnitude_lo");
    ds.config.magnitude_hi = c.at("magnitude_hi");
    ds.config.aniso_extent = c.at("aniso_extent");
    ds.config.n_warp_kernels = c.at("n_warp_kernels");
    ds.config.multimodal = c.at("multimodal");
    ds.config.neighborhood_radius = c.at("neighborhood_radius");
    ds.config.n_views = c.at("n_views");
    ds.config.points_per_view = c.at("points_per_view");
    ds.config.place_trans_range = c.at("place_trans_range");
    ds.config.residual_limit_factor = c.at("residual_limit_factor");
    ds.config.categories = c.at("categories").get<std::vector<int>>();
    check(ds.config.digest() == digest, ErrorKind::Data,
          "load_dataset: sidecar config digest mismatch");
  }
  return ds;
}

bool Manifest::has_instance(uint64_t seed) const {
  for (const auto& e : entries)
    if (e.instance_seed_a == seed || e.instance_seed_b == seed) return true;
  return false;
}

bool Manifest::has_category(int32_t cat) const {
  for (const auto& e : entries)
    if (e.category_a == cat || e.category_b == cat) return true;
  return false;
}

Manifest manifest_of(const Dataset& ds) {
  Manifest m;
  m.config_digest = ds.config.digest();
  m.root_seed = ds.root_seed;
  for (const auto& s : ds.samples)
    m.entries.push_back({s.sample_seed, s.category_a, s.category_b, s.instance_seed_a,
                         s.instance_seed_b, s.anchor_a, s.anchor_b});
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  nlohmann::json j;
  j["config_digest"] = m.config_digest;
  j["root_seed"] = m.root_seed;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : m.entries)
    rows.push_back({{"sample_seed", e.sample_seed},
                    {"category_a", e.category_a},
                    {"category_b", e.category_b},
                    {"instance_seed_a", e.instance_seed_a},
                    {"instance_seed_b", e.instance_seed_b},
                    {"anchor_a", e.anchor_a},
                    {"anchor_b", e.anchor_b}});
  j["samples"] = rows;
  std::ofstream f(path);
  check(f.good(), ErrorKind::Io, "save_manifest: cannot open " + path);
  f << j.dump(1) << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), ErrorKind::Io, "load_manifest: cannot open " + path);
  nlohmann::json j;
  f >> j;
  Manifest m;
  m.config_digest = j.at("config_digest");
  m.root_seed = j.at("root_seed");
  for (const auto& row : j.at("samples"))
    m.entries.push_back({row.at("sample_seed"), row.at("category_a"), row.at("category_b"),
                         row.at("instance_seed_a"), row.at("instance_seed_b"),
                         row.at("anchor_a"), row.at("anchor_b")});
  return m;
}

Dataset generate_dataset(const SampleConfig& config, int64_t n, uint64_t root_seed) {
  Dataset ds;
  ds.config = config;
  ds.root_seed = root_seed;
  ds.samples.resize(size_t(n));
  std::vector<std::string> errors(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    uint64_t seed = derive_seed(root_seed, "dataset-sample", uint64_t(i));
    try {
      ds.samples[size_t(i)] = build_sample(config, seed);
    } catch (const Error& e) {
      errors[size_t(i)] = e.what();
    }
  });
  for (const auto& e : errors)
    check(e.empty(), ErrorKind::Data, "generate_dataset: " + e);
  return ds;
}

uint64_t file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Io, "file_digest: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    h = fnv1a(buf, size_t(f.gcount()), h);
    if (!f) break;
  }
  return h;
}

}  // namespace galign
