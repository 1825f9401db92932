#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "galign/shapes.hpp"

namespace galign {

struct Dataset {
  SampleConfig config;
  uint64_t root_seed = 0;
  std::vector<AlignmentSample> samples;

  int64_t size() const { return int64_t(samples.size()); }
  bool operator==(const Dataset& o) const;
};

// Versioned binary container (little-endian): header (magic, version, config
// digest, root seed, count), then length-prefixed sample records — clouds as
// f32, ids as i32, poses as 12 f64. A JSON sidecar (<path>.json) records the
// config and seeds for auditability. Load parses fully before returning: a
// truncated or corrupt file never yields a partial dataset.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Training ledger consumed by eval-set builders for exclusion rules.
struct ManifestEntry {
  uint64_t sample_seed = 0;
  int32_t category_a = -1, category_b = -1;
  uint64_t instance_seed_a = 0, instance_seed_b = 0;
  int32_t anchor_a = -1, anchor_b = -1;
};

struct Manifest {
  uint64_t config_digest = 0;
  uint64_t root_seed = 0;
  std::vector<ManifestEntry> entries;

  bool has_instance(uint64_t seed) const;
  bool has_category(int32_t cat) const;
};

Manifest manifest_of(const Dataset& ds);
void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

// Generates n samples from derived per-sample seeds (parallel over samples).
Dataset generate_dataset(const SampleConfig& config, int64_t n, uint64_t root_seed);

uint64_t file_digest(const std::string& path);

}  // namespace galign
