#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/grid_env.hpp"
#include "genpred/ppo.hpp"

namespace genpred::forge {

// Half-open range of environment seeds [begin, end).
struct SeedRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  bool overlaps(const SeedRange& other) const { return begin < other.end && other.begin < end && begin < end && other.begin < other.end; }
  std::string str() const;
};

// Throws SeedCollision naming the first overlapping pair.
void require_disjoint(std::span<const std::pair<std::string, SeedRange>> pools);

struct ForgeConfig {
  std::size_t n_agents = 200;
  std::size_t steps_per_agent = 200000;
  // When non-empty, agent i trains for step_tiers[i % size] steps instead.
  std::vector<std::size_t> step_tiers;
  env::GridSpec base_spec;  // seed field ignored; each agent/eval env gets its own
  std::uint64_t train_seed_base = 1000;
  std::size_t n_eval_envs = 100;
  std::uint64_t eval_seed_base = 1000000;
  env::NoiseConfig noise;
  int episodes_per_env = 1;
  std::uint64_t agent_seed_base = 0;  // network init and sampling streams
  int workers = 1;
  ppo::PpoConfig ppo;

  void validate() const;
  std::size_t steps_for(std::size_t agent) const;
  env::GridSpec train_spec(std::size_t agent) const;
  std::uint64_t trainer_seed(std::size_t agent) const;
  std::vector<env::GridSpec> eval_specs() const;
  SeedRange train_seeds() const { return {train_seed_base, train_seed_base + n_agents}; }
  SeedRange eval_seeds() const { return {eval_seed_base, eval_seed_base + n_eval_envs}; }
};

void to_json(nlohmann::json& j, const ForgeConfig& c);
void from_json(const nlohmann::json& j, ForgeConfig& c);

struct AgentRecord {
  std::string agent_id;
  std::size_t index = 0;
  std::uint64_t train_seed = 0;
  std::uint64_t trainer_seed = 0;
  std::size_t steps = 0;
  std::string weights_path;  // relative to the manifest directory
  std::string weights_sha256;
  double zeta = 0.0;
  std::uint64_t eval_seed_begin = 0;
  std::uint64_t eval_seed_end = 0;
  double wall_clock_seconds = 0.0;
  std::string trainer_config_hash;
  std::optional<std::string> error;

  bool ok() const { return !error.has_value(); }
};

void to_json(nlohmann::json& j, const AgentRecord& r);
void from_json(const nlohmann::json& j, AgentRecord& r);

struct DatasetManifest {
  int format_version = 1;
  ForgeConfig config;
  std::vector<AgentRecord> records;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

// Equality ignoring wall-clock fields.
bool same_modulo_wall_clock(const DatasetManifest& a, const DatasetManifest& b);

// Return of one greedy episode on `spec` with noisy observations. Noise for
// environment seed s uses the stream derive_seed(noise.seed, s) with draw
// index episode * (max_steps + 1) + t.
double greedy_episode_return(const ppo::PolicyNet& policy, const env::GridSpec& spec, const env::NoiseConfig& noise,
                             int episode);

// Mean greedy episode return over every (environment, episode). Throws
// EmptyEvalSet when eval_specs is empty.
double compute_zeta(const ppo::PolicyNet& policy, std::span<const env::GridSpec> eval_specs,
                    const env::NoiseConfig& noise, int episodes_per_env = 1);

using ProgressFn = std::function<void(const AgentRecord&)>;

// Trains and labels every agent, writes weights under out_dir/agents and the
// manifest to out_dir/manifest.json.
DatasetManifest forge(const ForgeConfig& config, const std::filesystem::path& out_dir, ProgressFn progress = {});

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);
// Loads, then re-checks invariants, file presence and hashes. Throws
// MissingWeights / HashMismatch / InvalidConfig.
DatasetManifest verify_manifest(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Runs fn(i) for i in [0, n) on `workers` threads. Exceptions escaping fn are
// rethrown after all workers join.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// Worker count honoring the GENPRED_WORKERS environment override.
int resolve_workers(int requested);

}  // namespace genpred::forge
