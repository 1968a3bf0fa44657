#include "genpred/forge.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "genpred/errors.hpp"
#include "genpred/rng.hpp"
#include "genpred/weight_features.hpp"

namespace genpred::forge {

std::string SeedRange::str() const { return "[" + std::to_string(begin) + ", " + std::to_string(end) + ")"; }

void require_disjoint(std::span<const std::pair<std::string, SeedRange>> pools) {
  for (std::size_t i = 0; i < pools.size(); ++i)
    for (std::size_t j = i + 1; j < pools.size(); ++j)
      if (pools[i].second.overlaps(pools[j].second))
        throw SeedCollision(pools[i].first + " seeds " + pools[i].second.str() + " overlap " + pools[j].first +
                            " seeds " + pools[j].second.str());
}

void ForgeConfig::validate() const {
  if (n_agents < 1) throw InvalidConfig("n_agents must be >= 1");
  if (n_eval_envs < 1) throw InvalidConfig("n_eval_envs must be >= 1");
  if (episodes_per_env < 1) throw InvalidConfig("episodes_per_env must be >= 1");
  base_spec.validate();
  noise.validate();
  ppo.validate();
  for (std::size_t i = 0; i < (step_tiers.empty() ? 1 : step_tiers.size()); ++i) {
    const std::size_t steps = step_tiers.empty() ? steps_per_agent : step_tiers[i];
    if (steps < static_cast<std::size_t>(ppo.n_steps))
      throw InvalidConfig("every agent needs at least n_steps (" + std::to_string(ppo.n_steps) + ") steps");
  }
  const std::array<std::pair<std::string, SeedRange>, 2> pools = {{{"forge training", train_seeds()},
                                                                    {"forge evaluation", eval_seeds()}}};
  require_disjoint(pools);
}

std::size_t ForgeConfig::steps_for(std::size_t agent) const {
  return step_tiers.empty() ? steps_per_agent : step_tiers[agent % step_tiers.size()];
}

env::GridSpec ForgeConfig::train_spec(std::size_t agent) const {
  env::GridSpec s = base_spec;
  s.seed = train_seed_base + agent;
  return s;
}

std::uint64_t ForgeConfig::trainer_seed(std::size_t agent) const { return derive_seed(agent_seed_base, agent); }

std::vector<env::GridSpec> ForgeConfig::eval_specs() const {
  std::vector<env::GridSpec> specs;
  for (std::size_t i = 0; i < n_eval_envs; ++i) {
    env::GridSpec s = base_spec;
    s.seed = eval_seed_base + i;
    specs.push_back(s);
  }
  return specs;
}

void to_json(nlohmann::json& j, const ForgeConfig& c) {
  j = nlohmann::json{{"n_agents", c.n_agents},
                     {"steps_per_agent", c.steps_per_agent},
                     {"step_tiers", c.step_tiers},
                     {"base_spec", c.base_spec},
                     {"train_seed_base", c.train_seed_base},
                     {"n_eval_envs", c.n_eval_envs},
                     {"eval_seed_base", c.eval_seed_base},
                     {"noise", c.noise},
                     {"episodes_per_env", c.episodes_per_env},
                     {"agent_seed_base", c.agent_seed_base},
                     {"workers", c.workers},
                     {"ppo", c.ppo}};
}

void from_json(const nlohmann::json& j, ForgeConfig& c) {
  const ForgeConfig d;
  c.n_agents = j.value("n_agents", d.n_agents);
  c.steps_per_agent = j.value("steps_per_agent", d.steps_per_agent);
  c.step_tiers = j.value("step_tiers", d.step_tiers);
  c.base_spec = j.contains("base_spec") ? j.at("base_spec").get<env::GridSpec>() : d.base_spec;
  c.train_seed_base = j.value("train_seed_base", d.train_seed_base);
  c.n_eval_envs = j.value("n_eval_envs", d.n_eval_envs);
  c.eval_seed_base = j.value("eval_seed_base", d.eval_seed_base);
  c.noise = j.contains("noise") ? j.at("noise").get<env::NoiseConfig>() : d.noise;
  c.episodes_per_env = j.value("episodes_per_env", d.episodes_per_env);
  c.agent_seed_base = j.value("agent_seed_base", d.agent_seed_base);
  c.workers = j.value("workers", d.workers);
  c.ppo = j.contains("ppo") ? j.at("ppo").get<ppo::PpoConfig>() : d.ppo;
}

void to_json(nlohmann::json& j, const AgentRecord& r) {
  j = nlohmann::json{{"agent_id", r.agent_id},
                     {"index", r.index},
                     {"train_seed", r.train_seed},
                     {"trainer_seed", r.trainer_seed},
                     {"steps", r.steps},
                     {"weights_path", r.weights_path},
                     {"weights_sha256", r.weights_sha256},
                     {"zeta", r.zeta},
                     {"eval_seed_begin", r.eval_seed_begin},
                     {"eval_seed_end", r.eval_seed_end},
                     {"wall_clock_seconds", r.wall_clock_seconds},
                     {"trainer_config_hash", r.trainer_config_hash},
                     {"error", r.error ? nlohmann::json(*r.error) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, AgentRecord& r) {
  r.agent_id = j.at("agent_id").get<std::string>();
  r.index = j.at("index").get<std::size_t>();
  r.train_seed = j.at("train_seed").get<std::uint64_t>();
  r.trainer_seed = j.at("trainer_seed").get<std::uint64_t>();
  r.steps = j.at("steps").get<std::size_t>();
  r.weights_path = j.at("weights_path").get<std::string>();
  r.weights_sha256 = j.at("weights_sha256").get<std::string>();
  r.zeta = j.at("zeta").get<double>();
  r.eval_seed_begin = j.at("eval_seed_begin").get<std::uint64_t>();
  r.eval_seed_end = j.at("eval_seed_end").get<std::uint64_t>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  r.trainer_config_hash = j.at("trainer_config_hash").get<std::string>();
  if (j.contains("error") && !j.at("error").is_null())
    r.error = j.at("error").get<std::string>();
  else
    r.error.reset();
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"format_version", m.format_version}, {"config", m.config}, {"records", m.records}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1) throw VersionUnsupported("manifest version " + std::to_string(m.format_version));
  m.config = j.at("config").get<ForgeConfig>();
  m.records = j.at("records").get<std::vector<AgentRecord>>();
}

bool same_modulo_wall_clock(const DatasetManifest& a, const DatasetManifest& b) {
  nlohmann::json ja = a;
  nlohmann::json jb = b;
  for (auto* j : {&ja, &jb}) {
    (*j)["config"].erase("workers");
    for (auto& r : (*j)["records"]) r.erase("wall_clock_seconds");
  }
  return ja == jb;
}

double greedy_episode_return(const ppo::PolicyNet& policy, const env::GridSpec& spec, const env::NoiseConfig& noise,
                             int episode) {
  env::GridWorld world = env::generate(spec);
  const env::NoiseConfig stream{noise.amplitude, derive_seed(noise.seed, spec.seed)};
  env::Observation obs = world.reset();
  const std::uint64_t base = static_cast<std::uint64_t>(episode) * (static_cast<std::uint64_t>(spec.max_steps) + 1);
  double total = 0.0;
  for (std::uint64_t t = 0;; ++t) {
    const env::Observation seen = env::apply_noise(obs, stream, base + t);
    const env::StepOutcome out = world.step(policy.greedy_action(seen.values));
    total += out.reward;
    if (out.done) break;
    obs = out.obs;
  }
  return total;
}

double compute_zeta(const ppo::PolicyNet& policy, std::span<const env::GridSpec> eval_specs,
                    const env::NoiseConfig& noise, int episodes_per_env) {
  if (eval_specs.empty()) throw EmptyEvalSet("no evaluation environments");
  if (episodes_per_env < 1) throw InvalidConfig("episodes_per_env must be >= 1");
  double sum = 0.0;
  for (const auto& spec : eval_specs)
    for (int e = 0; e < episodes_per_env; ++e) sum += greedy_episode_return(policy, spec, noise, e);
  return sum / static_cast<double>(eval_specs.size() * static_cast<std::size_t>(episodes_per_env));
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingWeights("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return sha256_hex(os.str());
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

int resolve_workers(int requested) {
  if (const char* env = std::getenv("GENPRED_WORKERS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return std::max(1, requested);
}

DatasetManifest forge(const ForgeConfig& config, const std::filesystem::path& out_dir, ProgressFn progress) {
  config.validate();
  std::filesystem::create_directories(out_dir / "agents");

  nlohmann::json trainer_json = {{"ppo", config.ppo}, {"base_spec", config.base_spec}};
  const std::string config_hash = sha256_hex(trainer_json.dump()).substr(0, 16);
  const std::vector<env::GridSpec> eval_specs = config.eval_specs();

  DatasetManifest manifest;
  manifest.config = config;
  manifest.records.resize(config.n_agents);
  std::mutex progress_mutex;

  parallel_for(config.n_agents, resolve_workers(config.workers), [&](std::size_t i) {
    AgentRecord rec;
    std::ostringstream id;
    id << "agent_" << std::setw(5) << std::setfill('0') << i;
    rec.agent_id = id.str();
    rec.index = i;
    rec.train_seed = config.train_spec(i).seed;
    rec.trainer_seed = config.trainer_seed(i);
    rec.steps = config.steps_for(i);
    rec.weights_path = "agents/" + rec.agent_id + ".rlwb";
    rec.eval_seed_begin = config.eval_seeds().begin;
    rec.eval_seed_end = config.eval_seeds().end;
    rec.trainer_config_hash = config_hash;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ppo::TrainOptions opts;
      opts.total_steps = rec.steps;
      opts.seed = rec.trainer_seed;
      ppo::TrainResult trained = ppo::train(config.train_spec(i), config.ppo, opts);
      rec.zeta = compute_zeta(trained.policy, eval_specs, config.noise, config.episodes_per_env);
      features::WeightSnapshot snap = features::snapshot_from_network(trained.policy.net, rec.agent_id);
      const auto path = out_dir / rec.weights_path;
      features::save_snapshot(snap, path);
      rec.weights_sha256 = sha256_file(path);
    } catch (const std::exception& e) {
      rec.error = e.what();
    }
    rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest.records[i] = rec;
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(rec);
    }
  });

  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << nlohmann::json(manifest).dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingWeights("cannot open manifest " + path.string());
  return nlohmann::json::parse(in).get<DatasetManifest>();
}

DatasetManifest verify_manifest(const std::filesystem::path& path) {
  DatasetManifest m = load_manifest(path);
  m.config.validate();
  const auto dir = path.parent_path();
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (!ids.insert(r.agent_id).second) throw InvalidConfig("duplicate agent id " + r.agent_id);
    if (r.train_seed != m.config.train_spec(r.index).seed || r.trainer_seed != m.config.trainer_seed(r.index))
      throw InvalidConfig(r.agent_id + " seeds are not derivable from the configured bases");
    if (!r.ok()) continue;
    if (!(r.zeta >= 0.0 && r.zeta <= 1.0)) throw InvalidConfig(r.agent_id + " has zeta outside [0,1]");
    const auto file = dir / r.weights_path;
    if (!std::filesystem::exists(file)) throw MissingWeights(file.string() + " is missing");
    if (sha256_file(file) != r.weights_sha256) throw HashMismatch(file.string() + " does not match its recorded hash");
    features::load_snapshot(file).validate();
  }
  return m;
}

}  // namespace genpred::forge
