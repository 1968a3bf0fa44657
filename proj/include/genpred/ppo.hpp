#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/grid_env.hpp"
#include "genpred/nn.hpp"
#include "genpred/predictor.hpp"
#include "genpred/rng.hpp"

namespace genpred::ppo {

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip_epsilon = 0.2;
  double c1 = 0.5;   // value loss
  double c2 = 0.01;  // entropy
  double c3 = 0.5;   // generalization loss; only used when a hook is attached
  double learning_rate = 3e-4;
  int n_steps = 2048;
  int minibatch_size = 64;
  int n_epochs = 10;
  bool value_clip = true;
  bool normalize_advantage = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const PpoConfig& c);
void from_json(const nlohmann::json& j, PpoConfig& c);

// 147 -> 64 (tanh) -> 64 (tanh) -> 7 (softmax). Tests build smaller ones
// through make().
struct PolicyNet {
  nn::Mlp net;

  static PolicyNet make(SplitMix64& rng, std::span<const int> sizes = kDefaultSizes);
  static constexpr std::array<int, 4> kDefaultSizes = {env::kObsSize, 64, 64, env::kNumActions};

  std::vector<double> probabilities(std::span<const double> obs) const;
  int greedy_action(std::span<const double> obs) const;
};

// 147 -> 64 (tanh) -> 64 (tanh) -> 1.
struct ValueNet {
  nn::Mlp net;

  static ValueNet make(SplitMix64& rng, std::span<const int> sizes = kDefaultSizes);
  static constexpr std::array<int, 4> kDefaultSizes = {env::kObsSize, 64, 64, 1};

  double value(std::span<const double> obs) const;
};

// Training-time environment state kept across rollouts.
struct EnvRunner {
  env::GridWorld world;
  env::Observation obs;
  double episode_return = 0.0;

  explicit EnvRunner(env::GridWorld w) : world(std::move(w)), obs(world.reset()) {}
};

struct RolloutBuffer {
  nn::Matrix observations;  // one row per step
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;  // episode ended after this step's action
  std::vector<double> log_probs;    // log pi_old(a_t | s_t)
  std::vector<double> values;       // V_old(s_t)
  double bootstrap_value = 0.0;     // V_old(s_n) for the state after the last step

  std::vector<double> deltas;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::vector<double> completed_episode_returns;

  std::size_t size() const { return actions.size(); }
};

RolloutBuffer collect_rollout(const PolicyNet& policy, const ValueNet& value, EnvRunner& runner, int n_steps,
                              SplitMix64& rng);

// Fills deltas, advantages and returns right to left. V(s_{t+1}) is taken as
// zero across terminal steps.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda, double bootstrap_value);

struct Minibatch {
  nn::Matrix observations;
  std::vector<int> actions;
  std::vector<double> old_log_probs;
  std::vector<double> old_values;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return actions.size(); }
};

Minibatch gather(const RolloutBuffer& buffer, std::span<const std::size_t> indices);

// Frozen generalizability predictor attached to the loss. The artifact is
// held through a pointer to const: the trainer can read it, never write it.
struct GenLossHook {
  std::shared_ptr<const predictor::PredictorArtifact> predictor;

  void validate() const;
};

struct LossResult {
  double total = 0.0;
  double policy = 0.0;   // -E[min(r A, clip(r) A)]
  double value = 0.0;    // L^vf (before c1)
  double entropy = 0.0;  // L^ent = -E[H] (before c2)
  double gen = 0.0;      // L^gen = -G (before c3); 0 without a hook
  double predicted_generalization = 0.0;
  nn::GradientSet policy_grad;
  nn::GradientSet value_grad;
};

LossResult ppo_loss(const PolicyNet& policy, const ValueNet& value, const Minibatch& batch, const PpoConfig& cfg,
                    const GenLossHook* hook = nullptr);

struct CheckpointRow {
  std::size_t step = 0;
  std::optional<double> train_mean_reward;
  std::optional<double> zeta_eval;
  std::optional<double> loss_clip;
  std::optional<double> loss_vf;
  std::optional<double> loss_ent;
  std::optional<double> loss_gen;
};

void write_checkpoint_csv(const std::filesystem::path& path, std::span<const CheckpointRow> rows);

struct TrainOptions {
  std::size_t total_steps = 200000;
  std::uint64_t seed = 0;
  const GenLossHook* hook = nullptr;
  // Steps at which the policy in effect is handed to `evaluate`. The policy
  // in effect at step s is the one produced by every update whose rollout
  // ended at or before s.
  std::vector<std::size_t> eval_steps;
  std::function<double(const PolicyNet&)> evaluate;
  bool keep_snapshots = false;
  // Called after every update with the number of environment steps so far.
  std::function<void(std::size_t)> on_update;
};

struct TrainResult {
  PolicyNet policy;
  ValueNet value;
  std::vector<CheckpointRow> log;
  std::vector<std::pair<std::size_t, PolicyNet>> snapshots;
  std::size_t updates = 0;
};

// Initial networks for a given trainer seed; paired runs that share the seed
// share these exactly.
std::pair<PolicyNet, ValueNet> initial_networks(std::uint64_t seed);

TrainResult train(const env::GridSpec& env_spec, const PpoConfig& cfg, const TrainOptions& options);

}  // namespace genpred::ppo
