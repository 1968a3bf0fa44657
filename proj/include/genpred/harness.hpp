#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/forge.hpp"
#include "genpred/ppo.hpp"
#include "genpred/predictor.hpp"

namespace genpred::harness {

enum class Arm { Standard, Upgraded };

std::string to_string(Arm arm);

struct CompareConfig {
  std::size_t n_agents = 10;
  std::size_t total_steps = 200000;
  std::size_t eval_every = 5000;
  std::size_t n_eval_envs = 100;
  std::uint64_t eval_seed_base = 2000000;
  // Agent i of both arms trains on generate(train_seed_base + i) starting
  // from initial_networks(derive_seed(seed, i)).
  std::uint64_t train_seed_base = 5000;
  std::uint64_t seed = 0;
  env::GridSpec base_spec;
  env::NoiseConfig noise;
  int episodes_per_env = 1;
  double c3 = 0.5;
  std::string predictor_path;
  ppo::PpoConfig ppo;
  int workers = 1;
  // Seed pools of the dataset the predictor was built from. Filled from the
  // predictor's provenance when present.
  std::optional<forge::SeedRange> forge_train_seeds;
  std::optional<forge::SeedRange> forge_eval_seeds;

  void validate() const;
  forge::SeedRange train_seeds() const { return {train_seed_base, train_seed_base + n_agents}; }
  forge::SeedRange eval_seeds() const { return {eval_seed_base, eval_seed_base + n_eval_envs}; }
  std::vector<std::size_t> checkpoints() const;
  std::vector<env::GridSpec> eval_specs() const;
  std::uint64_t trainer_seed(std::size_t agent) const;
};

void to_json(nlohmann::json& j, const CompareConfig& c);
void from_json(const nlohmann::json& j, CompareConfig& c);

// Throws SeedCollision unless training, dataset-evaluation and
// comparison-evaluation pools are pairwise disjoint.
void check_seed_hygiene(const CompareConfig& config);

struct CurvePoint {
  std::size_t step = 0;
  Arm arm = Arm::Standard;
  double mean_zeta = 0.0;
  double stderr_zeta = 0.0;
  std::size_t n = 0;
  // Set when n == 1 and the standard error is 0 by convention only.
  bool degenerate = false;
};

struct AgentRun {
  Arm arm = Arm::Standard;
  std::size_t index = 0;
  std::uint64_t env_seed = 0;
  std::uint64_t trainer_seed = 0;
  std::vector<ppo::CheckpointRow> log;

  // (step, zeta) pairs in checkpoint order.
  std::vector<std::pair<std::size_t, double>> zeta_curve() const;
};

struct SignTest {
  std::size_t wins = 0;    // upgraded > standard
  std::size_t losses = 0;
  std::size_t ties = 0;
  double p_value = 1.0;    // two-sided, ties dropped
};

// Exact two-sided binomial sign test over the paired differences.
SignTest sign_test(std::span<const double> upgraded, std::span<const double> standard);

// Mean and standard error per checkpoint per arm.
std::vector<CurvePoint> aggregate(std::span<const AgentRun> runs);

struct CompareResult {
  std::vector<CurvePoint> points;
  std::vector<AgentRun> runs;
  SignTest final_sign_test;
  std::size_t final_step = 0;
  double final_mean_standard = 0.0;
  double final_mean_upgraded = 0.0;
};

using CompareProgress = std::function<void(const AgentRun&)>;

CompareResult compare(const CompareConfig& config, std::shared_ptr<const predictor::PredictorArtifact> predictor,
                      CompareProgress progress = {});

// SVG geometry shared by the writer and by anything reading it back.
struct ChartFrame {
  static constexpr double kWidth = 800.0;
  static constexpr double kHeight = 500.0;
  static constexpr double kLeft = 70.0;
  static constexpr double kRight = 780.0;
  static constexpr double kTop = 30.0;
  static constexpr double kBottom = 450.0;

  std::size_t min_step = 0;
  std::size_t max_step = 0;

  double x(std::size_t step) const;
  static double y(double zeta) { return kBottom - zeta * (kBottom - kTop); }
  static double y_scale() { return kBottom - kTop; }
};

std::string render_svg(std::span<const CurvePoint> points);

// curves.csv (metadata as leading '#' lines, then step,arm,mean_zeta,stderr,n)
// and curves.svg. Throws EmptyInput when points is empty.
void emit_report(std::span<const CurvePoint> points, const std::filesystem::path& out_dir,
                 const std::vector<std::string>& metadata = {});

// Full output: report, per_agent/*.csv and config echo.
void write_compare_outputs(const CompareResult& result, const CompareConfig& config,
                           const std::filesystem::path& out_dir);

}  // namespace genpred::harness
