#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/forge.hpp"
#include "genpred/harness.hpp"
#include "genpred/predictor.hpp"

namespace genpred::cli {

struct PipelineConfig {
  std::uint64_t seed = 0;
  env::GridSpec env;
  forge::ForgeConfig forge;
  double selection_threshold = 0.3;
  predictor::TrainHyper predictor;
  harness::CompareConfig compare;

  // Pushes the global seed and grid spec into every section.
  void propagate();
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

// Sections accept either the bare section object or a whole pipeline config
// carrying it under its key.
nlohmann::json read_json_file(const std::filesystem::path& path);
nlohmann::json section_of(const nlohmann::json& j, const std::string& key);

// Every successfully forged agent of a manifest, weights loaded.
std::vector<predictor::LabeledSnapshot> load_dataset(const std::filesystem::path& manifest_path);

struct PredictorRun {
  predictor::PredictorArtifact artifact;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  predictor::EvaluationReport report;  // on the held-out agents
};

// Seeded split by agent, mask selection on the training part only, training,
// and held-out evaluation.
PredictorRun train_and_evaluate(const std::vector<predictor::LabeledSnapshot>& dataset,
                                predictor::Architecture arch, const predictor::TrainHyper& hyper,
                                double selection_threshold, double test_fraction = 0.2);

// Exit codes: 0 success, 1 domain error, 2 usage error.
int run_subcommand(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_subcommand(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace genpred::cli
