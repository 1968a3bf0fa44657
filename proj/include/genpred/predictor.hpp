#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/nn.hpp"
#include "genpred/weight_features.hpp"

namespace genpred::predictor {

enum class Architecture { Dnn, Cnn };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& name);

// Per-feature affine standardization fitted on a training set.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // population std, replaced by 1 where it is 0

  static Standardizer fit(const std::vector<std::vector<double>>& rows);
  std::vector<double> standardize(std::span<const double> x) const;
  std::vector<double> destandardize(std::span<const double> z) const;
};

struct TrainHyper {
  int epochs = 500;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t min_train_samples = 20;
  int hidden = 64;
  // CNN only
  int conv_channels = 8;
  int pool_size = 8;
};

void to_json(nlohmann::json& j, const TrainHyper& h);
void from_json(const nlohmann::json& j, TrainHyper& h);

struct TrainingMetadata {
  TrainHyper hyper;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double train_mse = 0.0;
  std::optional<double> train_pearson;
  std::optional<double> test_mse;
  std::optional<double> test_pearson;
};

// Selected statistics -> standardized -> |mask| -> hidden (relu) -> hidden
// (relu) -> 1.
struct DnnPredictor {
  features::FeatureMask mask;
  Standardizer standardizer;
  nn::Mlp net;

  std::vector<double> select(const features::FeatureVector& f) const;
  double predict_features(const features::FeatureVector& f) const;
};

// Weight image -> conv 3x3 (relu) -> conv 3x3 (relu) -> adaptive mean pool
// -> dense (relu) -> 1.
struct CnnPredictor {
  nn::ConvLayer conv1;
  nn::ConvLayer conv2;
  int pool_h = 8;
  int pool_w = 8;
  nn::Mlp head;
  int image_rows = 0;
  int image_width = features::kImageWidth;

  struct Trace {
    nn::ConvTrace conv1;
    nn::ConvTrace conv2;
    nn::Mlp::Trace head;
  };

  static CnnPredictor make(int image_rows, int image_width, const TrainHyper& hyper, SplitMix64& rng);

  double predict_image(const features::WeightImage& image) const;
  double forward(const features::WeightImage& image, Trace& trace) const;
  // Parameter gradients of the scalar output scaled by `upstream`, laid out
  // as conv1, conv2, head layers.
  std::vector<nn::ParamGrad> backward(const Trace& trace, double upstream) const;

  std::vector<std::span<double>> parameter_spans();
  std::vector<std::span<const double>> parameter_spans() const;
};

struct PredictorArtifact {
  std::variant<DnnPredictor, CnnPredictor> model;
  std::vector<features::LayerShape> snapshot_shapes = features::kAgentLayerShapes;
  TrainingMetadata metadata;

  Architecture architecture() const {
    return std::holds_alternative<DnnPredictor>(model) ? Architecture::Dnn : Architecture::Cnn;
  }
  const DnnPredictor& dnn() const;
  const CnnPredictor& cnn() const;
  DnnPredictor& dnn();

  // Every parameter tensor, in serialization order.
  std::vector<std::span<const double>> parameter_spans() const;
};

struct LabeledFeatures {
  std::string agent_id;
  features::FeatureVector features;
  double label = 0.0;
};

struct LabeledImage {
  std::string agent_id;
  features::WeightImage image;
  double label = 0.0;
};

struct LabeledSnapshot {
  std::string agent_id;
  features::WeightSnapshot snapshot;
  double label = 0.0;
};

// Seeded 80/20 (by default) split over agent ids: returns (train, test)
// positions into `agent_ids`.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_agent(
    const std::vector<std::string>& agent_ids, std::uint64_t seed, double test_fraction = 0.2);

PredictorArtifact train_dnn(std::span<const LabeledFeatures> train, const features::FeatureMask& mask,
                            const TrainHyper& hyper, std::span<const LabeledFeatures> held_out = {},
                            std::vector<features::LayerShape> snapshot_shapes = features::kAgentLayerShapes);

PredictorArtifact train_cnn(std::span<const LabeledImage> train, const TrainHyper& hyper,
                            std::span<const LabeledImage> held_out = {},
                            std::vector<features::LayerShape> snapshot_shapes = features::kAgentLayerShapes);

double predict(const PredictorArtifact& artifact, const features::WeightSnapshot& snapshot);

struct GenScore {
  double value = 0.0;
  nn::GradientSet gradient;  // over the policy's dense layers; bias entries are zero
};

// G(policy) from a DNN artifact and dG/dW for every policy weight matrix,
// chained through the standardization and the statistics VJP. The artifact
// is read-only.
GenScore gen_score_with_gradient(const PredictorArtifact& artifact, const nn::Mlp& policy);

struct PredictionRow {
  std::string agent_id;
  double label = 0.0;
  double prediction = 0.0;
};

struct EvaluationReport {
  double pearson = 0.0;
  double mse = 0.0;
  bool test_disjoint_from_training = false;
  std::vector<PredictionRow> rows;
};

void to_json(nlohmann::json& j, const EvaluationReport& r);

// Throws ZeroVariance when predictions or labels are constant.
EvaluationReport evaluate_predictor(const PredictorArtifact& artifact, std::span<const LabeledSnapshot> test_set,
                                    bool test_disjoint_from_training);
EvaluationReport report_from_predictions(std::vector<PredictionRow> rows, bool test_disjoint_from_training);

// Directory layout: params.rlwb (weight format) + meta.json.
void save_artifact(const PredictorArtifact& artifact, const std::filesystem::path& dir,
                   const nlohmann::json& provenance = nlohmann::json::object());
PredictorArtifact load_artifact(const std::filesystem::path& dir);

}  // namespace genpred::predictor
