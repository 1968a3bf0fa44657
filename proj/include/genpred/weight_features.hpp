#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genpred/nn.hpp"

namespace genpred::features {

inline constexpr int kStatsPerLayer = 7;
inline constexpr int kAgentLayers = 3;
inline constexpr int kFeatureCount = kStatsPerLayer * kAgentLayers;  // 21
inline constexpr int kImageWidth = 147;

// Order of the seven per-layer statistics inside a feature vector.
enum class Stat { Mean = 0, Variance, P0, P25, P50, P75, P100 };
inline constexpr std::array<double, 5> kPercentiles = {0.0, 25.0, 50.0, 75.0, 100.0};

struct LayerShape {
  int rows = 0;
  int cols = 0;
  bool operator==(const LayerShape&) const = default;
};

void to_json(nlohmann::json& j, const LayerShape& s);
void from_json(const nlohmann::json& j, LayerShape& s);

// Policy-network weight matrices stored input-major (in x out).
inline const std::vector<LayerShape> kAgentLayerShapes = {{147, 64}, {64, 64}, {64, 7}};

struct WeightSnapshot {
  std::vector<nn::Matrix> layers;  // biases are not part of a snapshot
  std::string agent_id;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t total_weights() const;
  std::vector<LayerShape> shapes() const;
  // Throws ShapeMismatch unless layer shapes equal `expected` and all
  // entries are finite.
  void validate(const std::vector<LayerShape>& expected = kAgentLayerShapes) const;
};

// Snapshot of a dense network's weights, each W (out x in) stored as W^T.
WeightSnapshot snapshot_from_network(const nn::Mlp& net, std::string agent_id = {});

struct LayerStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance (divide by n)
  double p0 = 0.0;
  double p25 = 0.0;
  double p50 = 0.0;
  double p75 = 0.0;
  double p100 = 0.0;

  std::array<double, kStatsPerLayer> as_array() const { return {mean, variance, p0, p25, p50, p75, p100}; }
};

// Percentile q in [0,100] by linear interpolation at index q*(n-1)/100 of the
// sorted values.
double percentile(std::span<const double> values, double q);

LayerStats layer_stats(std::span<const double> values);

// Layer-major concatenation of LayerStats, 7 entries per layer.
using FeatureVector = std::vector<double>;

FeatureVector extract_stats(const WeightSnapshot& snapshot);

// Statistics together with what their derivative needs, so a forward value
// and its VJP share one sort per layer.
class StatsEvaluation {
 public:
  explicit StatsEvaluation(const WeightSnapshot& snapshot);

  const FeatureVector& features() const { return features_; }

  // Vector-Jacobian product: d(upstream . g(x)) / dx, one matrix per layer
  // with the snapshot's shapes.
  std::vector<nn::Matrix> vjp(std::span<const double> upstream) const;

 private:
  struct Tap {
    std::uint32_t index;
    double weight;
  };
  struct LayerInfo {
    Eigen::Index rows;
    Eigen::Index cols;
    double mean;
    std::vector<double> centered;          // x_i - mean
    std::array<std::array<Tap, 2>, 5> percentile_taps;
  };

  FeatureVector features_;
  std::vector<LayerInfo> layers_;
};

std::vector<nn::Matrix> stats_vjp(const WeightSnapshot& snapshot, std::span<const double> upstream);

// Sample Pearson correlation. Throws ZeroVariance if either input is
// constant, ShapeMismatch for unequal lengths or fewer than two points.
double pearson(std::span<const double> x, std::span<const double> y);

struct FeatureMask {
  std::vector<bool> selected;
  double threshold = 0.3;
  std::vector<double> scores;  // Pearson score per feature, 0 for constant columns

  std::size_t count() const;
  std::vector<std::size_t> indices() const;
  bool operator==(const FeatureMask&) const = default;
};

void to_json(nlohmann::json& j, const FeatureMask& m);
void from_json(const nlohmann::json& j, FeatureMask& m);

// Feature j is kept iff |pearson(column_j, labels)| >= threshold. Throws
// AllFiltered when nothing passes.
FeatureMask select_features(const std::vector<FeatureVector>& rows, std::span<const double> labels,
                            double threshold);

struct WeightImage {
  int rows = 0;
  int width = kImageWidth;
  std::vector<double> pixels;  // rows * width, row-major

  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

// Global min-max normalization to [0,1] of all weights, concatenated
// layer-by-layer in row-major order, zero-padded to full rows. A snapshot
// whose weights are all equal maps to 0.5.
WeightImage build_weight_image(const WeightSnapshot& snapshot, int width = kImageWidth);

int image_rows_for(std::size_t total_weights, int width = kImageWidth);

// Binary weight file: "RLWB", u16 version (1), u8 layer count, then per layer
// u32 rows, u32 cols and rows*cols little-endian IEEE doubles, row-major.
void write_weight_file(const std::filesystem::path& path, const std::vector<nn::Matrix>& layers);
std::vector<nn::Matrix> read_weight_file(const std::filesystem::path& path);

void save_snapshot(const WeightSnapshot& snapshot, const std::filesystem::path& path);
WeightSnapshot load_snapshot(const std::filesystem::path& path);

// "L{layer}_{stat}" with 1-based layer numbers, e.g. L2_p75.
std::string feature_name(std::size_t index);

void write_feature_csv(const std::filesystem::path& path, const std::vector<std::string>& agent_ids,
                       const std::vector<FeatureVector>& rows, std::span<const double> labels);

}  // namespace genpred::features
