#include "genpred/weight_features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "genpred/errors.hpp"

namespace genpred::features {

namespace {

constexpr std::array<char, 4> kMagic = {'R', 'L', 'W', 'B'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::array<const char*, kStatsPerLayer> kStatNames = {"mean", "var", "p0", "p25", "p50", "p75", "p100"};

std::span<const double> flat(const nn::Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

// Position of percentile q among n sorted values: (lower rank, fraction).
std::pair<std::size_t, double> percentile_position(std::size_t n, double q) {
  const double pos = q * static_cast<double>(n - 1) / 100.0;
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  if (lo >= n - 1) return {n - 1, 0.0};
  return {lo, pos - static_cast<double>(lo)};
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

template <typename T>
void put_le(std::ostream& os, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), sizeof(T));
  if (!is) throw TruncatedFile("unexpected end of weight file");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(u);
}

}  // namespace

void to_json(nlohmann::json& j, const LayerShape& s) { j = nlohmann::json::array({s.rows, s.cols}); }
void from_json(const nlohmann::json& j, LayerShape& s) {
  s.rows = j.at(0).get<int>();
  s.cols = j.at(1).get<int>();
}

std::size_t WeightSnapshot::total_weights() const {
  std::size_t n = 0;
  for (const auto& m : layers) n += static_cast<std::size_t>(m.size());
  return n;
}

std::vector<LayerShape> WeightSnapshot::shapes() const {
  std::vector<LayerShape> out;
  for (const auto& m : layers) out.push_back({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  return out;
}

void WeightSnapshot::validate(const std::vector<LayerShape>& expected) const {
  if (layers.size() != expected.size())
    throw ShapeMismatch("snapshot has " + std::to_string(layers.size()) + " layers, expected " +
                        std::to_string(expected.size()));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].rows() != expected[i].rows || layers[i].cols() != expected[i].cols)
      throw ShapeMismatch("snapshot layer " + std::to_string(i) + " is " + std::to_string(layers[i].rows()) + "x" +
                          std::to_string(layers[i].cols()) + ", expected " + std::to_string(expected[i].rows) +
                          "x" + std::to_string(expected[i].cols));
    if (!layers[i].allFinite()) throw ShapeMismatch("snapshot layer " + std::to_string(i) + " has non-finite weights");
  }
}

WeightSnapshot snapshot_from_network(const nn::Mlp& net, std::string agent_id) {
  WeightSnapshot s;
  s.agent_id = std::move(agent_id);
  for (const auto& layer : net.layers()) s.layers.emplace_back(layer.weights.transpose());
  return s;
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw ShapeMismatch("percentile of an empty set");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto [lo, f] = percentile_position(sorted.size(), q);
  if (f == 0.0) return sorted[lo];
  return (1.0 - f) * sorted[lo] + f * sorted[lo + 1];
}

LayerStats layer_stats(std::span<const double> values) {
  if (values.empty()) throw ShapeMismatch("statistics of an empty layer");
  LayerStats s;
  s.mean = mean_of(values);
  double ss = 0.0;
  for (double x : values) ss += (x - s.mean) * (x - s.mean);
  s.variance = ss / static_cast<double>(values.size());

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  auto pct = [&](double q) {
    const auto [lo, f] = percentile_position(sorted.size(), q);
    if (f == 0.0) return sorted[lo];
    return (1.0 - f) * sorted[lo] + f * sorted[lo + 1];
  };
  s.p0 = sorted.front();
  s.p25 = pct(25.0);
  s.p50 = pct(50.0);
  s.p75 = pct(75.0);
  s.p100 = sorted.back();
  return s;
}

FeatureVector extract_stats(const WeightSnapshot& snapshot) { return StatsEvaluation(snapshot).features(); }

StatsEvaluation::StatsEvaluation(const WeightSnapshot& snapshot) {
  features_.reserve(snapshot.layers.size() * kStatsPerLayer);
  std::vector<std::pair<double, std::uint32_t>> order;
  for (const auto& m : snapshot.layers) {
    const std::span<const double> x = flat(m);
    if (x.empty()) throw ShapeMismatch("statistics of an empty layer");
    const std::size_t n = x.size();

    LayerInfo info;
    info.rows = m.rows();
    info.cols = m.cols();
    info.mean = mean_of(x);
    info.centered.resize(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      info.centered[i] = x[i] - info.mean;
      ss += info.centered[i] * info.centered[i];
    }

    // Sorting (value, index) pairs puts tied values next to each other with
    // the lowest index first; every rank inside a tie group is attributed to
    // that first element.
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = {x[i], static_cast<std::uint32_t>(i)};
    std::sort(order.begin(), order.end());
    auto owner = [&](std::size_t rank) {
      while (rank > 0 && order[rank - 1].first == order[rank].first) --rank;
      return order[rank].second;
    };

    features_.push_back(info.mean);
    features_.push_back(ss / static_cast<double>(n));
    for (std::size_t p = 0; p < kPercentiles.size(); ++p) {
      const auto [lo, f] = percentile_position(n, kPercentiles[p]);
      const std::size_t hi = f == 0.0 ? lo : lo + 1;
      const double value = f == 0.0 ? order[lo].first : (1.0 - f) * order[lo].first + f * order[hi].first;
      features_.push_back(value);
      info.percentile_taps[p] = {Tap{owner(lo), 1.0 - f}, Tap{owner(hi), f}};
    }
    layers_.push_back(std::move(info));
  }
}

std::vector<nn::Matrix> StatsEvaluation::vjp(std::span<const double> upstream) const {
  if (upstream.size() != features_.size())
    throw ShapeMismatch("upstream has " + std::to_string(upstream.size()) + " entries, expected " +
                        std::to_string(features_.size()));
  std::vector<nn::Matrix> out;
  out.reserve(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerInfo& info = layers_[l];
    const double* u = upstream.data() + l * kStatsPerLayer;
    const double n = static_cast<double>(info.centered.size());
    nn::Matrix g(info.rows, info.cols);
    double* gd = g.data();
    const double dmean = u[static_cast<int>(Stat::Mean)] / n;
    const double dvar = 2.0 * u[static_cast<int>(Stat::Variance)] / n;
    // d var / d x_i = 2 (x_i - M) / n; the mean's own dependence on x_i
    // cancels because the centered values sum to zero.
    for (std::size_t i = 0; i < info.centered.size(); ++i) gd[i] = dmean + dvar * info.centered[i];
    for (std::size_t p = 0; p < kPercentiles.size(); ++p) {
      const double up = u[static_cast<int>(Stat::P0) + static_cast<int>(p)];
      for (const Tap& t : info.percentile_taps[p]) gd[t.index] += up * t.weight;
    }
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<nn::Matrix> stats_vjp(const WeightSnapshot& snapshot, std::span<const double> upstream) {
  return StatsEvaluation(snapshot).vjp(upstream);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeMismatch("pearson inputs have different lengths");
  if (x.size() < 2) throw ShapeMismatch("pearson needs at least two points");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0) throw ZeroVariance("first pearson input is constant");
  if (syy == 0.0) throw ZeroVariance("second pearson input is constant");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::size_t FeatureMask::count() const { return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true)); }

std::vector<std::size_t> FeatureMask::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (selected[i]) out.push_back(i);
  return out;
}

void to_json(nlohmann::json& j, const FeatureMask& m) {
  nlohmann::json names = nlohmann::json::array();
  for (std::size_t i : m.indices()) names.push_back(feature_name(i));
  j = nlohmann::json{{"selected", m.selected}, {"threshold", m.threshold}, {"scores", m.scores}, {"names", names}};
}

void from_json(const nlohmann::json& j, FeatureMask& m) {
  m.selected = j.at("selected").get<std::vector<bool>>();
  m.threshold = j.at("threshold").get<double>();
  m.scores = j.at("scores").get<std::vector<double>>();
}

FeatureMask select_features(const std::vector<FeatureVector>& rows, std::span<const double> labels,
                            double threshold) {
  if (rows.size() != labels.size()) throw ShapeMismatch("feature rows and labels differ in count");
  if (rows.size() < 2) throw ShapeMismatch("feature selection needs at least two agents");
  const std::size_t width = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != width) throw ShapeMismatch("ragged feature matrix");
  {
    const double first = labels.front();
    if (std::all_of(labels.begin(), labels.end(), [&](double v) { return v == first; }))
      throw ZeroVariance("labels are constant");
  }

  FeatureMask mask;
  mask.threshold = threshold;
  mask.selected.assign(width, false);
  mask.scores.assign(width, 0.0);
  std::vector<double> column(rows.size());
  for (std::size_t j = 0; j < width; ++j) {
    for (std::size_t i = 0; i < rows.size(); ++i) column[i] = rows[i][j];
    if (std::all_of(column.begin(), column.end(), [&](double v) { return v == column.front(); })) continue;
    mask.scores[j] = pearson(column, labels);
    mask.selected[j] = std::abs(mask.scores[j]) >= threshold;
  }
  if (mask.count() == 0) {
    std::ostringstream os;
    os << "no feature reaches |pearson| >= " << threshold;
    throw AllFiltered(os.str());
  }
  return mask;
}

int image_rows_for(std::size_t total_weights, int width) {
  return static_cast<int>((total_weights + static_cast<std::size_t>(width) - 1) / static_cast<std::size_t>(width));
}

WeightImage build_weight_image(const WeightSnapshot& snapshot, int width) {
  if (width < 1) throw ShapeMismatch("image width must be positive");
  const std::size_t total = snapshot.total_weights();
  if (total == 0) throw ShapeMismatch("empty snapshot");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& m : snapshot.layers) {
    lo = std::min(lo, m.minCoeff());
    hi = std::max(hi, m.maxCoeff());
  }
  WeightImage img;
  img.width = width;
  img.rows = image_rows_for(total, width);
  img.pixels.assign(static_cast<std::size_t>(img.rows) * static_cast<std::size_t>(width), 0.0);
  std::size_t k = 0;
  const double range = hi - lo;
  for (const auto& m : snapshot.layers) {
    for (double w : flat(m)) img.pixels[k++] = range > 0.0 ? (w - lo) / range : 0.5;
  }
  return img;
}

void write_weight_file(const std::filesystem::path& path, const std::vector<nn::Matrix>& layers) {
  if (layers.size() > 255) throw ShapeMismatch("weight file holds at most 255 layers");
  std::ostringstream os(std::ios::binary);
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(os, kFormatVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(layers.size()));
  for (const auto& m : layers) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    for (double v : flat(m)) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("cannot open " + path.string() + " for writing");
  const std::string bytes = os.str();
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw Error("failed writing " + path.string());
}

std::vector<nn::Matrix> read_weight_file(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw MissingWeights("cannot open " + path.string());
  const auto file_size = std::filesystem::file_size(path);

  std::array<char, 4> magic{};
  file.read(magic.data(), magic.size());
  if (!file) throw TruncatedFile(path.string() + " is shorter than its header");
  if (magic != kMagic) throw BadMagic(path.string() + " does not start with RLWB");
  const auto version = get_le<std::uint16_t>(file);
  if (version != kFormatVersion) throw VersionUnsupported("weight file version " + std::to_string(version));
  const auto count = get_le<std::uint8_t>(file);

  std::vector<nn::Matrix> layers;
  std::uint64_t consumed = 7;
  for (unsigned l = 0; l < count; ++l) {
    const auto rows = get_le<std::uint32_t>(file);
    const auto cols = get_le<std::uint32_t>(file);
    consumed += 8;
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n * 8 > file_size - std::min<std::uint64_t>(consumed, file_size))
      throw TruncatedFile("layer " + std::to_string(l) + " payload runs past end of " + path.string());
    nn::Matrix m(rows, cols);
    for (std::uint64_t i = 0; i < n; ++i) m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(file));
    consumed += n * 8;
    layers.push_back(std::move(m));
  }
  return layers;
}

void save_snapshot(const WeightSnapshot& snapshot, const std::filesystem::path& path) {
  write_weight_file(path, snapshot.layers);
}

WeightSnapshot load_snapshot(const std::filesystem::path& path) {
  WeightSnapshot s;
  s.layers = read_weight_file(path);
  s.agent_id = path.stem().string();
  return s;
}

std::string feature_name(std::size_t index) {
  return "L" + std::to_string(index / kStatsPerLayer + 1) + "_" + kStatNames[index % kStatsPerLayer];
}

void write_feature_csv(const std::filesystem::path& path, const std::vector<std::string>& agent_ids,
                       const std::vector<FeatureVector>& rows, std::span<const double> labels) {
  if (agent_ids.size() != rows.size() || rows.size() != labels.size())
    throw ShapeMismatch("feature CSV columns differ in length");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "agent_id,zeta";
  const std::size_t width = rows.empty() ? kFeatureCount : rows.front().size();
  for (std::size_t j = 0; j < width; ++j) out << ',' << feature_name(j);
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << agent_ids[i] << ',' << labels[i];
    for (double v : rows[i]) out << ',' << v;
    out << '\n';
  }
}

}  // namespace genpred::features
