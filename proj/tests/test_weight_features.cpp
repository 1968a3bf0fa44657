#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "genpred/errors.hpp"
#include "genpred/weight_features.hpp"
#include "test_util.hpp"

using namespace genpred;
using namespace genpred::features;
using nn::Matrix;
using genpred::testing::central_diff;
using genpred::testing::rel_err;
using genpred::testing::TempDir;

namespace {

Matrix random_matrix(int rows, int cols, SplitMix64& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

WeightSnapshot random_snapshot(SplitMix64& rng, const std::vector<LayerShape>& shapes = kAgentLayerShapes) {
  WeightSnapshot s;
  for (const auto& sh : shapes) s.layers.push_back(random_matrix(sh.rows, sh.cols, rng));
  return s;
}

// Textbook percentile: sort, then interpolate at q(n-1)/100.
double percentile_oracle(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1) / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<double> flat(const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

}  // namespace

TEST(Stats, ZeroToFour) {
  const std::vector<double> v = {3, 0, 4, 1, 2};
  const LayerStats s = layer_stats(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.variance, 2.0);
  EXPECT_EQ(s.as_array(), (std::array<double, 7>{2, 2, 0, 1, 2, 3, 4}));
}

TEST(Stats, ConstantLayer) {
  const std::vector<double> v(37, -0.25);
  const LayerStats s = layer_stats(v);
  EXPECT_EQ(s.as_array(), (std::array<double, 7>{-0.25, 0, -0.25, -0.25, -0.25, -0.25, -0.25}));
}

TEST(Stats, PercentileMatchesOracle) {
  SplitMix64 rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng.below(50));
    for (auto& x : v) x = rng.uniform(-3, 3);
    const double q = rng.uniform(0, 100);
    EXPECT_NEAR(percentile(v, q), percentile_oracle(v, q), 1e-12);
  }
}

TEST(Stats, MonotonePercentilesAndPermutationInvariance) {
  SplitMix64 rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng.below(100));
    for (auto& x : v) x = rng.below(4) == 0 ? 0.5 : rng.uniform(-5, 5);  // with ties
    const LayerStats s = layer_stats(v);
    EXPECT_LE(s.p0, s.p25);
    EXPECT_LE(s.p25, s.p50);
    EXPECT_LE(s.p50, s.p75);
    EXPECT_LE(s.p75, s.p100);
    EXPECT_GE(s.variance, 0.0);
    EXPECT_EQ(s.p0, *std::min_element(v.begin(), v.end()));
    EXPECT_EQ(s.p100, *std::max_element(v.begin(), v.end()));
  }
  const WeightSnapshot snap = random_snapshot(rng);
  WeightSnapshot perm = snap;
  std::span<double> x(perm.layers[1].data(), static_cast<std::size_t>(perm.layers[1].size()));
  rng.shuffle(x);
  const FeatureVector a = extract_stats(snap), b = extract_stats(perm);
  ASSERT_EQ(a.size(), 21u);
  for (std::size_t i = 0; i < 21; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  for (std::size_t i = 14; i < 21; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Stats, LayerMajorOrdering) {
  SplitMix64 rng(3);
  const WeightSnapshot snap = random_snapshot(rng);
  const FeatureVector f = extract_stats(snap);
  for (int l = 0; l < 3; ++l) {
    const auto s = layer_stats(flat(snap.layers[static_cast<std::size_t>(l)])).as_array();
    for (int k = 0; k < 7; ++k) EXPECT_EQ(f[static_cast<std::size_t>(l * 7 + k)], s[static_cast<std::size_t>(k)]);
  }
  EXPECT_EQ(feature_name(0), "L1_mean");
  EXPECT_EQ(feature_name(8), "L2_var");
  EXPECT_EQ(feature_name(20), "L3_p100");
}

TEST(StatsVjp, MeanOfFourElements) {
  WeightSnapshot s;
  s.layers.push_back(Matrix(2, 2));
  s.layers[0] << 1, 5, -2, 0.5;
  std::vector<double> up(7, 0.0);
  up[0] = 1.0;
  const auto g = stats_vjp(s, up);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[0].data()[i], 0.25);
}

TEST(StatsVjp, MinimumSelectsArgmin) {
  WeightSnapshot s;
  s.layers.push_back(Matrix(1, 5));
  s.layers[0] << 0.3, -1.0, 2.0, 0.7, -0.5;
  std::vector<double> up(7, 0.0);
  up[static_cast<int>(Stat::P0)] = 1.0;
  const auto g = stats_vjp(s, up);
  EXPECT_EQ(g[0], (Matrix(1, 5) << 0, 1, 0, 0, 0).finished());
  // Ties: the lowest index among equal values receives the weight.
  s.layers[0] << 0.3, -1.0, 2.0, -1.0, -0.5;
  const auto t = stats_vjp(s, up);
  EXPECT_EQ(t[0], (Matrix(1, 5) << 0, 1, 0, 0, 0).finished());
}

TEST(StatsVjp, FiniteDifferencesOnDistinctValues) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(100 + seed);
    const std::vector<LayerShape> shapes = {{static_cast<int>(2 + rng.below(5)), static_cast<int>(1 + rng.below(6))},
                                            {static_cast<int>(1 + rng.below(4)), static_cast<int>(2 + rng.below(4))}};
    WeightSnapshot s = random_snapshot(rng, shapes);
    std::vector<double> up(14);
    for (auto& u : up) u = rng.uniform(-1, 1);
    const auto g = stats_vjp(s, up);
    auto f = [&] {
      const FeatureVector v = extract_stats(s);
      return std::inner_product(v.begin(), v.end(), up.begin(), 0.0);
    };
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      std::span<double> x(s.layers[l].data(), static_cast<std::size_t>(s.layers[l].size()));
      for (std::size_t i = 0; i < x.size(); ++i)
        worst = std::max(worst, rel_err(g[l].data()[i], central_diff(x, i, f, 1e-7)));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Pearson, Basics) {
  const std::vector<double> x = {1, 2, 4, 7, 11};
  std::vector<double> y(x.size());
  EXPECT_NEAR(pearson(x, x), 1.0, 1e-15);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = -2 * x[i] + 3;
  EXPECT_NEAR(pearson(x, y), -1.0, 1e-15);
  const std::vector<double> c(5, 3.0);
  EXPECT_THROW(pearson(c, x), ZeroVariance);
  EXPECT_THROW(pearson(x, c), ZeroVariance);
  EXPECT_THROW(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}), ShapeMismatch);
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2}), ShapeMismatch);
}

TEST(Pearson, AffineInvarianceSignRule) {
  SplitMix64 rng(4);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(3 + rng.below(40)), y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform(-1, 1);
      y[i] = 0.5 * x[i] + rng.uniform(-1, 1);
    }
    const double r = pearson(x, y);
    double a = rng.uniform(0.1, 10) * (rng.below(2) ? 1 : -1);
    const double b = rng.uniform(-5, 5);
    std::vector<double> ax(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) ax[i] = a * x[i] + b;
    EXPECT_NEAR(pearson(ax, y), (a > 0 ? 1 : -1) * r, 1e-12);
    EXPECT_NEAR(pearson(y, ax), (a > 0 ? 1 : -1) * r, 1e-12);
  }
}

TEST(SelectFeatures, RuleApplication) {
  // Columns built to correlate with the labels at exactly the listed values:
  // c = r * z + sqrt(1 - r^2) * w with z, w orthonormal and centred.
  const std::vector<double> z = {-1.5, -0.5, 0.5, 1.5};
  const std::vector<double> w = {1, -1, -1, 1};
  const std::array<double, 3> r = {0.9, 0.2, -0.5};
  std::vector<FeatureVector> rows(4, FeatureVector(3));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      rows[i][j] = r[j] * z[i] / std::sqrt(5.0) + std::sqrt(1 - r[j] * r[j]) * w[i] / 2.0;
  const FeatureMask m = select_features(rows, z, 0.3);
  EXPECT_EQ(m.indices(), (std::vector<std::size_t>{0, 2}));
  EXPECT_NEAR(m.scores[0], 0.9, 1e-12);
  EXPECT_NEAR(m.scores[1], 0.2, 1e-12);
  EXPECT_NEAR(m.scores[2], -0.5, 1e-12);
}

TEST(SelectFeatures, ThresholdZeroConstantColumnAndSelfColumn) {
  SplitMix64 rng(5);
  std::vector<FeatureVector> rows(10, FeatureVector(4));
  std::vector<double> labels(10);
  for (std::size_t i = 0; i < 10; ++i) {
    labels[i] = rng.uniform01();
    rows[i] = {rng.uniform01(), 7.0, labels[i], rng.uniform01()};
  }
  const FeatureMask m = select_features(rows, labels, 0.0);
  EXPECT_EQ(m.indices(), (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(m.scores[1], 0.0);
  EXPECT_NEAR(m.scores[2], 1.0, 1e-12);
  EXPECT_TRUE(select_features(rows, labels, 0.999).selected[2]);
  EXPECT_THROW(select_features(std::vector<FeatureVector>(10, FeatureVector(4, 1.0)), labels, 0.0), AllFiltered);
  EXPECT_THROW(select_features(rows, std::vector<double>(10, 0.5), 0.0), ZeroVariance);
}

TEST(SelectFeatures, MaskMonotoneInThreshold) {
  SplitMix64 rng(6);
  for (int t = 0; t < 50; ++t) {
    std::vector<FeatureVector> rows(20, FeatureVector(21));
    std::vector<double> labels(20);
    for (std::size_t i = 0; i < 20; ++i) {
      labels[i] = rng.uniform01();
      for (std::size_t j = 0; j < 21; ++j) rows[i][j] = rng.uniform01() + (j % 3 == 0 ? labels[i] : 0.0);
    }
    double t2 = rng.uniform(0, 0.3), t1 = t2 + rng.uniform(0, 0.3);
    const FeatureMask lo = select_features(rows, labels, t2);
    FeatureMask hi;
    try {
      hi = select_features(rows, labels, t1);
    } catch (const AllFiltered&) {
      continue;
    }
    for (std::size_t j = 0; j < 21; ++j)
      if (hi.selected[j]) {
        EXPECT_TRUE(lo.selected[j]);
      }
  }
}

TEST(SelectFeatures, JsonRoundTrip) {
  FeatureMask m;
  m.selected = {true, false, true};
  m.threshold = 0.25;
  m.scores = {0.5, 0.1, -0.7};
  const nlohmann::json j = m;
  EXPECT_EQ(j.get<FeatureMask>(), m);
}

TEST(WeightImage, MinMaxAndPadding) {
  WeightSnapshot s;
  s.layers.push_back(Matrix(1, 3));
  s.layers[0] << -1, 0, 1;
  const WeightImage img = build_weight_image(s);
  EXPECT_EQ(img.width, 147);
  EXPECT_EQ(img.rows, 1);
  ASSERT_EQ(img.pixels.size(), 147u);
  EXPECT_EQ(img.pixels[0], 0.0);
  EXPECT_EQ(img.pixels[1], 0.5);
  EXPECT_EQ(img.pixels[2], 1.0);
  for (std::size_t i = 3; i < 147; ++i) EXPECT_EQ(img.pixels[i], 0.0);
}

TEST(WeightImage, AllEqualIsHalf) {
  WeightSnapshot s;
  s.layers.push_back(Matrix::Constant(2, 2, 3.0));
  const WeightImage img = build_weight_image(s);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(img.pixels[i], 0.5);
}

TEST(WeightImage, AgentGeometryAndOrder) {
  SplitMix64 rng(7);
  const WeightSnapshot s = random_snapshot(rng);
  const WeightImage img = build_weight_image(s);
  EXPECT_EQ(img.rows, (9408 + 4096 + 448 + 146) / 147);
  EXPECT_EQ(img.rows, 95);
  EXPECT_EQ(img.pixels.size(), static_cast<std::size_t>(img.rows) * 147);
  double lo = 1e9, hi = -1e9;
  for (const auto& m : s.layers) {
    lo = std::min(lo, m.minCoeff());
    hi = std::max(hi, m.maxCoeff());
  }
  // Pixel k is the k-th weight of the layer-by-layer row-major concatenation.
  std::vector<double> all;
  for (const auto& m : s.layers) {
    const auto f = flat(m);
    all.insert(all.end(), f.begin(), f.end());
  }
  for (std::size_t k = 0; k < all.size(); k += 97) EXPECT_NEAR(img.pixels[k], (all[k] - lo) / (hi - lo), 1e-15);
  for (double p : img.pixels) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(WeightFile, RoundTripBitExact) {
  TempDir dir("wf");
  SplitMix64 rng(8);
  WeightSnapshot s = random_snapshot(rng);
  s.layers[0](0, 0) = -0.0;
  s.layers[0](1, 0) = std::numeric_limits<double>::denorm_min();
  s.agent_id = "agent_7";
  save_snapshot(s, dir / "agent_7.rlwb");
  const WeightSnapshot r = load_snapshot(dir / "agent_7.rlwb");
  EXPECT_EQ(r.agent_id, "agent_7");
  ASSERT_EQ(r.layers.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l)
    EXPECT_EQ(std::memcmp(r.layers[l].data(), s.layers[l].data(), sizeof(double) * static_cast<std::size_t>(s.layers[l].size())), 0);
}

TEST(WeightFile, HeaderLayout) {
  TempDir dir("hdr");
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  write_weight_file(dir / "w.rlwb", {m});
  std::ifstream in(dir / "w.rlwb", std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_EQ(b.size(), 4u + 2 + 1 + 8 + 6 * 8);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "RLWB");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6], 1);
  EXPECT_EQ(b[7], 2);
  EXPECT_EQ(b[11], 3);
  double first;
  std::memcpy(&first, b.data() + 15, 8);
  EXPECT_EQ(first, 1.0);
  double second;
  std::memcpy(&second, b.data() + 23, 8);
  EXPECT_EQ(second, 2.0);
}

TEST(WeightFile, CorruptionErrors) {
  TempDir dir("corrupt");
  SplitMix64 rng(9);
  const WeightSnapshot s = random_snapshot(rng);
  const auto path = dir / "a.rlwb";
  save_snapshot(s, path);
  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto magic = bytes;
  magic[0] = 'X';
  write(magic);
  EXPECT_THROW(load_snapshot(path), BadMagic);
  auto version = bytes;
  version[4] = 2;
  write(version);
  EXPECT_THROW(load_snapshot(path), VersionUnsupported);
  write(std::vector<char>(bytes.begin(), bytes.end() - 8));
  EXPECT_THROW(load_snapshot(path), TruncatedFile);
  write(std::vector<char>(bytes.begin(), bytes.begin() + 5));
  EXPECT_THROW(load_snapshot(path), TruncatedFile);
  EXPECT_THROW(load_snapshot(dir / "missing.rlwb"), MissingWeights);
}

TEST(Snapshot, FromNetworkTransposesAndValidates) {
  SplitMix64 rng(10);
  const std::array<int, 4> sizes = {147, 64, 64, 7};
  const std::array<nn::Activation, 3> acts = {nn::Activation::Tanh, nn::Activation::Tanh, nn::Activation::Softmax};
  const nn::Mlp net = nn::Mlp::glorot(sizes, acts, rng);
  const WeightSnapshot s = snapshot_from_network(net, "x");
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.shapes(), kAgentLayerShapes);
  EXPECT_EQ(s.layers[0], net.layers()[0].weights.transpose());
  EXPECT_EQ(s.total_weights(), 13952u);
  WeightSnapshot bad = s;
  bad.layers.pop_back();
  EXPECT_THROW(bad.validate(), ShapeMismatch);
}

TEST(FeatureCsv, HeaderAndRows) {
  TempDir dir("csv");
  SplitMix64 rng(11);
  const WeightSnapshot s = random_snapshot(rng);
  write_feature_csv(dir / "f.csv", {"a0"}, {extract_stats(s)}, std::vector<double>{0.25});
  std::ifstream in(dir / "f.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header.rfind("agent_id,zeta,L1_mean,L1_var,L1_p0,L1_p25,L1_p50,L1_p75,L1_p100,L2_mean", 0), 0u);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 22);
  EXPECT_EQ(row.rfind("a0,0.25,", 0), 0u);
}
