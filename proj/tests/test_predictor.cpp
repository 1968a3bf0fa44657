#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "genpred/errors.hpp"
#include "genpred/predictor.hpp"
#include "test_util.hpp"

using namespace genpred;
using namespace genpred::predictor;
using features::FeatureMask;
using features::FeatureVector;
using features::LayerShape;
using features::WeightSnapshot;
using nn::Matrix;
using genpred::testing::central_diff;
using genpred::testing::rel_err;
using genpred::testing::TempDir;

namespace {

FeatureMask full_mask(std::size_t n = 21) {
  FeatureMask m;
  m.selected.assign(n, true);
  m.scores.assign(n, 1.0);
  m.threshold = 0.0;
  return m;
}

double r_squared(std::span<const double> pred, std::span<const double> y) {
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sse += (pred[i] - y[i]) * (pred[i] - y[i]);
    sst += (y[i] - mean) * (y[i] - mean);
  }
  return 1.0 - sse / sst;
}

std::vector<LabeledFeatures> linear_dataset(std::size_t n, SplitMix64& rng) {
  std::vector<LabeledFeatures> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledFeatures s;
    s.agent_id = "a" + std::to_string(i);
    s.features.resize(21);
    for (auto& f : s.features) f = rng.uniform(-2, 2);
    s.label = 0.3 * s.features[4] + 0.5;
    out.push_back(s);
  }
  return out;
}

TrainHyper quick_hyper(std::uint64_t seed = 1, int epochs = 200) {
  TrainHyper h;
  h.seed = seed;
  h.epochs = epochs;
  return h;
}

// Tiny policy shapes keep finite differences cheap.
const std::vector<LayerShape> kTinyShapes = {{6, 4}, {4, 4}, {4, 3}};

nn::Mlp tiny_policy(SplitMix64& rng) {
  const std::array<int, 4> sizes = {6, 4, 4, 3};
  const std::array<nn::Activation, 3> acts = {nn::Activation::Tanh, nn::Activation::Tanh, nn::Activation::Softmax};
  return nn::Mlp::glorot(sizes, acts, rng);
}

PredictorArtifact random_dnn_artifact(SplitMix64& rng, const FeatureMask& mask) {
  DnnPredictor d;
  d.mask = mask;
  const std::size_t k = mask.count();
  d.standardizer.mean.resize(k);
  d.standardizer.stddev.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    d.standardizer.mean[j] = rng.uniform(-0.2, 0.2);
    d.standardizer.stddev[j] = rng.uniform(0.05, 0.5);
  }
  const std::array<int, 4> sizes = {static_cast<int>(k), 8, 8, 1};
  const std::array<nn::Activation, 3> acts = {nn::Activation::Tanh, nn::Activation::Tanh, nn::Activation::Identity};
  d.net = nn::Mlp::glorot(sizes, acts, rng);
  for (auto& l : d.net.layers())
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = rng.uniform(-0.1, 0.1);
  return PredictorArtifact{std::move(d), kTinyShapes, {}};
}

std::vector<double> flat_params(const PredictorArtifact& a) {
  std::vector<double> out;
  for (const auto& s : a.parameter_spans()) out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

TEST(Standardizer, RoundTripAndZeroStd) {
  SplitMix64 rng(1);
  std::vector<std::vector<double>> rows(30, std::vector<double>(4));
  for (auto& r : rows) {
    for (auto& v : r) v = rng.uniform(-10, 10);
    r[2] = 5.0;
  }
  const Standardizer s = Standardizer::fit(rows);
  EXPECT_EQ(s.stddev[2], 1.0);
  for (const auto& r : rows) {
    const auto back = s.destandardize(s.standardize(r));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(back[j], r[j], 1e-12);
  }
}

TEST(TrainDnn, LinearLabelsHeldOut) {
  SplitMix64 rng(2);
  const auto train = linear_dataset(80, rng), test = linear_dataset(40, rng);
  FeatureMask mask = full_mask();
  for (std::size_t j = 0; j < 21; ++j) mask.selected[j] = j == 4 || j == 9 || j == 12;
  const PredictorArtifact a = train_dnn(train, mask, quick_hyper(2, 500), test);
  std::vector<double> p, y;
  for (const auto& s : test) {
    p.push_back(a.dnn().predict_features(s.features));
    y.push_back(s.label);
  }
  EXPECT_GE(r_squared(p, y), 0.95);
  ASSERT_TRUE(a.metadata.test_pearson.has_value());
  EXPECT_GT(*a.metadata.test_pearson, 0.97);
}

TEST(TrainDnn, ConstantLabels) {
  SplitMix64 rng(3);
  auto train = linear_dataset(30, rng);
  for (auto& s : train) s.label = 0.42;
  const PredictorArtifact a = train_dnn(train, full_mask(), quick_hyper(3, 500));
  for (const auto& s : train) EXPECT_NEAR(a.dnn().predict_features(s.features), 0.42, 1e-3);
}

TEST(TrainDnn, DeterministicAndTooFewSamples) {
  SplitMix64 rng(4);
  const auto train = linear_dataset(40, rng);
  const auto a = train_dnn(train, full_mask(), quick_hyper(9, 20));
  const auto b = train_dnn(train, full_mask(), quick_hyper(9, 20));
  EXPECT_EQ(flat_params(a), flat_params(b));
  const auto c = train_dnn(train, full_mask(), quick_hyper(10, 20));
  EXPECT_NE(flat_params(a), flat_params(c));
  const std::vector<LabeledFeatures> few(train.begin(), train.begin() + 19);
  EXPECT_THROW(train_dnn(few, full_mask(), quick_hyper()), TooFewSamples);
}

TEST(TrainDnn, MaskSelectsInputs) {
  SplitMix64 rng(5);
  const auto train = linear_dataset(40, rng);
  FeatureMask mask = full_mask();
  for (std::size_t j = 0; j < 21; ++j) mask.selected[j] = j == 4 || j == 9;
  const PredictorArtifact a = train_dnn(train, mask, quick_hyper(5, 10));
  EXPECT_EQ(a.dnn().net.input_size(), 2);
  EXPECT_THROW(a.dnn().predict_features(FeatureVector(20, 0.0)), MaskMismatch);
}

TEST(TrainCnn, MeanPixelLabels) {
  SplitMix64 rng(6);
  auto make = [&](std::size_t n) {
    std::vector<LabeledImage> out;
    for (std::size_t i = 0; i < n; ++i) {
      LabeledImage s;
      s.agent_id = "img" + std::to_string(i);
      s.image.rows = 12;
      s.image.width = 16;
      const double brightness = rng.uniform01();
      for (int p = 0; p < 12 * 16; ++p) s.image.pixels.push_back(brightness * rng.uniform01());
      s.label = std::accumulate(s.image.pixels.begin(), s.image.pixels.end(), 0.0) / (12.0 * 16.0);
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto train = make(80), test = make(30);
  TrainHyper h = quick_hyper(6, 150);
  h.pool_size = 4;
  const PredictorArtifact a = train_cnn(train, h, test);
  std::vector<double> p, y;
  for (const auto& s : test) {
    p.push_back(a.cnn().predict_image(s.image));
    y.push_back(s.label);
  }
  EXPECT_GE(r_squared(p, y), 0.9);
}

TEST(TrainCnn, ConstantLabelsAndDeterminism) {
  SplitMix64 rng(7);
  std::vector<LabeledImage> train;
  for (int i = 0; i < 20; ++i) {
    LabeledImage s;
    s.agent_id = std::to_string(i);
    s.image.rows = 6;
    s.image.width = 10;
    for (int p = 0; p < 60; ++p) s.image.pixels.push_back(rng.uniform01());
    s.label = 0.3;
    train.push_back(std::move(s));
  }
  TrainHyper h = quick_hyper(7, 500);
  h.pool_size = 3;
  const auto a = train_cnn(train, h);
  const auto b = train_cnn(train, h);
  EXPECT_EQ(flat_params(a), flat_params(b));
  for (const auto& s : train) EXPECT_NEAR(a.cnn().predict_image(s.image), 0.3, 1e-3);
}

TEST(CnnBackward, FiniteDifferences) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SplitMix64 rng(700 + seed);
    TrainHyper h;
    h.conv_channels = 2;
    h.pool_size = 3;
    h.hidden = 5;
    CnnPredictor p = CnnPredictor::make(5, 7, h, rng);
    for (auto* b : {&p.conv1.bias, &p.conv2.bias})
      for (Eigen::Index i = 0; i < b->size(); ++i) (*b)(i) = rng.uniform(0.05, 0.2);
    features::WeightImage img{5, 7, {}};
    for (int i = 0; i < 35; ++i) img.pixels.push_back(rng.uniform01());
    CnnPredictor::Trace tr;
    p.forward(img, tr);
    const auto grads = p.backward(tr, 1.0);
    auto params = p.parameter_spans();
    std::vector<std::span<const double>> gs;
    for (const auto& g : grads) {
      gs.emplace_back(g.weights.data(), static_cast<std::size_t>(g.weights.size()));
      gs.emplace_back(g.bias.data(), static_cast<std::size_t>(g.bias.size()));
    }
    ASSERT_EQ(gs.size(), params.size());
    auto f = [&] { return p.predict_image(img); };
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i)
        worst = std::max(worst, rel_err(gs[t][i], central_diff(params[t], i, f)));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Predict, PureAndPermutationInvariantForDnn) {
  SplitMix64 rng(8);
  const PredictorArtifact a = random_dnn_artifact(rng, full_mask());
  const nn::Mlp pol = tiny_policy(rng);
  WeightSnapshot s = features::snapshot_from_network(pol);
  const double p1 = predict(a, s), p2 = predict(a, s);
  EXPECT_EQ(p1, p2);
  EXPECT_TRUE(std::isfinite(p1));
  std::span<double> x(s.layers[0].data(), static_cast<std::size_t>(s.layers[0].size()));
  rng.shuffle(x);
  EXPECT_NEAR(predict(a, s), p1, 1e-12);
  WeightSnapshot wrong = s;
  wrong.layers.pop_back();
  EXPECT_THROW(predict(a, wrong), ShapeMismatch);
}

TEST(GenScore, FiniteDifferences) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(900 + seed);
    FeatureMask mask = full_mask();
    for (std::size_t j = 0; j < 21; ++j) mask.selected[j] = rng.below(3) != 0;
    mask.selected[1] = true;
    const PredictorArtifact a = random_dnn_artifact(rng, mask);
    nn::Mlp pol = tiny_policy(rng);
    const GenScore g = gen_score_with_gradient(a, pol);
    EXPECT_EQ(g.value, predict(a, features::snapshot_from_network(pol)));
    auto f = [&] { return predict(a, features::snapshot_from_network(pol)); };
    auto params = pol.parameter_spans();
    const auto grads = g.gradient.spans();
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i)
        worst = std::max(worst, rel_err(grads[t][i], central_diff(params[t], i, f, 1e-7)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(GenScore, ZeroFinalLayerAndScaling) {
  SplitMix64 rng(10);
  PredictorArtifact a = random_dnn_artifact(rng, full_mask());
  const nn::Mlp pol = tiny_policy(rng);
  const GenScore base = gen_score_with_gradient(a, pol);

  PredictorArtifact doubled = a;
  doubled.dnn().net.layers().back().weights *= 2.0;
  doubled.dnn().net.layers().back().bias *= 2.0;
  const GenScore d = gen_score_with_gradient(doubled, pol);
  EXPECT_NEAR(d.value, 2.0 * base.value, 1e-14);
  const auto bs = base.gradient.spans(), ds = d.gradient.spans();
  for (std::size_t t = 0; t < bs.size(); ++t)
    for (std::size_t i = 0; i < bs[t].size(); ++i) EXPECT_NEAR(ds[t][i], 2.0 * bs[t][i], 1e-14);

  PredictorArtifact zero = a;
  zero.dnn().net.layers().back().weights.setZero();
  zero.dnn().net.layers().back().bias(0) = 0.37;
  const GenScore z = gen_score_with_gradient(zero, pol);
  EXPECT_EQ(z.value, 0.37);
  for (const auto& s : z.gradient.spans())
    for (double v : s) EXPECT_EQ(v, 0.0);
}

TEST(GenScore, LeavesArtifactUntouchedAndRejectsCnn) {
  SplitMix64 rng(11);
  const PredictorArtifact a = random_dnn_artifact(rng, full_mask());
  const auto before = flat_params(a);
  nn::Mlp pol = tiny_policy(rng);
  for (int i = 0; i < 20; ++i) {
    gen_score_with_gradient(a, pol);
    pol.layers()[0].weights(0, 0) += 0.01;
  }
  EXPECT_EQ(flat_params(a), before);

  TrainHyper h;
  h.pool_size = 2;
  PredictorArtifact cnn{CnnPredictor::make(4, 4, h, rng), kTinyShapes, {}};
  EXPECT_THROW(gen_score_with_gradient(cnn, pol), InvalidArgument);
}

TEST(Evaluate, ExactCases) {
  std::vector<PredictionRow> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({std::to_string(i), 0.1 * i, 0.1 * i});
  const auto r = report_from_predictions(rows, true);
  EXPECT_NEAR(r.pearson, 1.0, 1e-15);
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_TRUE(r.test_disjoint_from_training);
  for (auto& row : rows) row.prediction += 0.25;
  const auto s = report_from_predictions(rows, false);
  EXPECT_NEAR(s.pearson, 1.0, 1e-15);
  EXPECT_NEAR(s.mse, 0.0625, 1e-15);
  for (auto& row : rows) row.prediction = 0.5;
  EXPECT_THROW(report_from_predictions(rows, true), ZeroVariance);
}

TEST(Evaluate, PearsonMatchesFeaturesPearson) {
  SplitMix64 rng(12);
  std::vector<PredictionRow> rows;
  std::vector<double> p, y;
  for (int i = 0; i < 50; ++i) {
    rows.push_back({std::to_string(i), rng.uniform01(), rng.uniform01()});
    y.push_back(rows.back().label);
    p.push_back(rows.back().prediction);
  }
  EXPECT_EQ(report_from_predictions(rows, true).pearson, features::pearson(p, y));
}

TEST(Evaluate, MonteCarloNull) {
  int small = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(3000 + seed);
    std::vector<PredictionRow> rows;
    for (int i = 0; i < 1000; ++i) rows.push_back({std::to_string(i), rng.uniform01(), rng.uniform01()});
    small += std::abs(report_from_predictions(rows, true).pearson) < 0.1;
  }
  // |r| < 0.1 is a 3-sigma event at n = 1000.
  EXPECT_GE(small, 97);
}

TEST(Split, DisjointSeededOrderIndependent) {
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.push_back("agent_" + std::to_string(1000 + i));
  const auto [train, test] = split_by_agent(ids, 5);
  EXPECT_EQ(test.size(), 40u);
  EXPECT_EQ(train.size(), 160u);
  std::set<std::size_t> all(train.begin(), train.end());
  for (auto t : test) EXPECT_FALSE(all.count(t));
  all.insert(test.begin(), test.end());
  EXPECT_EQ(all.size(), 200u);

  std::vector<std::string> reversed(ids.rbegin(), ids.rend());
  const auto [train2, test2] = split_by_agent(reversed, 5);
  std::set<std::string> a, b;
  for (auto t : test) a.insert(ids[t]);
  for (auto t : test2) b.insert(reversed[t]);
  EXPECT_EQ(a, b);
  const auto [train3, test3] = split_by_agent(ids, 6);
  EXPECT_NE(test, test3);
}

TEST(Artifact, SaveLoadRoundTrip) {
  TempDir dir("artifact");
  SplitMix64 rng(13);
  const auto train = linear_dataset(30, rng);
  FeatureMask mask = full_mask();
  mask.selected[3] = false;
  const auto a = train_dnn(train, mask, quick_hyper(13, 5));
  save_artifact(a, dir / "dnn", {{"note", "x"}});
  const auto b = load_artifact(dir / "dnn");
  EXPECT_EQ(b.architecture(), Architecture::Dnn);
  EXPECT_EQ(flat_params(a), flat_params(b));
  EXPECT_EQ(b.dnn().mask, a.dnn().mask);
  EXPECT_EQ(b.dnn().standardizer.mean, a.dnn().standardizer.mean);
  EXPECT_EQ(b.snapshot_shapes, a.snapshot_shapes);
  for (const auto& s : train) EXPECT_EQ(a.dnn().predict_features(s.features), b.dnn().predict_features(s.features));

  TrainHyper h;
  h.pool_size = 2;
  const PredictorArtifact c{CnnPredictor::make(3, 5, h, rng), kTinyShapes, {}};
  save_artifact(c, dir / "cnn");
  const auto d = load_artifact(dir / "cnn");
  EXPECT_EQ(d.architecture(), Architecture::Cnn);
  EXPECT_EQ(flat_params(c), flat_params(d));
  EXPECT_EQ(d.cnn().image_rows, 3);
  EXPECT_EQ(d.cnn().pool_h, 2);
  EXPECT_THROW(load_artifact(dir / "none"), Error);
}
