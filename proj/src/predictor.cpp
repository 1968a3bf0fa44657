#include "genpred/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "genpred/errors.hpp"

namespace genpred::predictor {

using features::FeatureVector;
using features::WeightImage;
using nn::Matrix;
using nn::Vector;

std::string to_string(Architecture arch) { return arch == Architecture::Dnn ? "dnn" : "cnn"; }

Architecture architecture_from_string(const std::string& name) {
  if (name == "dnn") return Architecture::Dnn;
  if (name == "cnn") return Architecture::Cnn;
  throw InvalidArgument("unknown predictor architecture '" + name + "'");
}

Standardizer Standardizer::fit(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ShapeMismatch("cannot fit a standardizer on no rows");
  const std::size_t k = rows.front().size();
  Standardizer s;
  s.mean.assign(k, 0.0);
  s.stddev.assign(k, 0.0);
  for (const auto& r : rows) {
    if (r.size() != k) throw ShapeMismatch("ragged rows");
    for (std::size_t j = 0; j < k; ++j) s.mean[j] += r[j];
  }
  for (double& m : s.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t j = 0; j < k; ++j) s.stddev[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
  for (double& sd : s.stddev) {
    sd = std::sqrt(sd / static_cast<double>(rows.size()));
    if (!(sd > 0.0)) sd = 1.0;
  }
  return s;
}

std::vector<double> Standardizer::standardize(std::span<const double> x) const {
  if (x.size() != mean.size()) throw ShapeMismatch("standardizer width mismatch");
  std::vector<double> z(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) z[j] = (x[j] - mean[j]) / stddev[j];
  return z;
}

std::vector<double> Standardizer::destandardize(std::span<const double> z) const {
  if (z.size() != mean.size()) throw ShapeMismatch("standardizer width mismatch");
  std::vector<double> x(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) x[j] = z[j] * stddev[j] + mean[j];
  return x;
}

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = nlohmann::json{{"epochs", h.epochs},
                     {"batch_size", h.batch_size},
                     {"learning_rate", h.learning_rate},
                     {"seed", h.seed},
                     {"min_train_samples", h.min_train_samples},
                     {"hidden", h.hidden},
                     {"conv_channels", h.conv_channels},
                     {"pool_size", h.pool_size}};
}

void from_json(const nlohmann::json& j, TrainHyper& h) {
  const TrainHyper d;
  h.epochs = j.value("epochs", d.epochs);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.seed = j.value("seed", d.seed);
  h.min_train_samples = j.value("min_train_samples", d.min_train_samples);
  h.hidden = j.value("hidden", d.hidden);
  h.conv_channels = j.value("conv_channels", d.conv_channels);
  h.pool_size = j.value("pool_size", d.pool_size);
}

// ---------------------------------------------------------------------------

std::vector<double> DnnPredictor::select(const FeatureVector& f) const {
  if (f.size() != mask.selected.size())
    throw MaskMismatch("feature vector has " + std::to_string(f.size()) + " entries, mask covers " +
                       std::to_string(mask.selected.size()));
  std::vector<double> out;
  for (std::size_t i : mask.indices()) out.push_back(f[i]);
  return out;
}

double DnnPredictor::predict_features(const FeatureVector& f) const {
  const std::vector<double> z = standardizer.standardize(select(f));
  Matrix row(1, static_cast<Eigen::Index>(z.size()));
  std::copy(z.begin(), z.end(), row.data());
  return net.forward(row)(0, 0);
}

CnnPredictor CnnPredictor::make(int image_rows, int image_width, const TrainHyper& hyper, SplitMix64& rng) {
  CnnPredictor p;
  p.image_rows = image_rows;
  p.image_width = image_width;
  p.pool_h = hyper.pool_size;
  p.pool_w = hyper.pool_size;
  p.conv1 = nn::make_conv(1, hyper.conv_channels, 3, 1, nn::Activation::Relu, rng);
  p.conv2 = nn::make_conv(hyper.conv_channels, hyper.conv_channels, 3, 1, nn::Activation::Relu, rng);
  const std::array<int, 3> sizes = {hyper.conv_channels * p.pool_h * p.pool_w, hyper.hidden, 1};
  const std::array<nn::Activation, 2> acts = {nn::Activation::Relu, nn::Activation::Identity};
  p.head = nn::Mlp::glorot(sizes, acts, rng);
  return p;
}

namespace {

nn::FeatureMap image_map(const WeightImage& image, int rows, int width) {
  if (image.rows != rows || image.width != width)
    throw ShapeMismatch("weight image is " + std::to_string(image.rows) + "x" + std::to_string(image.width) +
                        ", predictor expects " + std::to_string(rows) + "x" + std::to_string(width));
  nn::FeatureMap m{1, rows, width, Matrix(1, static_cast<Eigen::Index>(rows) * width)};
  std::copy(image.pixels.begin(), image.pixels.end(), m.data.data());
  return m;
}

}  // namespace

double CnnPredictor::forward(const WeightImage& image, Trace& trace) const {
  const nn::FeatureMap in = image_map(image, image_rows, image_width);
  const nn::FeatureMap h1 = nn::conv_forward(conv1, in, trace.conv1);
  const nn::FeatureMap h2 = nn::conv_forward(conv2, h1, trace.conv2);
  const nn::FeatureMap pooled = nn::adaptive_mean_pool(h2, pool_h, pool_w);
  Matrix flat = Eigen::Map<const Matrix>(pooled.data.data(), 1, pooled.data.size());
  return head.forward(flat, trace.head)(0, 0);
}

double CnnPredictor::predict_image(const WeightImage& image) const {
  Trace trace;
  return forward(image, trace);
}

std::vector<nn::ParamGrad> CnnPredictor::backward(const Trace& trace, double upstream) const {
  const Matrix up = Matrix::Constant(1, 1, upstream);
  nn::GradientSet head_grads = head.backward(trace.head, up);
  nn::FeatureMap dpooled{conv2.out_channels(), pool_h, pool_w,
                         Eigen::Map<const Matrix>(head_grads.input.data(), conv2.out_channels(), pool_h * pool_w)};
  const nn::FeatureMap& h2 = trace.conv2.output;
  const nn::FeatureMap dh2 = nn::adaptive_mean_pool_backward(dpooled, h2.height, h2.width);
  nn::ConvGradients g2 = nn::conv_backward(conv2, trace.conv2, dh2);
  nn::ConvGradients g1 = nn::conv_backward(conv1, trace.conv1, g2.input);

  std::vector<nn::ParamGrad> out;
  out.push_back(std::move(g1.params));
  out.push_back(std::move(g2.params));
  for (auto& l : head_grads.layers) out.push_back(std::move(l));
  return out;
}

std::vector<std::span<double>> CnnPredictor::parameter_spans() {
  std::vector<std::span<double>> out;
  for (nn::ConvLayer* c : {&conv1, &conv2}) {
    out.emplace_back(c->kernels.data(), static_cast<std::size_t>(c->kernels.size()));
    out.emplace_back(c->bias.data(), static_cast<std::size_t>(c->bias.size()));
  }
  for (auto s : head.parameter_spans()) out.push_back(s);
  return out;
}

std::vector<std::span<const double>> CnnPredictor::parameter_spans() const {
  std::vector<std::span<const double>> out;
  for (const nn::ConvLayer* c : {&conv1, &conv2}) {
    out.emplace_back(c->kernels.data(), static_cast<std::size_t>(c->kernels.size()));
    out.emplace_back(c->bias.data(), static_cast<std::size_t>(c->bias.size()));
  }
  for (auto s : std::as_const(head).parameter_spans()) out.push_back(s);
  return out;
}

const DnnPredictor& PredictorArtifact::dnn() const {
  if (const auto* p = std::get_if<DnnPredictor>(&model)) return *p;
  throw InvalidArgument("artifact is not a DNN predictor");
}

DnnPredictor& PredictorArtifact::dnn() {
  if (auto* p = std::get_if<DnnPredictor>(&model)) return *p;
  throw InvalidArgument("artifact is not a DNN predictor");
}

const CnnPredictor& PredictorArtifact::cnn() const {
  if (const auto* p = std::get_if<CnnPredictor>(&model)) return *p;
  throw InvalidArgument("artifact is not a CNN predictor");
}

std::vector<std::span<const double>> PredictorArtifact::parameter_spans() const {
  if (architecture() == Architecture::Dnn) return dnn().net.parameter_spans();
  return cnn().parameter_spans();
}

// ---------------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_agent(
    const std::vector<std::string>& agent_ids, std::uint64_t seed, double test_fraction) {
  std::vector<std::size_t> order(agent_ids.size());
  std::iota(order.begin(), order.end(), 0);
  // Sort by id first so the split depends on ids, not on input order.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return agent_ids[a] < agent_ids[b]; });
  SplitMix64 rng(derive_seed(seed, 0x5b17));
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(order.size())));
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {train, test};
}

namespace {

struct Fit {
  double mse;
  std::optional<double> pearson;
};

Fit fit_quality(std::span<const double> pred, std::span<const double> labels) {
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) se += (pred[i] - labels[i]) * (pred[i] - labels[i]);
  Fit f{pred.empty() ? 0.0 : se / static_cast<double>(pred.size()), std::nullopt};
  try {
    f.pearson = features::pearson(pred, labels);
  } catch (const ZeroVariance&) {
  } catch (const ShapeMismatch&) {
  }
  return f;
}

void check_hyper(const TrainHyper& h, std::size_t n_train) {
  if (n_train < h.min_train_samples)
    throw TooFewSamples(std::to_string(n_train) + " training pairs, need at least " +
                        std::to_string(h.min_train_samples));
  if (h.epochs < 0 || h.batch_size < 1 || !(h.learning_rate > 0.0)) throw InvalidArgument("invalid training hyper-parameters");
}

double mean_label(auto const& data) {
  double s = 0.0;
  for (const auto& d : data) s += d.label;
  return s / static_cast<double>(data.size());
}

}  // namespace

PredictorArtifact train_dnn(std::span<const LabeledFeatures> train, const features::FeatureMask& mask,
                            const TrainHyper& hyper, std::span<const LabeledFeatures> held_out,
                            std::vector<features::LayerShape> snapshot_shapes) {
  check_hyper(hyper, train.size());
  if (mask.count() == 0) throw MaskMismatch("mask selects no feature");

  DnnPredictor model;
  model.mask = mask;
  std::vector<std::vector<double>> selected;
  selected.reserve(train.size());
  for (const auto& s : train) selected.push_back(model.select(s.features));
  model.standardizer = Standardizer::fit(selected);

  const auto k = static_cast<Eigen::Index>(mask.count());
  Matrix inputs(static_cast<Eigen::Index>(train.size()), k);
  Vector labels(static_cast<Eigen::Index>(train.size()));
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto z = model.standardizer.standardize(selected[i]);
    std::copy(z.begin(), z.end(), inputs.row(static_cast<Eigen::Index>(i)).data());
    labels(static_cast<Eigen::Index>(i)) = train[i].label;
  }

  SplitMix64 rng(derive_seed(hyper.seed, 1));
  const std::array<int, 4> sizes = {static_cast<int>(k), hyper.hidden, hyper.hidden, 1};
  const std::array<nn::Activation, 3> acts = {nn::Activation::Relu, nn::Activation::Relu, nn::Activation::Identity};
  model.net = nn::Mlp::glorot(sizes, acts, rng);
  model.net.layers().back().bias(0) = mean_label(train);

  nn::AdamState adam = nn::AdamState::for_params(model.net, hyper.learning_rate);
  std::vector<Eigen::Index> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  nn::Mlp::Trace trace;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(std::span<Eigen::Index>(order));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      const auto b = static_cast<Eigen::Index>(end - start);
      Matrix xb(b, k);
      Vector yb(b);
      for (Eigen::Index r = 0; r < b; ++r) {
        xb.row(r) = inputs.row(order[start + static_cast<std::size_t>(r)]);
        yb(r) = labels(order[start + static_cast<std::size_t>(r)]);
      }
      const Matrix pred = model.net.forward(xb, trace);
      const Matrix up = (2.0 / static_cast<double>(b)) * (pred.col(0) - yb);
      const nn::GradientSet grads = model.net.backward(trace, up);
      nn::adam_step(model.net, grads, adam);
    }
  }

  PredictorArtifact artifact{std::move(model), std::move(snapshot_shapes), {}};
  artifact.metadata.hyper = hyper;
  artifact.metadata.n_train = train.size();
  artifact.metadata.n_test = held_out.size();
  auto score = [&](std::span<const LabeledFeatures> set) {
    std::vector<double> p, y;
    for (const auto& s : set) {
      p.push_back(artifact.dnn().predict_features(s.features));
      y.push_back(s.label);
    }
    return fit_quality(p, y);
  };
  const Fit tr = score(train);
  artifact.metadata.train_mse = tr.mse;
  artifact.metadata.train_pearson = tr.pearson;
  if (!held_out.empty()) {
    const Fit te = score(held_out);
    artifact.metadata.test_mse = te.mse;
    artifact.metadata.test_pearson = te.pearson;
  }
  return artifact;
}

PredictorArtifact train_cnn(std::span<const LabeledImage> train, const TrainHyper& hyper,
                            std::span<const LabeledImage> held_out,
                            std::vector<features::LayerShape> snapshot_shapes) {
  check_hyper(hyper, train.size());
  const int rows = train.front().image.rows;
  const int width = train.front().image.width;

  SplitMix64 rng(derive_seed(hyper.seed, 2));
  CnnPredictor model = CnnPredictor::make(rows, width, hyper, rng);
  model.head.layers().back().bias(0) = mean_label(train);

  std::vector<std::span<const double>> const_spans = std::as_const(model).parameter_spans();
  nn::AdamState adam = nn::AdamState::for_params(const_spans, hyper.learning_rate);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  CnnPredictor::Trace trace;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      const double b = static_cast<double>(end - start);
      std::vector<nn::ParamGrad> acc;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledImage& sample = train[order[i]];
        const double pred = model.forward(sample.image, trace);
        std::vector<nn::ParamGrad> g = model.backward(trace, 2.0 * (pred - sample.label) / b);
        if (acc.empty()) {
          acc = std::move(g);
        } else {
          for (std::size_t t = 0; t < acc.size(); ++t) {
            acc[t].weights += g[t].weights;
            acc[t].bias += g[t].bias;
          }
        }
      }
      std::vector<std::span<const double>> grads;
      for (const auto& g : acc) {
        grads.emplace_back(g.weights.data(), static_cast<std::size_t>(g.weights.size()));
        grads.emplace_back(g.bias.data(), static_cast<std::size_t>(g.bias.size()));
      }
      const auto params = model.parameter_spans();
      nn::adam_step(params, grads, adam);
    }
  }

  PredictorArtifact artifact{std::move(model), std::move(snapshot_shapes), {}};
  artifact.metadata.hyper = hyper;
  artifact.metadata.n_train = train.size();
  artifact.metadata.n_test = held_out.size();
  auto score = [&](std::span<const LabeledImage> set) {
    std::vector<double> p, y;
    for (const auto& s : set) {
      p.push_back(artifact.cnn().predict_image(s.image));
      y.push_back(s.label);
    }
    return fit_quality(p, y);
  };
  const Fit tr = score(train);
  artifact.metadata.train_mse = tr.mse;
  artifact.metadata.train_pearson = tr.pearson;
  if (!held_out.empty()) {
    const Fit te = score(held_out);
    artifact.metadata.test_mse = te.mse;
    artifact.metadata.test_pearson = te.pearson;
  }
  return artifact;
}

double predict(const PredictorArtifact& artifact, const features::WeightSnapshot& snapshot) {
  snapshot.validate(artifact.snapshot_shapes);
  if (artifact.architecture() == Architecture::Dnn)
    return artifact.dnn().predict_features(features::extract_stats(snapshot));
  const CnnPredictor& cnn = artifact.cnn();
  return cnn.predict_image(features::build_weight_image(snapshot, cnn.image_width));
}

GenScore gen_score_with_gradient(const PredictorArtifact& artifact, const nn::Mlp& policy) {
  if (artifact.architecture() != Architecture::Dnn)
    throw InvalidArgument("the loss hook needs a DNN predictor; CNN artifacts are offline-only");
  const DnnPredictor& dnn = artifact.dnn();
  if (dnn.mask.count() != static_cast<std::size_t>(dnn.net.input_size()))
    throw MaskMismatch("mask selects " + std::to_string(dnn.mask.count()) + " features, predictor takes " +
                       std::to_string(dnn.net.input_size()));

  const features::WeightSnapshot snapshot = features::snapshot_from_network(policy);
  snapshot.validate(artifact.snapshot_shapes);
  const features::StatsEvaluation stats(snapshot);

  const std::vector<double> z = dnn.standardizer.standardize(dnn.select(stats.features()));
  Matrix row(1, static_cast<Eigen::Index>(z.size()));
  std::copy(z.begin(), z.end(), row.data());
  nn::Mlp::Trace trace;
  GenScore out;
  out.value = dnn.net.forward(row, trace)(0, 0);
  const nn::GradientSet g = dnn.net.backward(trace, Matrix::Constant(1, 1, 1.0));

  std::vector<double> upstream(stats.features().size(), 0.0);
  const auto idx = dnn.mask.indices();
  for (std::size_t k = 0; k < idx.size(); ++k)
    upstream[idx[k]] = g.input(0, static_cast<Eigen::Index>(k)) / dnn.standardizer.stddev[k];
  const std::vector<Matrix> dsnap = stats.vjp(upstream);

  out.gradient = policy.zero_gradients();
  for (std::size_t l = 0; l < dsnap.size(); ++l) out.gradient.layers[l].weights = dsnap[l].transpose();
  return out;
}

void to_json(nlohmann::json& j, const EvaluationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"agent_id", row.agent_id}, {"label", row.label}, {"prediction", row.prediction}});
  j = nlohmann::json{{"pearson", r.pearson},
                     {"mse", r.mse},
                     {"test_disjoint_from_training", r.test_disjoint_from_training},
                     {"rows", rows}};
}

EvaluationReport report_from_predictions(std::vector<PredictionRow> rows, bool test_disjoint_from_training) {
  EvaluationReport report;
  report.test_disjoint_from_training = test_disjoint_from_training;
  std::vector<double> p, y;
  for (const auto& r : rows) {
    p.push_back(r.prediction);
    y.push_back(r.label);
  }
  report.pearson = features::pearson(p, y);
  double se = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) se += (p[i] - y[i]) * (p[i] - y[i]);
  report.mse = se / static_cast<double>(p.size());
  report.rows = std::move(rows);
  return report;
}

EvaluationReport evaluate_predictor(const PredictorArtifact& artifact, std::span<const LabeledSnapshot> test_set,
                                    bool test_disjoint_from_training) {
  std::vector<PredictionRow> rows;
  for (const auto& s : test_set) rows.push_back({s.agent_id, s.label, predict(artifact, s.snapshot)});
  return report_from_predictions(std::move(rows), test_disjoint_from_training);
}

// ---------------------------------------------------------------------------

namespace {

Matrix column_matrix(const Vector& v) { return Eigen::Map<const Matrix>(v.data(), v.size(), 1); }

Vector to_vector(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void save_artifact(const PredictorArtifact& artifact, const std::filesystem::path& dir,
                   const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  std::vector<Matrix> tensors;
  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["architecture"] = to_string(artifact.architecture());
  meta["snapshot_shapes"] = artifact.snapshot_shapes;
  meta["hyper"] = artifact.metadata.hyper;
  meta["metrics"] = {{"n_train", artifact.metadata.n_train},
                     {"n_test", artifact.metadata.n_test},
                     {"train_mse", artifact.metadata.train_mse},
                     {"train_pearson", optional_json(artifact.metadata.train_pearson)},
                     {"test_mse", optional_json(artifact.metadata.test_mse)},
                     {"test_pearson", optional_json(artifact.metadata.test_pearson)}};
  meta["provenance"] = provenance;

  if (artifact.architecture() == Architecture::Dnn) {
    const DnnPredictor& d = artifact.dnn();
    meta["mask"] = d.mask;
    meta["standardization"] = {{"mean", d.standardizer.mean}, {"stddev", d.standardizer.stddev}};
    for (const auto& l : d.net.layers()) {
      tensors.push_back(l.weights);
      tensors.push_back(column_matrix(l.bias));
    }
  } else {
    const CnnPredictor& c = artifact.cnn();
    meta["image"] = {{"rows", c.image_rows}, {"width", c.image_width}, {"pool_h", c.pool_h}, {"pool_w", c.pool_w}};
    for (const nn::ConvLayer* conv : {&c.conv1, &c.conv2}) {
      tensors.push_back(conv->kernels);
      tensors.push_back(column_matrix(conv->bias));
    }
    for (const auto& l : c.head.layers()) {
      tensors.push_back(l.weights);
      tensors.push_back(column_matrix(l.bias));
    }
  }
  features::write_weight_file(dir / "params.rlwb", tensors);
  std::ofstream out(dir / "meta.json");
  if (!out) throw Error("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

PredictorArtifact load_artifact(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw MissingWeights("no meta.json in " + dir.string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  const std::vector<Matrix> tensors = features::read_weight_file(dir / "params.rlwb");

  TrainingMetadata md;
  md.hyper = meta.at("hyper").get<TrainHyper>();
  const auto& m = meta.at("metrics");
  md.n_train = m.at("n_train").get<std::size_t>();
  md.n_test = m.at("n_test").get<std::size_t>();
  md.train_mse = m.at("train_mse").get<double>();
  md.train_pearson = optional_from(m, "train_pearson");
  md.test_mse = optional_from(m, "test_mse");
  md.test_pearson = optional_from(m, "test_pearson");
  auto shapes = meta.at("snapshot_shapes").get<std::vector<features::LayerShape>>();

  auto dense_chain = [&](std::size_t first, std::span<const nn::Activation> acts) {
    std::vector<nn::DenseLayer> layers;
    for (std::size_t i = 0; i < acts.size(); ++i)
      layers.push_back({tensors.at(first + 2 * i), to_vector(tensors.at(first + 2 * i + 1)), acts[i]});
    return nn::Mlp(std::move(layers));
  };

  const Architecture arch = architecture_from_string(meta.at("architecture").get<std::string>());
  if (arch == Architecture::Dnn) {
    if (tensors.size() != 6) throw ShapeMismatch("DNN artifact must hold 6 tensors");
    DnnPredictor d;
    d.mask = meta.at("mask").get<features::FeatureMask>();
    d.standardizer.mean = meta.at("standardization").at("mean").get<std::vector<double>>();
    d.standardizer.stddev = meta.at("standardization").at("stddev").get<std::vector<double>>();
    const std::array<nn::Activation, 3> acts = {nn::Activation::Relu, nn::Activation::Relu, nn::Activation::Identity};
    d.net = dense_chain(0, acts);
    if (d.mask.count() != static_cast<std::size_t>(d.net.input_size()))
      throw MaskMismatch("stored mask does not match the stored network input");
    return PredictorArtifact{std::move(d), std::move(shapes), md};
  }

  if (tensors.size() != 8) throw ShapeMismatch("CNN artifact must hold 8 tensors");
  CnnPredictor c;
  const auto& img = meta.at("image");
  c.image_rows = img.at("rows").get<int>();
  c.image_width = img.at("width").get<int>();
  c.pool_h = img.at("pool_h").get<int>();
  c.pool_w = img.at("pool_w").get<int>();
  auto conv_from = [&](std::size_t t, int in_channels) {
    nn::ConvLayer layer;
    layer.kernels = tensors.at(t);
    layer.bias = to_vector(tensors.at(t + 1));
    layer.in_channels = in_channels;
    layer.kernel_h = 3;
    layer.kernel_w = 3;
    layer.stride = 1;
    layer.activation = nn::Activation::Relu;
    return layer;
  };
  c.conv1 = conv_from(0, 1);
  c.conv2 = conv_from(2, c.conv1.out_channels());
  const std::array<nn::Activation, 2> acts = {nn::Activation::Relu, nn::Activation::Identity};
  c.head = dense_chain(4, acts);
  return PredictorArtifact{std::move(c), std::move(shapes), md};
}

}  // namespace genpred::predictor
