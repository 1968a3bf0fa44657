#include "genpred/nn.hpp"

#include <cmath>
#include <string>

#include "genpred/errors.hpp"

namespace genpred::nn {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// dL/dz given the activation output y and dL/dy.
Matrix activation_backward(Activation act, const Matrix& y, const Matrix& g) {
  switch (act) {
    case Activation::Identity:
      return g;
    case Activation::Tanh:
      return (g.array() * (1.0 - y.array().square())).matrix();
    case Activation::Relu:
      return (g.array() * (y.array() > 0.0).cast<double>()).matrix();
    case Activation::Softmax: {
      const Vector dot = (g.array() * y.array()).rowwise().sum();
      return (y.array() * (g.colwise() - dot).array()).matrix();
    }
  }
  return g;
}

}  // namespace

DenseLayer make_dense(int in, int out, Activation act, SplitMix64& rng) {
  DenseLayer layer;
  layer.weights.resize(out, in);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = rng.uniform(-limit, limit);
  layer.bias = Vector::Zero(out);
  layer.activation = act;
  return layer;
}

void apply_activation(Activation act, Matrix& z) {
  switch (act) {
    case Activation::Identity:
      break;
    case Activation::Tanh:
      z = z.array().tanh().matrix();
      break;
    case Activation::Relu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::Softmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        const double m = row.maxCoeff();
        row = (row.array() - m).exp().matrix();
        row /= row.sum();
      }
      break;
  }
}

void GradientSet::add_scaled(const GradientSet& other, double scale) {
  if (other.layers.size() != layers.size()) throw ShapeMismatch("gradient sets have different layer counts");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights.rows() != other.layers[i].weights.rows() ||
        layers[i].weights.cols() != other.layers[i].weights.cols() ||
        layers[i].bias.size() != other.layers[i].bias.size())
      throw ShapeMismatch("gradient tensor shapes differ at layer " + std::to_string(i));
    layers[i].weights += scale * other.layers[i].weights;
    layers[i].bias += scale * other.layers[i].bias;
  }
}

bool GradientSet::all_finite() const {
  for (const auto& l : layers)
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  return input.allFinite();
}

std::vector<std::span<const double>> GradientSet::spans() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers) {
    out.emplace_back(l.weights.data(), static_cast<std::size_t>(l.weights.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].bias.size() != layers_[i].weights.rows())
      throw ShapeMismatch("bias length differs from weight rows at layer " + std::to_string(i));
    if (i > 0 && layers_[i].in_size() != layers_[i - 1].out_size())
      throw ShapeMismatch("layer " + std::to_string(i) + " input " + std::to_string(layers_[i].in_size()) +
                          " does not match previous output " + std::to_string(layers_[i - 1].out_size()));
  }
}

Mlp Mlp::glorot(std::span<const int> sizes, std::span<const Activation> activations, SplitMix64& rng) {
  if (sizes.size() < 2 || activations.size() != sizes.size() - 1)
    throw ShapeMismatch("need one activation per layer");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i)
    layers.push_back(make_dense(sizes[i], sizes[i + 1], activations[i], rng));
  return Mlp(std::move(layers));
}

int Mlp::input_size() const { return layers_.empty() ? 0 : layers_.front().in_size(); }
int Mlp::output_size() const { return layers_.empty() ? 0 : layers_.back().out_size(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

Matrix Mlp::forward(const Matrix& batch) const {
  if (batch.cols() != input_size())
    throw ShapeMismatch("input width " + std::to_string(batch.cols()) + ", network expects " +
                        std::to_string(input_size()));
  Matrix x = batch;
  for (const auto& layer : layers_) {
    Matrix z = x * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    apply_activation(layer.activation, z);
    x = std::move(z);
  }
  return x;
}

Matrix Mlp::forward(const Matrix& batch, Trace& trace) const {
  if (batch.cols() != input_size())
    throw ShapeMismatch("input width " + std::to_string(batch.cols()) + ", network expects " +
                        std::to_string(input_size()));
  trace.values.clear();
  trace.values.reserve(layers_.size() + 1);
  trace.values.push_back(batch);
  for (const auto& layer : layers_) {
    Matrix z = trace.values.back() * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    if (&layer == &layers_.back()) trace.logits = z;
    apply_activation(layer.activation, z);
    trace.values.push_back(std::move(z));
  }
  return trace.values.back();
}

Vector Mlp::forward(const Vector& x) const {
  Matrix row = x.transpose();
  return forward(row).row(0).transpose();
}

GradientSet Mlp::backward(const Trace& trace, const Matrix& upstream, GradAt at, bool need_input_grad) const {
  if (!trace.recorded() || trace.values.size() != layers_.size() + 1)
    throw NoForwardRecorded("backward() needs a trace from forward()");
  const Matrix& out = trace.values.back();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols())
    throw ShapeMismatch("upstream gradient " + shape_str(upstream.rows(), upstream.cols()) + " vs output " +
                        shape_str(out.rows(), out.cols()));

  GradientSet grads;
  grads.layers.resize(layers_.size());
  Matrix g = upstream;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const DenseLayer& layer = layers_[li];
    Matrix dz = (li + 1 == layers_.size() && at == GradAt::Logits)
                    ? g
                    : activation_backward(layer.activation, trace.values[li + 1], g);
    grads.layers[li].weights = dz.transpose() * trace.values[li];
    grads.layers[li].bias = dz.colwise().sum().transpose();
    if (li > 0 || need_input_grad) g = dz * layer.weights;
  }
  if (need_input_grad) grads.input = std::move(g);
  return grads;
}

GradientSet Mlp::zero_gradients() const {
  GradientSet g;
  for (const auto& l : layers_)
    g.layers.push_back({Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.bias.size())});
  return g;
}

std::vector<std::span<double>> Mlp::parameter_spans() {
  std::vector<std::span<double>> out;
  for (auto& l : layers_) {
    out.emplace_back(l.weights.data(), static_cast<std::size_t>(l.weights.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

std::vector<std::span<const double>> Mlp::parameter_spans() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers_) {
    out.emplace_back(l.weights.data(), static_cast<std::size_t>(l.weights.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

bool Mlp::operator==(const Mlp& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.activation != b.activation || a.weights.rows() != b.weights.rows() ||
        a.weights.cols() != b.weights.cols() || a.weights != b.weights || a.bias != b.bias)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

FeatureMap FeatureMap::zeros(int channels, int height, int width) {
  return FeatureMap{channels, height, width, Matrix::Zero(channels, static_cast<Eigen::Index>(height) * width)};
}

ConvLayer make_conv(int in_ch, int out_ch, int kernel, int stride, Activation act, SplitMix64& rng) {
  if (kernel % 2 == 0) throw InvalidArgument("kernel size must be odd");
  if (stride < 1) throw InvalidArgument("stride must be >= 1");
  if (act == Activation::Softmax) throw InvalidArgument("softmax is not a convolution activation");
  ConvLayer layer;
  layer.in_channels = in_ch;
  layer.kernel_h = kernel;
  layer.kernel_w = kernel;
  layer.stride = stride;
  layer.activation = act;
  const int taps = in_ch * kernel * kernel;
  layer.kernels.resize(out_ch, taps);
  const double limit = std::sqrt(6.0 / static_cast<double>(taps + out_ch * kernel * kernel));
  for (Eigen::Index i = 0; i < layer.kernels.size(); ++i) layer.kernels.data()[i] = rng.uniform(-limit, limit);
  layer.bias = Vector::Zero(out_ch);
  return layer;
}

namespace {

void check_conv_input(const ConvLayer& layer, const FeatureMap& input) {
  if (input.channels != layer.in_channels ||
      input.data.rows() != input.channels ||
      input.data.cols() != static_cast<Eigen::Index>(input.height) * input.width)
    throw ShapeMismatch("conv input has " + std::to_string(input.channels) + " channels, layer expects " +
                        std::to_string(layer.in_channels));
  if (layer.kernels.cols() != static_cast<Eigen::Index>(layer.in_channels) * layer.kernel_h * layer.kernel_w)
    throw ShapeMismatch("kernel tensor does not match in_channels * kh * kw");
  if (layer.kernel_h % 2 == 0 || layer.kernel_w % 2 == 0 || layer.stride < 1)
    throw ShapeMismatch("kernels must be odd-sized with stride >= 1");
}

Matrix im2col(const ConvLayer& layer, const FeatureMap& input, int oh, int ow) {
  const int ph = layer.kernel_h / 2;
  const int pw = layer.kernel_w / 2;
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(layer.in_channels) * layer.kernel_h * layer.kernel_w,
                             static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < layer.in_channels; ++c) {
    for (int ky = 0; ky < layer.kernel_h; ++ky) {
      for (int kx = 0; kx < layer.kernel_w; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * layer.kernel_h + ky) * layer.kernel_w + kx;
        double* dst = cols.row(row).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * layer.stride + ky - ph;
          if (iy < 0 || iy >= input.height) continue;
          const double* src = input.data.row(c).data() + static_cast<std::ptrdiff_t>(iy) * input.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * layer.stride + kx - pw;
            if (ix < 0 || ix >= input.width) continue;
            dst[static_cast<std::ptrdiff_t>(oy) * ow + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

}  // namespace

FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& input, ConvTrace& trace) {
  check_conv_input(layer, input);
  const int oh = layer.out_height(input.height);
  const int ow = layer.out_width(input.width);
  trace.input = input;
  trace.columns = im2col(layer, input, oh, ow);
  FeatureMap out{layer.out_channels(), oh, ow, layer.kernels * trace.columns};
  out.data.colwise() += layer.bias;
  apply_activation(layer.activation, out.data);
  trace.output = out;
  trace.recorded = true;
  return out;
}

FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& input) {
  ConvTrace scratch;
  return conv_forward(layer, input, scratch);
}

ConvGradients conv_backward(const ConvLayer& layer, const ConvTrace& trace, const FeatureMap& upstream) {
  if (!trace.recorded) throw NoForwardRecorded("conv_backward() needs a trace from conv_forward()");
  if (upstream.data.rows() != trace.output.data.rows() || upstream.data.cols() != trace.output.data.cols())
    throw ShapeMismatch("upstream gradient does not match conv output");

  const Matrix dz = activation_backward(layer.activation, trace.output.data, upstream.data);
  ConvGradients g;
  g.params.weights = dz * trace.columns.transpose();
  g.params.bias = dz.rowwise().sum();

  const Matrix dcols = layer.kernels.transpose() * dz;
  const FeatureMap& in = trace.input;
  g.input = FeatureMap::zeros(in.channels, in.height, in.width);
  const int oh = trace.output.height;
  const int ow = trace.output.width;
  const int ph = layer.kernel_h / 2;
  const int pw = layer.kernel_w / 2;
  for (int c = 0; c < layer.in_channels; ++c) {
    double* dst_base = g.input.data.row(c).data();
    for (int ky = 0; ky < layer.kernel_h; ++ky) {
      for (int kx = 0; kx < layer.kernel_w; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * layer.kernel_h + ky) * layer.kernel_w + kx;
        const double* src = dcols.row(row).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * layer.stride + ky - ph;
          if (iy < 0 || iy >= in.height) continue;
          double* dst = dst_base + static_cast<std::ptrdiff_t>(iy) * in.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * layer.stride + kx - pw;
            if (ix < 0 || ix >= in.width) continue;
            dst[ix] += src[static_cast<std::ptrdiff_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
  return g;
}

namespace {

struct Bin {
  int begin;
  int end;
};

Bin pool_bin(int i, int n, int out) {
  const int begin = static_cast<int>((static_cast<long>(i) * n) / out);
  const int end = static_cast<int>(((static_cast<long>(i) + 1) * n + out - 1) / out);
  return {begin, end};
}

}  // namespace

FeatureMap adaptive_mean_pool(const FeatureMap& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1 || input.height < out_h || input.width < out_w)
    throw ShapeMismatch("pool grid larger than its input");
  FeatureMap out = FeatureMap::zeros(input.channels, out_h, out_w);
  for (int c = 0; c < input.channels; ++c) {
    const double* src = input.data.row(c).data();
    for (int by = 0; by < out_h; ++by) {
      const Bin ry = pool_bin(by, input.height, out_h);
      for (int bx = 0; bx < out_w; ++bx) {
        const Bin rx = pool_bin(bx, input.width, out_w);
        double sum = 0.0;
        for (int y = ry.begin; y < ry.end; ++y)
          for (int x = rx.begin; x < rx.end; ++x) sum += src[static_cast<std::ptrdiff_t>(y) * input.width + x];
        out.data(c, static_cast<Eigen::Index>(by) * out_w + bx) =
            sum / static_cast<double>((ry.end - ry.begin) * (rx.end - rx.begin));
      }
    }
  }
  return out;
}

FeatureMap adaptive_mean_pool_backward(const FeatureMap& upstream, int in_h, int in_w) {
  FeatureMap g = FeatureMap::zeros(upstream.channels, in_h, in_w);
  for (int c = 0; c < upstream.channels; ++c) {
    double* dst = g.data.row(c).data();
    for (int by = 0; by < upstream.height; ++by) {
      const Bin ry = pool_bin(by, in_h, upstream.height);
      for (int bx = 0; bx < upstream.width; ++bx) {
        const Bin rx = pool_bin(bx, in_w, upstream.width);
        const double share = upstream.data(c, static_cast<Eigen::Index>(by) * upstream.width + bx) /
                             static_cast<double>((ry.end - ry.begin) * (rx.end - rx.begin));
        for (int y = ry.begin; y < ry.end; ++y)
          for (int x = rx.begin; x < rx.end; ++x) dst[static_cast<std::ptrdiff_t>(y) * in_w + x] += share;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

AdamState AdamState::for_params(std::span<const std::span<const double>> params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.size(), 0.0);
    s.second_moment.emplace_back(p.size(), 0.0);
  }
  return s;
}

AdamState AdamState::for_params(const Mlp& net, double learning_rate) {
  const auto spans = net.parameter_spans();
  return for_params(spans, learning_rate);
}

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeMismatch("parameter, gradient and moment tensor counts differ");
  for (std::size_t t = 0; t < params.size(); ++t)
    if (params[t].size() != grads[t].size() || params[t].size() != state.first_moment[t].size())
      throw ShapeMismatch("tensor " + std::to_string(t) + " is not congruent with its gradient or moments");

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    double* p = params[t].data();
    const double* g = grads[t].data();
    double* m = state.first_moment[t].data();
    double* v = state.second_moment[t].data();
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

void adam_step(Mlp& net, const GradientSet& grads, AdamState& state) {
  const auto p = net.parameter_spans();
  const auto g = grads.spans();
  adam_step(p, g, state);
}

void sgd_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
              double learning_rate) {
  if (params.size() != grads.size()) throw ShapeMismatch("parameter and gradient tensor counts differ");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].size() != grads[t].size())
      throw ShapeMismatch("tensor " + std::to_string(t) + " is not congruent with its gradient");
    for (std::size_t i = 0; i < params[t].size(); ++i) params[t][i] -= learning_rate * grads[t][i];
  }
}

}  // namespace genpred::nn
