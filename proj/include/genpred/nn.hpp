#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "genpred/rng.hpp"

namespace genpred::nn {

// Row-major so that a batch is "one sample per row" and weight matrices
// serialize in the same order they are laid out in memory.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { Identity, Tanh, Relu, Softmax };

// Which quantity the upstream gradient handed to backward() refers to.
// Logits skips the last layer's activation derivative; the PPO loss uses it
// to differentiate a log-softmax it computes itself.
enum class GradAt { Output, Logits };

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::Identity;

  int in_size() const { return static_cast<int>(weights.cols()); }
  int out_size() const { return static_cast<int>(weights.rows()); }
};

// Glorot-uniform weights in [-sqrt(6/(in+out)), +sqrt(6/(in+out))], zero bias.
DenseLayer make_dense(int in, int out, Activation act, SplitMix64& rng);

struct ParamGrad {
  Matrix weights;
  Vector bias;
};

// Gradients of a scalar with respect to every parameter tensor of a network,
// plus the gradient with respect to the network input (one row per sample).
struct GradientSet {
  std::vector<ParamGrad> layers;
  Matrix input;

  void add_scaled(const GradientSet& other, double scale);
  bool all_finite() const;
  std::vector<std::span<const double>> spans() const;
};

void apply_activation(Activation act, Matrix& z);

class Mlp {
 public:
  // Activations of every layer boundary from one recorded forward pass.
  struct Trace {
    std::vector<Matrix> values;  // values[0] = input, values[i+1] = output of layer i
    Matrix logits;               // pre-activation of the last layer
    bool recorded() const { return !values.empty(); }
  };

  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  // Builds a chain sizes[0] -> sizes[1] -> ... with one activation per layer.
  static Mlp glorot(std::span<const int> sizes, std::span<const Activation> activations, SplitMix64& rng);

  int input_size() const;
  int output_size() const;
  std::size_t parameter_count() const;

  Matrix forward(const Matrix& batch) const;
  Matrix forward(const Matrix& batch, Trace& trace) const;
  Vector forward(const Vector& x) const;

  // Reverse-mode pass. `upstream` holds dL/d(output) (or dL/d(logits) of the
  // last layer) for each sample of the recorded batch.
  // With need_input_grad false the returned `input` is left empty.
  GradientSet backward(const Trace& trace, const Matrix& upstream, GradAt at = GradAt::Output,
                       bool need_input_grad = true) const;

  GradientSet zero_gradients() const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  std::vector<std::span<double>> parameter_spans();
  std::vector<std::span<const double>> parameter_spans() const;

  bool operator==(const Mlp& other) const;

 private:
  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Convolution

// channels x (height*width), row-major within each channel.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix data;

  static FeatureMap zeros(int channels, int height, int width);
};

struct ConvLayer {
  Matrix kernels;  // out_ch x (in_ch * kh * kw), cross-correlation taps
  Vector bias;     // out_ch
  int in_channels = 1;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  Activation activation = Activation::Identity;

  int out_channels() const { return static_cast<int>(kernels.rows()); }
  // Zero padding of kernel/2 on every side: size-preserving at stride 1.
  int out_height(int in_height) const { return (in_height + 2 * (kernel_h / 2) - kernel_h) / stride + 1; }
  int out_width(int in_width) const { return (in_width + 2 * (kernel_w / 2) - kernel_w) / stride + 1; }
};

ConvLayer make_conv(int in_ch, int out_ch, int kernel, int stride, Activation act, SplitMix64& rng);

struct ConvTrace {
  FeatureMap input;
  Matrix columns;  // im2col of the padded input
  FeatureMap output;
  bool recorded = false;
};

FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& input);
FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& input, ConvTrace& trace);

struct ConvGradients {
  ParamGrad params;
  FeatureMap input;
};

ConvGradients conv_backward(const ConvLayer& layer, const ConvTrace& trace, const FeatureMap& upstream);

// Adaptive average pooling onto a fixed out_h x out_w grid. Bin i along an axis
// of length n covers [floor(i*n/out), ceil((i+1)*n/out)).
FeatureMap adaptive_mean_pool(const FeatureMap& input, int out_h, int out_w);
FeatureMap adaptive_mean_pool_backward(const FeatureMap& upstream, int in_h, int in_w);

// ---------------------------------------------------------------------------
// Optimizers

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  // Zero moments congruent with the given parameter tensors.
  static AdamState for_params(std::span<const std::span<const double>> params, double learning_rate);
  static AdamState for_params(const Mlp& net, double learning_rate);

  bool operator==(const AdamState&) const = default;
};

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state);
void adam_step(Mlp& net, const GradientSet& grads, AdamState& state);

void sgd_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
              double learning_rate);

}  // namespace genpred::nn
