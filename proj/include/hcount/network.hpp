#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hcount/tensor.hpp"

namespace hcount {

/// Thrown when a tensor does not have the shape an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when backward() is handed activations that do not belong to the
/// network state it is asked to differentiate.
class StaleActivationsError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Thrown when training produces a non-finite loss or weight.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind { Conv3, MaxPool2, Relu, Linear, RoiPool, Softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  /// out_channels for conv3, out_features for linear, 0 otherwise.
  std::size_t units = 0;
  /// Output side length for roipool, 0 otherwise.
  std::size_t pool_size = 0;

  static LayerSpec conv3(std::size_t out_channels) { return {LayerKind::Conv3, out_channels, 0}; }
  static LayerSpec maxpool() { return {LayerKind::MaxPool2, 0, 0}; }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0}; }
  static LayerSpec linear(std::size_t out_features) { return {LayerKind::Linear, out_features, 0}; }
  static LayerSpec roipool(std::size_t size) { return {LayerKind::RoiPool, 0, size}; }
  static LayerSpec softmax() { return {LayerKind::Softmax, 0, 0}; }

  bool has_params() const { return kind == LayerKind::Conv3 || kind == LayerKind::Linear; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Shape input_shape;  // C x H x W
  std::vector<LayerSpec> layers;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Output shape of every layer (index i is the output of layers[i]); throws
/// ShapeError when the layer list cannot consume the input shape.
std::vector<Shape> propagate_shapes(const NetworkSpec& spec);
Shape output_shape(const NetworkSpec& spec);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

std::size_t param_count(const NetworkSpec& spec);
/// Bytes of 32-bit parameters.
std::uint64_t param_memory(const NetworkSpec& spec);
/// Multiply-accumulate counts as two operations; pooling, relu, softmax and
/// roipool count one per element they read.
std::uint64_t flop_count(const NetworkSpec& spec, const Shape& input_shape);
std::uint64_t flop_count(const NetworkSpec& spec);

template <typename T>
struct LayerParams {
  BasicTensor<T> kernel;  // conv: Cout x Cin x 3 x 3, linear: out x in
  BasicTensor<T> bias;
  bool empty() const { return kernel.empty(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename T>
class BasicNetwork {
 public:
  BasicNetwork() = default;
  /// He-style uniform initialization scaled by fan-in, zero biases.
  BasicNetwork(NetworkSpec spec, std::uint64_t rng_seed);
  BasicNetwork(NetworkSpec spec, std::uint64_t rng_seed, std::vector<LayerParams<T>> params);

  const NetworkSpec& spec() const { return spec_; }
  std::uint64_t rng_seed() const { return rng_seed_; }
  const std::vector<LayerParams<T>>& params() const { return params_; }
  /// Mutable access bumps the version, invalidating outstanding activations.
  std::vector<LayerParams<T>>& mutable_params() {
    ++version_;
    return params_;
  }
  std::uint64_t version() const { return version_; }

  template <typename U>
  BasicNetwork<U> cast() const;

 private:
  NetworkSpec spec_;
  std::uint64_t rng_seed_ = 0;
  std::vector<LayerParams<T>> params_;
  std::uint64_t version_ = 0;
};

using Network = BasicNetwork<float>;
using Network64 = BasicNetwork<double>;

template <typename T>
struct Activations {
  /// outputs[0] is the (batched) input, outputs[i + 1] the output of layer i.
  std::vector<BasicTensor<T>> outputs;
  std::vector<std::vector<std::uint32_t>> argmax;
  std::size_t batch = 0;
  bool batched = false;
  const BasicNetwork<T>* owner = nullptr;
  std::uint64_t owner_version = 0;

  /// Output of layer `index`; always carries the batch axis.
  const BasicTensor<T>& layer_output(std::size_t index) const { return outputs.at(index + 1); }
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> output;
  Activations<T> activations;
};

template <typename T>
using Gradients = std::vector<LayerParams<T>>;

/// Accepts either exactly spec.input_shape or a batch N x input_shape.
template <typename T>
ForwardResult<T> forward(const BasicNetwork<T>& net, const BasicTensor<T>& input);

/// Runs layers [0, layer_count) only; the output is that prefix's last
/// activation (batched if the input was).
template <typename T>
ForwardResult<T> forward_prefix(const BasicNetwork<T>& net, const BasicTensor<T>& input,
                                std::size_t layer_count);

/// loss_grad is dL/d(output) with the output's shape.
template <typename T>
Gradients<T> backward(const BasicNetwork<T>& net, const Activations<T>& acts,
                      const BasicTensor<T>& loss_grad);

/// For networks ending in softmax: grad is dL/d(logits), i.e. w.r.t. the
/// softmax input. Avoids dividing by tiny probabilities.
template <typename T>
Gradients<T> backward_from_logits(const BasicNetwork<T>& net, const Activations<T>& acts,
                                  const BasicTensor<T>& logits_grad);

/// Index of the first linear layer; the activations feeding it are the
/// network's final feature map (its "trunk" output).
std::size_t trunk_length(const NetworkSpec& spec);
Shape trunk_output_shape(const NetworkSpec& spec);

// Losses.

inline constexpr double kCrossEntropyFloor = 1e-12;

double cross_entropy(std::span<const float> probs, std::size_t label);
double cross_entropy(std::span<const double> probs, std::size_t label);

using Box4 = std::array<double, 4>;
double smooth_l1(const Box4& pred, const Box4& target);
Box4 smooth_l1_grad(const Box4& pred, const Box4& target);

// Optimization.

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t epochs = 20;
  double initial_lr = 0.004;
  double lr_drop_factor = 10.0;
  std::size_t lr_drop_period_epochs = 8;
};

double learning_rate(std::size_t epoch, const TrainConfig& cfg);

template <typename T>
void apply_sgd(BasicNetwork<T>& net, const Gradients<T>& grads, std::size_t epoch,
               const TrainConfig& cfg);

template <typename T>
BasicNetwork<T> sgd_update(BasicNetwork<T> net, const Gradients<T>& grads, std::size_t epoch,
                           const TrainConfig& cfg) {
  apply_sgd(net, grads, epoch, cfg);
  return net;
}

template <typename T>
void accumulate(Gradients<T>& into, const Gradients<T>& from, T scale = T{1});
template <typename T>
Gradients<T> zero_gradients(const BasicNetwork<T>& net);

/// Max relative error between analytic and central-difference gradients over
/// sampled weights, in 64-bit arithmetic. Weights whose perturbation flips a
/// relu or pooling decision are skipped.
double gradient_check(const NetworkSpec& spec, std::uint64_t seed, double perturbation = 1e-5,
                      std::size_t samples_per_layer = 24);

/// Same check on a given network and input. For softmax-terminated networks the
/// loss is cross-entropy against `label`; otherwise a fixed weighted sum of the
/// outputs.
double gradient_check(const Network64& net, const Tensor64& input, std::size_t label,
                      std::uint64_t seed, double perturbation = 1e-5,
                      std::size_t samples_per_layer = 24);

}  // namespace hcount
