#include "hcount/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "hcount/kernels.hpp"
#include "hcount/rng.hpp"

namespace hcount {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3: return "conv3";
    case LayerKind::MaxPool2: return "maxpool2x2";
    case LayerKind::Relu: return "relu";
    case LayerKind::Linear: return "linear";
    case LayerKind::RoiPool: return "roipool";
    case LayerKind::Softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv3, LayerKind::MaxPool2, LayerKind::Relu, LayerKind::Linear,
                      LayerKind::RoiPool, LayerKind::Softmax}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

namespace {

Shape next_shape(const Shape& in, const LayerSpec& layer, std::size_t index) {
  auto fail = [&](const std::string& why) {
    throw ShapeError("layer " + std::to_string(index) + " (" + to_string(layer.kind) +
                     ") cannot consume " + shape_to_string(in) + ": " + why);
  };
  switch (layer.kind) {
    case LayerKind::Conv3:
      if (in.size() != 3) fail("needs C x H x W");
      if (layer.units == 0) fail("out_channels must be positive");
      return {layer.units, in[1], in[2]};
    case LayerKind::MaxPool2:
      if (in.size() != 3) fail("needs C x H x W");
      if (in[1] < 2 || in[2] < 2) fail("spatial extent below 2");
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::Relu:
      return in;
    case LayerKind::Linear:
      if (layer.units == 0) fail("out_features must be positive");
      return {layer.units};
    case LayerKind::RoiPool:
      if (in.size() != 3) fail("needs C x H x W");
      if (layer.pool_size == 0) fail("pool size must be positive");
      return {in[0], layer.pool_size, layer.pool_size};
    case LayerKind::Softmax:
      if (in.size() != 1) fail("needs a vector");
      return in;
  }
  fail("unknown kind");
  return {};
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

std::vector<Shape> propagate_shapes(const NetworkSpec& spec) {
  if (spec.input_shape.size() != 3) {
    throw ShapeError("network input must be C x H x W, got " + shape_to_string(spec.input_shape));
  }
  for (std::size_t e : spec.input_shape) {
    if (e == 0) throw ShapeError("network input extents must be positive");
  }
  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    cur = next_shape(cur, spec.layers[i], i);
    shapes.push_back(cur);
  }
  return shapes;
}

Shape output_shape(const NetworkSpec& spec) {
  auto shapes = propagate_shapes(spec);
  return shapes.empty() ? spec.input_shape : shapes.back();
}

std::string spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["input_shape"] = spec.input_shape;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json lj{{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::Conv3 || l.kind == LayerKind::Linear) lj["units"] = l.units;
    if (l.kind == LayerKind::RoiPool) lj["pool_size"] = l.pool_size;
    j["layers"].push_back(lj);
  }
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  NetworkSpec spec;
  spec.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
    l.units = lj.value("units", std::size_t{0});
    l.pool_size = lj.value("pool_size", std::size_t{0});
    spec.layers.push_back(l);
  }
  propagate_shapes(spec);
  return spec;
}

std::size_t param_count(const NetworkSpec& spec) {
  if (spec.layers.empty()) return 0;
  const auto shapes = propagate_shapes(spec);
  std::size_t total = 0;
  Shape in = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::Conv3) total += (9 * in[0] + 1) * l.units;
    if (l.kind == LayerKind::Linear) total += (shape_volume(in) + 1) * l.units;
    in = shapes[i];
  }
  return total;
}

std::uint64_t param_memory(const NetworkSpec& spec) { return 4ULL * param_count(spec); }

std::uint64_t flop_count(const NetworkSpec& spec, const Shape& input_shape) {
  if (spec.layers.empty()) return 0;
  NetworkSpec resized = spec;
  resized.input_shape = input_shape;
  const auto shapes = propagate_shapes(resized);
  std::uint64_t total = 0;
  Shape in = input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Shape& out = shapes[i];
    switch (l.kind) {
      case LayerKind::Conv3:
        total += 2ULL * 9 * in[0] * out[0] * out[1] * out[2];
        break;
      case LayerKind::Linear:
        total += 2ULL * shape_volume(in) * l.units;
        break;
      case LayerKind::MaxPool2:
      case LayerKind::Relu:
      case LayerKind::RoiPool:
      case LayerKind::Softmax:
        total += shape_volume(in);
        break;
    }
    in = out;
  }
  return total;
}

std::uint64_t flop_count(const NetworkSpec& spec) { return flop_count(spec, spec.input_shape); }

std::size_t trunk_length(const NetworkSpec& spec) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::Linear) return i;
  }
  throw ShapeError("network has no linear layer");
}

Shape trunk_output_shape(const NetworkSpec& spec) {
  const std::size_t n = trunk_length(spec);
  if (n == 0) return spec.input_shape;
  return propagate_shapes(spec)[n - 1];
}

// BasicNetwork

template <typename T>
BasicNetwork<T>::BasicNetwork(NetworkSpec spec, std::uint64_t rng_seed)
    : spec_(std::move(spec)), rng_seed_(rng_seed) {
  const auto shapes = propagate_shapes(spec_);
  Rng rng(rng_seed);
  Shape in = spec_.input_shape;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    LayerParams<T> p;
    if (l.has_params()) {
      const std::size_t fan_in = l.kind == LayerKind::Conv3 ? 9 * in[0] : shape_volume(in);
      const Shape kshape = l.kind == LayerKind::Conv3 ? Shape{l.units, in[0], 3, 3}
                                                      : Shape{l.units, shape_volume(in)};
      p.kernel = BasicTensor<T>(kshape);
      p.bias = BasicTensor<T>({l.units});
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& w : p.kernel.values()) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    params_.push_back(std::move(p));
    in = shapes[i];
  }
}

template <typename T>
BasicNetwork<T>::BasicNetwork(NetworkSpec spec, std::uint64_t rng_seed,
                              std::vector<LayerParams<T>> params)
    : spec_(std::move(spec)), rng_seed_(rng_seed), params_(std::move(params)) {
  const auto shapes = propagate_shapes(spec_);
  if (params_.size() != spec_.layers.size()) {
    throw ShapeError("parameter list has " + std::to_string(params_.size()) + " layers, spec has " +
                     std::to_string(spec_.layers.size()));
  }
  Shape in = spec_.input_shape;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    if (l.has_params()) {
      const Shape kshape = l.kind == LayerKind::Conv3 ? Shape{l.units, in[0], 3, 3}
                                                      : Shape{l.units, shape_volume(in)};
      if (params_[i].kernel.shape() != kshape || params_[i].bias.shape() != Shape{l.units}) {
        throw ShapeError("weights of layer " + std::to_string(i) + " do not match the spec");
      }
    } else if (!params_[i].empty()) {
      throw ShapeError("layer " + std::to_string(i) + " takes no weights");
    }
    in = shapes[i];
  }
}

template <typename T>
template <typename U>
BasicNetwork<U> BasicNetwork<T>::cast() const {
  std::vector<LayerParams<U>> out;
  for (const auto& p : params_) {
    LayerParams<U> q;
    if (!p.empty()) {
      q.kernel = p.kernel.template cast<U>();
      q.bias = p.bias.template cast<U>();
    }
    out.push_back(std::move(q));
  }
  return BasicNetwork<U>(spec_, rng_seed_, std::move(out));
}

// Forward / backward

namespace {

template <typename T>
std::size_t batch_of(const NetworkSpec& spec, const BasicTensor<T>& input, bool& is_batched) {
  if (input.shape() == spec.input_shape) {
    is_batched = false;
    return 1;
  }
  const auto& s = input.shape();
  if (s.size() == spec.input_shape.size() + 1 &&
      std::equal(spec.input_shape.begin(), spec.input_shape.end(), s.begin() + 1)) {
    is_batched = true;
    return s[0];
  }
  throw ShapeError("input shape " + shape_to_string(s) + " does not match network input " +
                   shape_to_string(spec.input_shape));
}

template <typename T>
void softmax_rows(std::span<const T> in, std::span<T> out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = in.data() + r * cols;
    T* y = out.data() + r * cols;
    const T m = *std::max_element(x, x + cols);
    T sum = 0;
    for (std::size_t i = 0; i < cols; ++i) {
      y[i] = std::exp(x[i] - m);
      sum += y[i];
    }
    for (std::size_t i = 0; i < cols; ++i) y[i] /= sum;
  }
}

}  // namespace

template <typename T>
ForwardResult<T> forward_prefix(const BasicNetwork<T>& net, const BasicTensor<T>& input,
                                std::size_t layer_count) {
  const auto& spec = net.spec();
  if (layer_count > spec.layers.size()) throw std::out_of_range("prefix longer than network");
  bool is_batched = false;
  const std::size_t n = batch_of(spec, input, is_batched);
  const auto shapes = propagate_shapes(spec);

  ForwardResult<T> result;
  Activations<T>& acts = result.activations;
  acts.batch = n;
  acts.batched = is_batched;
  acts.owner = &net;
  acts.owner_version = net.version();
  acts.argmax.resize(layer_count);
  acts.outputs.reserve(layer_count + 1);
  BasicTensor<T> first = input;
  first.reshape(batched(n, spec.input_shape));
  acts.outputs.push_back(std::move(first));

  Shape in = spec.input_shape;
  for (std::size_t i = 0; i < layer_count; ++i) {
    const auto& l = spec.layers[i];
    const auto& x = acts.outputs.back();
    BasicTensor<T> y(batched(n, shapes[i]));
    switch (l.kind) {
      case LayerKind::Conv3: {
        kernels::ConvGeometry g{n, in[0], in[1], in[2], l.units};
        kernels::conv3x3_forward<T>(g, x.values(), net.params()[i].kernel.values(),
                                    net.params()[i].bias.values(), y.values());
        break;
      }
      case LayerKind::MaxPool2: {
        kernels::PoolGeometry g{n, in[0], in[1], in[2]};
        acts.argmax[i].resize(y.size());
        kernels::maxpool2x2_forward<T>(g, x.values(), y.values(), acts.argmax[i]);
        break;
      }
      case LayerKind::Relu:
        std::transform(x.values().begin(), x.values().end(), y.values().begin(),
                       [](T v) { return v > T{0} ? v : T{0}; });
        break;
      case LayerKind::Linear: {
        kernels::LinearGeometry g{n, shape_volume(in), l.units};
        kernels::linear_forward<T>(g, x.values(), net.params()[i].kernel.values(),
                                   net.params()[i].bias.values(), y.values());
        break;
      }
      case LayerKind::RoiPool: {
        acts.argmax[i].resize(y.size());
        const std::size_t in_plane = shape_volume(in);
        const std::size_t out_plane = shape_volume(shapes[i]);
        const kernels::RoiWindow whole{0, 0, static_cast<double>(in[2]), static_cast<double>(in[1])};
        for (std::size_t s = 0; s < n; ++s) {
          auto arg = std::span<std::uint32_t>(acts.argmax[i]).subspan(s * out_plane, out_plane);
          kernels::roi_max_pool<T>(in[0], in[1], in[2], x.values().subspan(s * in_plane, in_plane),
                                   whole, l.pool_size, y.values().subspan(s * out_plane, out_plane),
                                   arg);
          for (auto& a : arg) a += static_cast<std::uint32_t>(s * in_plane);
        }
        break;
      }
      case LayerKind::Softmax:
        softmax_rows<T>(x.values(), y.values(), n, in[0]);
        break;
    }
    acts.outputs.push_back(std::move(y));
    in = shapes[i];
  }
  result.output = acts.outputs.back();
  if (!is_batched) result.output.reshape(layer_count == 0 ? spec.input_shape : shapes[layer_count - 1]);
  return result;
}

template <typename T>
ForwardResult<T> forward(const BasicNetwork<T>& net, const BasicTensor<T>& input) {
  return forward_prefix(net, input, net.spec().layers.size());
}

namespace {

template <typename T>
Gradients<T> backward_from(const BasicNetwork<T>& net, const Activations<T>& acts,
                           const BasicTensor<T>& top_grad, std::size_t top) {
  const auto& spec = net.spec();
  if (acts.owner != &net || acts.owner_version != net.version()) {
    throw StaleActivationsError("activations were not produced by this network state");
  }
  if (acts.outputs.size() != spec.layers.size() + 1) {
    throw StaleActivationsError("activations are incomplete (prefix forward?)");
  }
  if (top_grad.size() != acts.outputs[top].size()) {
    throw ShapeError("loss gradient shape " + shape_to_string(top_grad.shape()) +
                     " does not match " + shape_to_string(acts.outputs[top].shape()));
  }
  const std::size_t n = acts.batch;
  const auto shapes = propagate_shapes(spec);
  Gradients<T> grads = zero_gradients(net);

  BasicTensor<T> grad = top_grad;
  grad.reshape(acts.outputs[top].shape());
  for (std::size_t idx = top; idx-- > 0;) {
    const auto& l = spec.layers[idx];
    const Shape in = idx == 0 ? spec.input_shape : shapes[idx - 1];
    const auto& x = acts.outputs[idx];
    const bool need_input_grad = idx > 0;
    BasicTensor<T> gin(x.shape());
    switch (l.kind) {
      case LayerKind::Conv3: {
        kernels::ConvGeometry g{n, in[0], in[1], in[2], l.units};
        kernels::conv3x3_backward<T>(g, x.values(), net.params()[idx].kernel.values(),
                                     grad.values(),
                                     need_input_grad ? gin.values() : std::span<T>{},
                                     grads[idx].kernel.values(), grads[idx].bias.values());
        break;
      }
      case LayerKind::MaxPool2:
      case LayerKind::RoiPool: {
        std::fill(gin.values().begin(), gin.values().end(), T{0});
        const auto& arg = acts.argmax[idx];
        for (std::size_t i = 0; i < grad.size(); ++i) gin[arg[i]] += grad[i];
        break;
      }
      case LayerKind::Relu: {
        const auto& y = acts.outputs[idx + 1];
        for (std::size_t i = 0; i < grad.size(); ++i) gin[i] = y[i] > T{0} ? grad[i] : T{0};
        break;
      }
      case LayerKind::Linear: {
        kernels::LinearGeometry g{n, shape_volume(in), l.units};
        kernels::linear_backward<T>(g, x.values(), net.params()[idx].kernel.values(),
                                    grad.values(),
                                    need_input_grad ? gin.values() : std::span<T>{},
                                    grads[idx].kernel.values(), grads[idx].bias.values());
        break;
      }
      case LayerKind::Softmax: {
        const auto& p = acts.outputs[idx + 1];
        const std::size_t k = in[0];
        for (std::size_t r = 0; r < n; ++r) {
          T dot = 0;
          for (std::size_t i = 0; i < k; ++i) dot += grad[r * k + i] * p[r * k + i];
          for (std::size_t i = 0; i < k; ++i) gin[r * k + i] = p[r * k + i] * (grad[r * k + i] - dot);
        }
        break;
      }
    }
    if (!need_input_grad) break;
    grad = std::move(gin);
  }
  return grads;
}

}  // namespace

template <typename T>
Gradients<T> backward(const BasicNetwork<T>& net, const Activations<T>& acts,
                      const BasicTensor<T>& loss_grad) {
  return backward_from(net, acts, loss_grad, net.spec().layers.size());
}

template <typename T>
Gradients<T> backward_from_logits(const BasicNetwork<T>& net, const Activations<T>& acts,
                                  const BasicTensor<T>& logits_grad) {
  const auto& layers = net.spec().layers;
  if (layers.empty() || layers.back().kind != LayerKind::Softmax) {
    throw ShapeError("backward_from_logits needs a softmax-terminated network");
  }
  return backward_from(net, acts, logits_grad, layers.size() - 1);
}

template <typename T>
Gradients<T> zero_gradients(const BasicNetwork<T>& net) {
  Gradients<T> grads;
  for (const auto& p : net.params()) {
    LayerParams<T> g;
    if (!p.empty()) {
      g.kernel = BasicTensor<T>(p.kernel.shape());
      g.bias = BasicTensor<T>(p.bias.shape());
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
void accumulate(Gradients<T>& into, const Gradients<T>& from, T scale) {
  for (std::size_t i = 0; i < into.size(); ++i) {
    if (into[i].empty()) continue;
    for (std::size_t j = 0; j < into[i].kernel.size(); ++j) into[i].kernel[j] += scale * from[i].kernel[j];
    for (std::size_t j = 0; j < into[i].bias.size(); ++j) into[i].bias[j] += scale * from[i].bias[j];
  }
}

// Losses

namespace {

template <typename T>
double cross_entropy_impl(std::span<const T> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside " +
                            std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(static_cast<double>(probs[label]), kCrossEntropyFloor));
}

}  // namespace

double cross_entropy(std::span<const float> probs, std::size_t label) {
  return cross_entropy_impl(probs, label);
}
double cross_entropy(std::span<const double> probs, std::size_t label) {
  return cross_entropy_impl(probs, label);
}

double smooth_l1(const Box4& pred, const Box4& target) {
  double loss = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double d = std::abs(pred[i] - target[i]);
    loss += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return loss;
}

Box4 smooth_l1_grad(const Box4& pred, const Box4& target) {
  Box4 g{};
  for (std::size_t i = 0; i < 4; ++i) {
    const double d = pred[i] - target[i];
    g[i] = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
  }
  return g;
}

// Optimization

double learning_rate(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.lr_drop_period_epochs == 0) return cfg.initial_lr;
  const auto drops = static_cast<double>(epoch / cfg.lr_drop_period_epochs);
  return cfg.initial_lr * std::pow(cfg.lr_drop_factor, -drops);
}

template <typename T>
void apply_sgd(BasicNetwork<T>& net, const Gradients<T>& grads, std::size_t epoch,
               const TrainConfig& cfg) {
  if (grads.size() != net.params().size()) throw ShapeError("gradient list does not match network");
  const T lr = static_cast<T>(learning_rate(epoch, cfg));
  auto& params = net.mutable_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].empty()) continue;
    if (grads[i].kernel.shape() != params[i].kernel.shape() ||
        grads[i].bias.shape() != params[i].bias.shape()) {
      throw ShapeError("gradient of layer " + std::to_string(i) + " does not match its weights");
    }
    for (std::size_t j = 0; j < params[i].kernel.size(); ++j) params[i].kernel[j] -= lr * grads[i].kernel[j];
    for (std::size_t j = 0; j < params[i].bias.size(); ++j) params[i].bias[j] -= lr * grads[i].bias[j];
  }
}

// Gradient check

namespace {

struct Decisions {
  std::vector<bool> relu;
  std::vector<std::vector<std::uint32_t>> argmax;
  bool operator==(const Decisions&) const = default;
};

struct Probe {
  double loss = 0;
  Decisions decisions;
};

Probe probe(const Network64& net, const Tensor64& input, std::size_t label,
            const std::vector<double>& coeffs) {
  auto fr = forward(net, input);
  Probe p;
  const auto& layers = net.spec().layers;
  if (!layers.empty() && layers.back().kind == LayerKind::Softmax) {
    p.loss = cross_entropy(fr.output.values(), label);
  } else {
    for (std::size_t i = 0; i < fr.output.size(); ++i) p.loss += coeffs[i] * fr.output[i];
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Relu) {
      for (double v : fr.activations.outputs[i].values()) p.decisions.relu.push_back(v > 0);
    }
  }
  p.decisions.argmax = fr.activations.argmax;
  return p;
}

}  // namespace

double gradient_check(const Network64& net_in, const Tensor64& input, std::size_t label,
                      std::uint64_t seed, double perturbation, std::size_t samples_per_layer) {
  Network64 net = net_in;
  const auto& layers = net.spec().layers;
  const bool softmax_loss = !layers.empty() && layers.back().kind == LayerKind::Softmax;
  Rng rng(derive_seed(seed, "gradient-check-samples"));
  std::vector<double> coeffs(shape_volume(output_shape(net.spec())));
  for (auto& c : coeffs) c = rng.normal();

  auto fr = forward(net, input);
  Gradients<double> analytic;
  if (softmax_loss) {
    Tensor64 g = fr.output;
    g[label] -= 1.0;
    analytic = backward_from_logits(net, fr.activations, g);
  } else {
    analytic = backward(net, fr.activations, Tensor64(fr.output.shape(), coeffs));
  }

  double worst = 0.0;
  auto check_entry = [&](std::size_t layer, bool is_bias, std::size_t idx) {
    auto value_of = [&](Network64& n) -> double& {
      auto& p = n.mutable_params()[layer];
      return is_bias ? p.bias[idx] : p.kernel[idx];
    };
    const double original = value_of(net);
    value_of(net) = original + perturbation;
    const Probe plus = probe(net, input, label, coeffs);
    value_of(net) = original - perturbation;
    const Probe minus = probe(net, input, label, coeffs);
    value_of(net) = original;
    if (!(plus.decisions == minus.decisions)) return;
    const double numeric = (plus.loss - minus.loss) / (2.0 * perturbation);
    const auto& g = analytic[layer];
    const double a = is_bias ? g.bias[idx] : g.kernel[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  };

  for (std::size_t layer = 0; layer < layers.size(); ++layer) {
    if (!layers[layer].has_params()) continue;
    const std::size_t nk = net.params()[layer].kernel.size();
    const std::size_t nb = net.params()[layer].bias.size();
    if (nk <= samples_per_layer) {
      for (std::size_t i = 0; i < nk; ++i) check_entry(layer, false, i);
    } else {
      for (std::size_t s = 0; s < samples_per_layer; ++s) check_entry(layer, false, rng.below(nk));
    }
    const std::size_t bias_samples = std::min(nb, std::max<std::size_t>(samples_per_layer / 4, 1));
    for (std::size_t s = 0; s < bias_samples; ++s) {
      check_entry(layer, true, nb <= bias_samples ? s : rng.below(nb));
    }
  }
  return worst;
}

double gradient_check(const NetworkSpec& spec, std::uint64_t seed, double perturbation,
                      std::size_t samples_per_layer) {
  Network64 net(spec, derive_seed(seed, "gradient-check-init"));
  Rng rng(derive_seed(seed, "gradient-check-input"));
  Tensor64 input(spec.input_shape);
  for (auto& v : input.values()) v = rng.normal();
  const Shape out = output_shape(spec);
  const std::size_t label = rng.below(shape_volume(out));
  return gradient_check(net, input, label, seed, perturbation, samples_per_layer);
}

#define HCOUNT_INSTANTIATE(T)                                                                    \
  template class BasicNetwork<T>;                                                               \
  template ForwardResult<T> forward<T>(const BasicNetwork<T>&, const BasicTensor<T>&);          \
  template ForwardResult<T> forward_prefix<T>(const BasicNetwork<T>&, const BasicTensor<T>&,    \
                                              std::size_t);                                     \
  template Gradients<T> backward<T>(const BasicNetwork<T>&, const Activations<T>&,              \
                                    const BasicTensor<T>&);                                     \
  template Gradients<T> backward_from_logits<T>(const BasicNetwork<T>&, const Activations<T>&,  \
                                                const BasicTensor<T>&);                         \
  template Gradients<T> zero_gradients<T>(const BasicNetwork<T>&);                              \
  template void accumulate<T>(Gradients<T>&, const Gradients<T>&, T);                           \
  template void apply_sgd<T>(BasicNetwork<T>&, const Gradients<T>&, std::size_t, const TrainConfig&);

HCOUNT_INSTANTIATE(float)
HCOUNT_INSTANTIATE(double)
#undef HCOUNT_INSTANTIATE

template BasicNetwork<double> BasicNetwork<float>::cast<double>() const;
template BasicNetwork<float> BasicNetwork<double>::cast<float>() const;
template BasicNetwork<float> BasicNetwork<float>::cast<float>() const;

}  // namespace hcount
