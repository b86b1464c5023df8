#include "braintorrent/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "braintorrent/bytes.hpp"
#include "braintorrent/errors.hpp"
#include "braintorrent/rng.hpp"

namespace bt {

void ModelSpec::validate() const {
  if (input_dim == 0) throw InvalidArgument("model spec: input_dim must be >= 1");
  if (num_classes < 2) throw InvalidArgument("model spec: num_classes must be >= 2");
  for (auto h : hidden_dims) {
    if (h == 0) throw InvalidArgument("model spec: hidden layer width must be >= 1");
  }
}

std::vector<std::size_t> ModelSpec::layer_dims() const {
  std::vector<std::size_t> dims;
  dims.reserve(hidden_dims.size() + 2);
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
  dims.push_back(num_classes);
  return dims;
}

std::size_t ModelSpec::parameter_count() const {
  const auto dims = layer_dims();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) n += (dims[l] + 1) * dims[l + 1];
  return n;
}

std::uint64_t ModelSpec::fingerprint() const {
  // FNV-1a over the layer dimensions and activation.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  };
  const auto dims = layer_dims();
  mix(dims.size());
  for (auto d : dims) mix(d);
  mix(static_cast<std::uint64_t>(activation));
  return h;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) noexcept {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

bool bitwise_equal(const ModelWeights& a, const ModelWeights& b) noexcept {
  return a.spec_fingerprint == b.spec_fingerprint && bitwise_equal(std::span{a.params}, std::span{b.params});
}

namespace {

struct LayerView {
  std::size_t in;
  std::size_t out;
  std::size_t offset;  // start of the weight matrix; bias follows at offset + in*out
};

std::vector<LayerView> layers_of(const ModelSpec& spec) {
  const auto dims = spec.layer_dims();
  std::vector<LayerView> layers;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    layers.push_back({dims[l], dims[l + 1], offset});
    offset += (dims[l] + 1) * dims[l + 1];
  }
  return layers;
}

// out[r, o] = b[o] + sum_i in[r, i] * W[o, i]
void affine(const LayerView& layer, std::span<const double> params, const Matrix& in, Matrix& out) {
  out = Matrix(in.rows, layer.out);
  const double* weights = params.data() + layer.offset;
  const double* bias = weights + layer.in * layer.out;
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* x = in.data.data() + r * in.cols;
    double* y = out.data.data() + r * out.cols;
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* wrow = weights + o * layer.in;
      double acc = bias[o];
      for (std::size_t i = 0; i < layer.in; ++i) acc += x[i] * wrow[i];
      y[o] = acc;
    }
  }
}

void relu_inplace(Matrix& m) {
  for (auto& v : m.data) v = v > 0.0 ? v : 0.0;
}

}  // namespace

void check_compatible(const ModelSpec& spec, const ModelWeights& w) {
  if (w.spec_fingerprint != spec.fingerprint()) throw ShapeError("weights were built for a different model spec");
  if (w.params.size() != spec.parameter_count()) {
    throw ShapeError("weights hold " + std::to_string(w.params.size()) + " params, spec needs " +
                     std::to_string(spec.parameter_count()));
  }
}

ModelWeights init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelWeights w = zero_model(spec);
  Rng rng(derive_seed(seed, 0x1A17));
  for (const auto& layer : layers_of(spec)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    for (std::size_t k = 0; k < layer.in * layer.out; ++k) {
      w.params[layer.offset + k] = rng.uniform(-bound, bound);
    }
  }
  return w;
}

ModelWeights zero_model(const ModelSpec& spec) {
  spec.validate();
  return {spec.fingerprint(), std::vector<double>(spec.parameter_count(), 0.0)};
}

Matrix forward(const ModelSpec& spec, const ModelWeights& w, const Matrix& pixels) {
  check_compatible(spec, w);
  if (pixels.cols != spec.input_dim) {
    throw ShapeError("forward: input has " + std::to_string(pixels.cols) + " features, spec expects " +
                     std::to_string(spec.input_dim));
  }
  const auto layers = layers_of(spec);
  Matrix current = pixels;
  Matrix next;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    affine(layers[l], w.params, current, next);
    if (l + 1 < layers.size()) relu_inplace(next);
    std::swap(current, next);
  }
  return current;
}

LossGrad loss_and_grad(const ModelSpec& spec, const ModelWeights& w, const Batch& batch) {
  check_compatible(spec, w);
  const std::size_t n = batch.labels.size();
  if (n == 0) throw InvalidArgument("loss_and_grad: empty batch");
  if (batch.pixels.rows != n) throw ShapeError("loss_and_grad: pixel rows and label count differ");
  if (batch.pixels.cols != spec.input_dim) throw ShapeError("loss_and_grad: feature width mismatch");
  for (auto y : batch.labels) {
    if (y >= spec.num_classes) throw InvalidArgument("loss_and_grad: label out of range");
  }

  const auto layers = layers_of(spec);
  const std::size_t depth = layers.size();

  // activations[l] is the input to layer l; activations[depth] holds logits.
  std::vector<Matrix> activations(depth + 1);
  activations[0] = batch.pixels;
  for (std::size_t l = 0; l < depth; ++l) {
    affine(layers[l], w.params, activations[l], activations[l + 1]);
    if (l + 1 < depth) relu_inplace(activations[l + 1]);
  }

  // Softmax cross-entropy; delta becomes dL/dlogits.
  Matrix delta = activations[depth];
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto z = delta.row(r);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) {
      v = std::exp(v - zmax);
      sum += v;
    }
    const double log_sum = std::log(sum) + zmax;
    loss += log_sum - activations[depth](r, batch.labels[r]);
    for (double& v : z) v = v / sum * inv_n;
    z[batch.labels[r]] -= inv_n;
  }
  loss *= inv_n;

  LossGrad out{loss, std::vector<double>(w.params.size(), 0.0)};
  for (std::size_t l = depth; l-- > 0;) {
    const auto& layer = layers[l];
    const Matrix& input = activations[l];
    double* gw = out.grad.data() + layer.offset;
    double* gb = gw + layer.in * layer.out;
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.data.data() + r * layer.out;
      const double* x = input.data.data() + r * layer.in;
      for (std::size_t o = 0; o < layer.out; ++o) {
        gb[o] += d[o];
        double* grow = gw + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) grow[i] += d[o] * x[i];
      }
    }
    if (l == 0) break;

    Matrix prev(n, layer.in);
    const double* weights = w.params.data() + layer.offset;
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.data.data() + r * layer.out;
      double* p = prev.data.data() + r * layer.in;
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double* wrow = weights + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) p[i] += d[o] * wrow[i];
      }
      // ReLU derivative: the post-activation value is positive iff the unit was active.
      const double* a = input.data.data() + r * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) {
        if (!(a[i] > 0.0)) p[i] = 0.0;
      }
    }
    delta = std::move(prev);
  }
  return out;
}

void adam_update(std::span<double> params, std::span<const double> grad, OptimizerState& st, double lr,
                 const AdamParams& hp) {
  if (!(lr > 0.0)) throw InvalidArgument("adam: learning rate must be > 0");
  if (grad.size() != params.size() || st.first_moment.size() != params.size() ||
      st.second_moment.size() != params.size()) {
    throw InvalidArgument("adam: gradient, params and optimizer state lengths differ");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw InvalidArgument("adam: non-finite gradient");
  }
  st.step_count += 1;
  const double t = static_cast<double>(st.step_count);
  const double correction1 = 1.0 - std::pow(hp.beta1, t);
  const double correction2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grad[k];
    st.first_moment[k] = hp.beta1 * st.first_moment[k] + (1.0 - hp.beta1) * g;
    st.second_moment[k] = hp.beta2 * st.second_moment[k] + (1.0 - hp.beta2) * g * g;
    const double m_hat = st.first_moment[k] / correction1;
    const double v_hat = st.second_moment[k] / correction2;
    params[k] -= lr * m_hat / (std::sqrt(v_hat) + hp.epsilon);
  }
}

std::pair<ModelWeights, OptimizerState> adam_step(const ModelWeights& w, std::span<const double> grad,
                                                  const OptimizerState& st, double lr, const AdamParams& hp) {
  auto result = std::make_pair(w, st);
  adam_update(result.first.params, grad, result.second, lr, hp);
  return result;
}

namespace {
constexpr std::string_view kWeightsMagic = "BTWT";
constexpr std::uint8_t kWeightsVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w) {
  std::vector<std::uint8_t> out;
  ByteWriter wr(out);
  wr.raw(kWeightsMagic);
  wr.u8(kWeightsVersion);
  wr.u64(w.spec_fingerprint);
  wr.u32(static_cast<std::uint32_t>(w.params.size()));
  for (double p : w.params) wr.f64(p);
  return out;
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != kWeightsMagic) throw InvalidArgument("weights file: bad magic");
  if (r.u8() != kWeightsVersion) throw InvalidArgument("weights file: unsupported version");
  ModelWeights w;
  w.spec_fingerprint = r.u64();
  const std::size_t n = r.u32();
  r.require(8 * n);
  w.params.resize(n);
  for (double& p : w.params) p = r.f64();
  if (r.remaining() != 0) throw InvalidArgument("weights file: trailing bytes");
  return w;
}

void write_weights(const std::filesystem::path& path, const ModelWeights& w) {
  const auto bytes = serialize_weights(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

ModelWeights read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace bt
