#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace bt {

enum class Activation { relu };

/// Architecture of the per-pixel classifier: fully connected layers with bias,
/// ReLU between hidden layers and raw logits at the output.
struct ModelSpec {
  std::size_t input_dim = 4;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 4;
  Activation activation = Activation::relu;

  /// Throws InvalidArgument when a dimension is zero or num_classes < 2.
  void validate() const;

  /// input_dim, hidden_dims..., num_classes
  std::vector<std::size_t> layer_dims() const;
  std::size_t parameter_count() const;
  std::uint64_t fingerprint() const;

  bool operator==(const ModelSpec&) const = default;
};

/// Flat parameter vector. Layer l stores its (out x in) weight matrix in
/// row-major order followed by its bias vector; layers are concatenated.
struct ModelWeights {
  std::uint64_t spec_fingerprint = 0;
  std::vector<double> params;

  bool operator==(const ModelWeights&) const = default;
};

/// True when fingerprints match and every parameter has the same bit pattern.
bool bitwise_equal(const ModelWeights& a, const ModelWeights& b) noexcept;
bool bitwise_equal(std::span<const double> a, std::span<const double> b) noexcept;

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;

  static OptimizerState zeros(std::size_t n) {
    return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
  }
  bool operator==(const OptimizerState&) const = default;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

using Label = std::uint32_t;

struct Batch {
  Matrix pixels;              // n_pixels x input_dim
  std::vector<Label> labels;  // n_pixels entries in [0, num_classes)
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Glorot-uniform weights per layer, zero biases. Pure in (spec, seed).
ModelWeights init_model(const ModelSpec& spec, std::uint64_t seed);

/// Zero-filled weights carrying the spec's fingerprint.
ModelWeights zero_model(const ModelSpec& spec);

/// Throws ShapeError if `w` was not built for `spec`.
void check_compatible(const ModelSpec& spec, const ModelWeights& w);

Matrix forward(const ModelSpec& spec, const ModelWeights& w, const Matrix& pixels);

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. params.
LossGrad loss_and_grad(const ModelSpec& spec, const ModelWeights& w, const Batch& batch);

/// One bias-corrected Adam update. Throws InvalidArgument on a non-finite
/// gradient, non-positive lr, or length mismatch.
std::pair<ModelWeights, OptimizerState> adam_step(const ModelWeights& w, std::span<const double> grad,
                                                  const OptimizerState& st, double lr,
                                                  const AdamParams& hp = {});

/// In-place form of adam_step used by the training loop.
void adam_update(std::span<double> params, std::span<const double> grad, OptimizerState& st, double lr,
                 const AdamParams& hp = {});

/// Weights file: "BTWT", u8 version, u64 fingerprint, u32 count, f64[count],
/// all little-endian.
std::vector<std::uint8_t> serialize_weights(const ModelWeights& w);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);
void write_weights(const std::filesystem::path& path, const ModelWeights& w);
ModelWeights read_weights(const std::filesystem::path& path);

}  // namespace bt
