#include "braintorrent/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "braintorrent/errors.hpp"
#include "braintorrent/rng.hpp"

namespace bt {

FineTuneResult fine_tune(const ModelSpec& spec, const ModelWeights& w, const DatasetShard& shard,
                         const FineTuneOptions& opts) {
  check_compatible(spec, w);
  if (opts.epochs < 1) throw InvalidArgument("fine_tune: epochs must be >= 1");
  if (opts.batch_size < 1) throw InvalidArgument("fine_tune: batch_size must be >= 1");
  if (shard.images.empty()) throw InvalidArgument("fine_tune: empty shard");

  struct PixelRef {
    std::uint32_t image;
    std::uint32_t pixel;
  };
  std::vector<PixelRef> order;
  for (std::size_t i = 0; i < shard.images.size(); ++i) {
    const auto& img = shard.images[i];
    if (img.channels != spec.input_dim) throw ShapeError("fine_tune: image channels differ from model input_dim");
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
      order.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(p)});
    }
  }
  if (order.empty()) throw InvalidArgument("fine_tune: shard has no pixels");

  FineTuneResult result{w, OptimizerState::zeros(w.params.size())};
  Batch batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span{order});
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t n = std::min(opts.batch_size, order.size() - start);
      batch.pixels = Matrix(n, spec.input_dim);
      batch.labels.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        const auto& ref = order[start + r];
        const auto& img = shard.images[ref.image];
        const auto src = img.pixel(ref.pixel);
        std::copy(src.begin(), src.end(), batch.pixels.row(r).begin());
        batch.labels[r] = img.labels[ref.pixel];
      }
      const auto lg = loss_and_grad(spec, result.weights, batch);
      adam_update(result.weights.params, lg.grad, result.optimizer, opts.lr, opts.adam);
    }
  }
  return result;
}

double lr_schedule(std::uint64_t update_round, double base_lr, std::uint64_t every, double factor) {
  if (!(base_lr > 0.0)) throw InvalidArgument("lr_schedule: base_lr must be > 0");
  if (every == 0) throw InvalidArgument("lr_schedule: decay interval must be >= 1");
  return base_lr * std::pow(factor, static_cast<double>(update_round / every));
}

Batch batch_from_images(std::span<const SegImage> images) {
  std::size_t total = 0;
  std::size_t channels = images.empty() ? 0 : images.front().channels;
  for (const auto& img : images) {
    if (img.channels != channels) throw ShapeError("batch_from_images: mixed channel counts");
    total += img.pixel_count();
  }
  Batch b;
  b.pixels = Matrix(total, channels);
  b.labels.reserve(total);
  std::size_t row = 0;
  for (const auto& img : images) {
    std::copy(img.features.begin(), img.features.end(), b.pixels.data.begin() + static_cast<std::ptrdiff_t>(row * channels));
    b.labels.insert(b.labels.end(), img.labels.begin(), img.labels.end());
    row += img.pixel_count();
  }
  return b;
}

std::vector<Label> predict(const ModelSpec& spec, const ModelWeights& w, const SegImage& image) {
  Matrix pixels(image.pixel_count(), image.channels);
  pixels.data = image.features;
  const Matrix logits = forward(spec, w, pixels);
  std::vector<Label> out(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<Label>(std::distance(row.begin(), std::max_element(row.begin(), row.end())));
  }
  return out;
}

DiceResult dice_score(std::span<const Label> pred, std::span<const Label> truth, std::size_t num_classes) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dice_score: prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                     std::to_string(truth.size()));
  }
  std::vector<std::size_t> pred_count(num_classes, 0), truth_count(num_classes, 0), overlap(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= num_classes || truth[i] >= num_classes) throw InvalidArgument("dice_score: label out of range");
    ++pred_count[pred[i]];
    ++truth_count[truth[i]];
    if (pred[i] == truth[i]) ++overlap[pred[i]];
  }
  DiceResult result;
  result.per_class.resize(num_classes);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t denom = pred_count[c] + truth_count[c];
    if (denom == 0) continue;
    const double d = 2.0 * static_cast<double>(overlap[c]) / static_cast<double>(denom);
    result.per_class[c] = d;
    sum += d;
    ++present;
  }
  if (present == 0) throw InvalidArgument("dice_score: empty label maps");
  result.mean = sum / static_cast<double>(present);
  return result;
}

double evaluate_dice(const ModelSpec& spec, const ModelWeights& w, std::span<const SegImage> images,
                     std::size_t num_classes) {
  if (images.empty()) throw InvalidArgument("evaluate_dice: no images");
  double total = 0.0;
  for (const auto& img : images) total += dice_score(predict(spec, w, img), img.labels, num_classes).mean;
  return total / static_cast<double>(images.size());
}

}  // namespace bt
