#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "braintorrent/dataset.hpp"
#include "braintorrent/model.hpp"

namespace bt {

struct FineTuneOptions {
  int epochs = 2;
  double lr = 1e-3;
  std::size_t batch_size = 8;  // pixels per Adam step
  std::uint64_t seed = 0;
  AdamParams adam{};
};

struct FineTuneResult {
  ModelWeights weights;
  OptimizerState optimizer;  // fresh at the start of every call
};

/// `epochs` passes over every pixel of the shard, reshuffled per epoch from
/// `seed`, one Adam step per mini-batch (the last batch may be short).
FineTuneResult fine_tune(const ModelSpec& spec, const ModelWeights& w, const DatasetShard& shard,
                         const FineTuneOptions& opts);

/// Step-decay schedule: base_lr * factor^floor(update_round / every).
double lr_schedule(std::uint64_t update_round, double base_lr, std::uint64_t every = 4, double factor = 0.5);

/// Stacks all pixels of the given images into one batch.
Batch batch_from_images(std::span<const SegImage> images);

/// Arg-max class per pixel.
std::vector<Label> predict(const ModelSpec& spec, const ModelWeights& w, const SegImage& image);

struct DiceResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from both maps
  double mean = 0.0;                             // over classes with a value
};

/// Per-class Dice 2|P∩T| / (|P|+|T|). Classes absent from both maps are
/// excluded from the mean.
DiceResult dice_score(std::span<const Label> pred, std::span<const Label> truth, std::size_t num_classes);

/// Mean over images of each image's mean Dice.
double evaluate_dice(const ModelSpec& spec, const ModelWeights& w, std::span<const SegImage> images,
                     std::size_t num_classes);

}  // namespace bt
