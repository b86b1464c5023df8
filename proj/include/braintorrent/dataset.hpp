#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "braintorrent/model.hpp"

namespace bt {

/// Channels per pixel: noisy intensity, x and y in [-1, 1], and a pure-noise channel.
inline constexpr std::size_t kFeatureChannels = 4;

struct SegImage {
  std::uint32_t id = 0;  // position in generation order, unique per dataset
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = kFeatureChannels;
  double cohort = 0.0;           // age proxy in [0, 100]
  std::vector<double> features;  // (height*width) x channels, row-major
  std::vector<Label> labels;     // height*width

  std::size_t pixel_count() const noexcept { return height * width; }
  std::span<const double> pixel(std::size_t p) const { return {features.data() + p * channels, channels}; }

  bool operator==(const SegImage&) const = default;
};

/// One client's local data D_i; its size is the sample count a_i.
struct DatasetShard {
  std::size_t client_index = 0;
  std::vector<SegImage> images;

  std::size_t sample_count() const noexcept { return images.size(); }
};

/// Draw training cohorts so each bucket receives exactly `counts[k]` images.
/// Buckets are [0, b0], (b0, b1], ..., (b_last, 100].
struct CohortTargets {
  std::vector<double> boundaries;
  std::vector<std::size_t> counts;
};

struct GenConfig {
  std::size_t num_train = 20;
  std::size_t num_test = 10;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;
  double noise_std = 0.08;
  double cohort_shift = 1.0;  // 0 disables cohort-dependent anatomy; 1 is full shift
  std::uint64_t seed = 0;
  std::optional<CohortTargets> train_cohorts;

  void validate() const;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<SegImage> train;
  std::vector<SegImage> test;

  bool operator==(const Dataset&) const = default;
};

/// Nested elliptical regions whose radii, aspect and intensities drift with
/// cohort. Label = region index (0 = background). Deterministic in cfg.
Dataset generate_dataset(const GenConfig& cfg);

/// Intensity of region `label` for a noiseless image of the given cohort.
double region_intensity(std::size_t label, std::size_t num_classes, double cohort, double cohort_shift);

/// Seeded permutation dealt into n_clients shards whose sizes differ by at
/// most one; the larger shards go to the lowest client indices.
std::vector<DatasetShard> split_uniform(std::span<const SegImage> train, std::size_t n_clients, std::uint64_t seed);

/// Bucket index of `cohort` under the boundary convention of CohortTargets.
std::size_t cohort_bucket(double cohort, std::span<const double> boundaries);

/// Shard k holds exactly the images whose cohort falls in bucket k, in input
/// order. Throws InvalidArgument on an empty bucket, on unsorted boundaries, or
/// when `expected_counts` is given and does not match.
std::vector<DatasetShard> split_by_cohort(std::span<const SegImage> train, std::span<const double> boundaries,
                                          std::optional<std::span<const std::size_t>> expected_counts = {});

/// Generates with cohort targets and retries with seed+1 until the cohort
/// split reproduces `targets.counts`. Returns the dataset and the seed used.
std::pair<Dataset, std::uint64_t> generate_for_cohort_split(GenConfig cfg, const CohortTargets& targets,
                                                            int max_retries = 16);

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);

void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

/// Pools every shard's images into a single shard (index 0).
DatasetShard pool_shards(std::span<const DatasetShard> shards);

}  // namespace bt
