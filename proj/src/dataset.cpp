#include "braintorrent/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "braintorrent/bytes.hpp"
#include "braintorrent/errors.hpp"
#include "braintorrent/rng.hpp"

namespace bt {

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kTestStream = 2;
constexpr std::uint64_t kCohortStream = 3;

constexpr double kOuterRadius = 0.44;
constexpr double kCenterJitter = 0.2;
constexpr double kShrinkWithAge = 0.5;
constexpr double kAspectSwing = 0.25;
constexpr double kIntensityDrift = 0.85;  // fraction of the inter-class spacing; below 0.9 keeps classes separable

void validate_targets(const CohortTargets& t, std::size_t num_train) {
  if (t.counts.size() != t.boundaries.size() + 1) {
    throw InvalidArgument("cohort targets: need exactly one more count than boundaries");
  }
  for (std::size_t k = 0; k < t.boundaries.size(); ++k) {
    if (!(t.boundaries[k] > 0.0 && t.boundaries[k] < 100.0)) {
      throw InvalidArgument("cohort targets: boundaries must lie strictly inside (0, 100)");
    }
    if (k > 0 && !(t.boundaries[k] > t.boundaries[k - 1])) {
      throw InvalidArgument("cohort targets: boundaries must be strictly increasing");
    }
  }
  if (std::accumulate(t.counts.begin(), t.counts.end(), std::size_t{0}) != num_train) {
    throw InvalidArgument("cohort targets: counts must sum to num_train");
  }
}

SegImage render_image(const GenConfig& cfg, std::uint32_t id, double cohort, Rng& rng) {
  SegImage img;
  img.id = id;
  img.height = cfg.height;
  img.width = cfg.width;
  img.channels = kFeatureChannels;
  img.cohort = cohort;
  img.features.resize(img.pixel_count() * kFeatureChannels);
  img.labels.resize(img.pixel_count());

  const double t = cohort / 100.0;
  const double s = cfg.cohort_shift;
  const std::size_t k_max = cfg.num_classes - 1;

  const double cx = 0.5 + rng.uniform(-kCenterJitter, kCenterJitter);
  const double cy = 0.5 + rng.uniform(-kCenterJitter, kCenterJitter);
  const double size_jitter = rng.uniform(0.95, 1.05);
  const double aspect = 1.0 + kAspectSwing * s * (2.0 * t - 1.0);
  const double scale = (1.0 - kShrinkWithAge * s * t) * size_jitter;

  std::vector<double> radius(cfg.num_classes, 0.0);
  for (std::size_t k = 1; k <= k_max; ++k) {
    radius[k] = kOuterRadius * scale * static_cast<double>(cfg.num_classes - k) / static_cast<double>(k_max);
  }

  for (std::size_t r = 0; r < cfg.height; ++r) {
    for (std::size_t c = 0; c < cfg.width; ++c) {
      const std::size_t p = r * cfg.width + c;
      const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(cfg.width);
      const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(cfg.height);
      const double dx = (x - cx) / aspect;
      const double dy = (y - cy) * aspect;
      const double d = std::sqrt(dx * dx + dy * dy);

      Label label = 0;
      for (std::size_t k = k_max; k >= 1; --k) {
        if (d <= radius[k]) {
          label = static_cast<Label>(k);
          break;
        }
      }
      img.labels[p] = label;

      double* f = img.features.data() + p * kFeatureChannels;
      f[0] = region_intensity(label, cfg.num_classes, cohort, s) + cfg.noise_std * rng.normal();
      f[1] = 2.0 * x - 1.0;
      f[2] = 2.0 * y - 1.0;
      f[3] = cfg.noise_std * rng.normal();
    }
  }
  return img;
}

}  // namespace

void GenConfig::validate() const {
  if (num_train < 1 || num_test < 1) throw InvalidArgument("gen config: num_train and num_test must be >= 1");
  if (height < 1 || width < 1) throw InvalidArgument("gen config: image size must be positive");
  if (num_classes < 2) throw InvalidArgument("gen config: num_classes must be >= 2");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw InvalidArgument("gen config: noise_std must be >= 0");
  if (!(cohort_shift >= 0.0 && cohort_shift <= 1.0)) throw InvalidArgument("gen config: cohort_shift must be in [0, 1]");
  if (train_cohorts) validate_targets(*train_cohorts, num_train);
}

double region_intensity(std::size_t label, std::size_t num_classes, double cohort, double cohort_shift) {
  const double spacing = 1.0 / static_cast<double>(num_classes);
  return spacing * (static_cast<double>(label) + 0.1) + kIntensityDrift * spacing * cohort_shift * (cohort / 100.0);
}

Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();

  Rng cohort_rng(derive_seed(cfg.seed, kCohortStream));
  std::vector<double> train_cohorts;
  train_cohorts.reserve(cfg.num_train);
  if (cfg.train_cohorts) {
    const auto& t = *cfg.train_cohorts;
    for (std::size_t k = 0; k < t.counts.size(); ++k) {
      const double lo = k == 0 ? 0.0 : t.boundaries[k - 1];
      const double hi = k < t.boundaries.size() ? t.boundaries[k] : 100.0;
      // bucket 0 is closed at 0; the others are half-open (lo, hi]
      for (std::size_t n = 0; n < t.counts[k]; ++n) {
        const double u = cohort_rng.uniform01();
        train_cohorts.push_back(k == 0 ? hi * u : hi - (hi - lo) * u);
      }
    }
    cohort_rng.shuffle(std::span{train_cohorts});
  } else {
    for (std::size_t n = 0; n < cfg.num_train; ++n) train_cohorts.push_back(100.0 * cohort_rng.uniform01());
  }

  Dataset ds;
  ds.num_classes = cfg.num_classes;
  std::uint32_t id = 0;
  for (std::size_t n = 0; n < cfg.num_train; ++n, ++id) {
    Rng rng(derive_seed(cfg.seed, kTrainStream, n));
    ds.train.push_back(render_image(cfg, id, train_cohorts[n], rng));
  }
  for (std::size_t n = 0; n < cfg.num_test; ++n, ++id) {
    Rng rng(derive_seed(cfg.seed, kTestStream, n));
    const double cohort = 100.0 * rng.uniform01();
    ds.test.push_back(render_image(cfg, id, cohort, rng));
  }

  std::vector<bool> seen(cfg.num_classes, false);
  for (const auto& img : ds.train) {
    for (auto y : img.labels) seen[y] = true;
  }
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (!seen[k]) {
      throw InvalidArgument("generator: class " + std::to_string(k) +
                            " never appears in the training set; use larger images or fewer classes");
    }
  }
  return ds;
}

std::vector<DatasetShard> split_uniform(std::span<const SegImage> train, std::size_t n_clients, std::uint64_t seed) {
  if (n_clients == 0) throw InvalidArgument("split_uniform: need at least one client");
  if (n_clients > train.size()) {
    throw InvalidArgument("split_uniform: " + std::to_string(n_clients) + " clients but only " +
                          std::to_string(train.size()) + " images");
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5B117));
  rng.shuffle(std::span{order});

  const std::size_t base = train.size() / n_clients;
  const std::size_t extra = train.size() % n_clients;
  std::vector<DatasetShard> shards(n_clients);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n_clients; ++i) {
    shards[i].client_index = i;
    const std::size_t size = base + (i < extra ? 1 : 0);
    for (std::size_t k = 0; k < size; ++k) shards[i].images.push_back(train[order[next++]]);
  }
  return shards;
}

std::size_t cohort_bucket(double cohort, std::span<const double> boundaries) {
  // first boundary b with cohort <= b; past the last boundary -> last bucket
  const auto it = std::lower_bound(boundaries.begin(), boundaries.end(), cohort);
  return static_cast<std::size_t>(std::distance(boundaries.begin(), it));
}

std::vector<DatasetShard> split_by_cohort(std::span<const SegImage> train, std::span<const double> boundaries,
                                          std::optional<std::span<const std::size_t>> expected_counts) {
  for (std::size_t k = 1; k < boundaries.size(); ++k) {
    if (!(boundaries[k] > boundaries[k - 1])) throw InvalidArgument("split_by_cohort: boundaries must be strictly increasing");
  }
  const std::size_t buckets = boundaries.size() + 1;
  if (expected_counts && expected_counts->size() != buckets) {
    throw InvalidArgument("split_by_cohort: expected_counts needs one entry per bucket");
  }
  std::vector<DatasetShard> shards(buckets);
  for (std::size_t k = 0; k < buckets; ++k) shards[k].client_index = k;
  for (const auto& img : train) shards[cohort_bucket(img.cohort, boundaries)].images.push_back(img);

  for (std::size_t k = 0; k < buckets; ++k) {
    if (shards[k].images.empty()) {
      throw InvalidArgument("split_by_cohort: bucket " + std::to_string(k) + " is empty");
    }
    if (expected_counts && shards[k].sample_count() != (*expected_counts)[k]) {
      throw InvalidArgument("split_by_cohort: bucket " + std::to_string(k) + " holds " +
                            std::to_string(shards[k].sample_count()) + " images, expected " +
                            std::to_string((*expected_counts)[k]));
    }
  }
  return shards;
}

std::pair<Dataset, std::uint64_t> generate_for_cohort_split(GenConfig cfg, const CohortTargets& targets,
                                                            int max_retries) {
  cfg.train_cohorts = targets;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    Dataset ds = generate_dataset(cfg);
    try {
      split_by_cohort(ds.train, targets.boundaries, std::span<const std::size_t>{targets.counts});
      return {std::move(ds), cfg.seed};
    } catch (const InvalidArgument&) {
      cfg.seed += 1;
    }
  }
  throw InvalidArgument("generate_for_cohort_split: cohort counts not reached after " +
                        std::to_string(max_retries + 1) + " attempts");
}

namespace {

constexpr char kMagic[] = "BTDS";
constexpr std::uint8_t kFormatVersion = 1;

void write_image(ByteWriter& w, const SegImage& img) {
  w.u32(img.id);
  w.u32(static_cast<std::uint32_t>(img.height));
  w.u32(static_cast<std::uint32_t>(img.width));
  w.u32(static_cast<std::uint32_t>(img.channels));
  w.f64(img.cohort);
  for (double f : img.features) w.f64(f);
  for (Label y : img.labels) w.u32(y);
}

SegImage read_image(ByteReader& r, std::size_t num_classes) {
  SegImage img;
  img.id = r.u32();
  img.height = r.u32();
  img.width = r.u32();
  img.channels = r.u32();
  img.cohort = r.f64();
  const std::size_t pixels = img.height * img.width;
  r.require(pixels * img.channels * 8 + pixels * 4);
  img.features.resize(pixels * img.channels);
  for (double& f : img.features) f = r.f64();
  img.labels.resize(pixels);
  for (Label& y : img.labels) {
    y = r.u32();
    if (y >= num_classes) throw InvalidArgument("dataset file: label out of range");
  }
  return img;
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.raw(std::string_view(kMagic, 4));
  w.u8(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.u32(static_cast<std::uint32_t>(ds.train.size()));
  w.u32(static_cast<std::uint32_t>(ds.test.size()));
  for (const auto& img : ds.train) write_image(w, img);
  for (const auto& img : ds.test) write_image(w, img);
  return out;
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != std::string_view(kMagic, 4)) throw InvalidArgument("dataset file: bad magic");
  if (const auto v = r.u8(); v != kFormatVersion) {
    throw InvalidArgument("dataset file: unsupported format version " + std::to_string(v));
  }
  Dataset ds;
  ds.num_classes = r.u32();
  const std::size_t n_train = r.u32();
  const std::size_t n_test = r.u32();
  for (std::size_t n = 0; n < n_train; ++n) ds.train.push_back(read_image(r, ds.num_classes));
  for (std::size_t n = 0; n < n_test; ++n) ds.test.push_back(read_image(r, ds.num_classes));
  if (r.remaining() != 0) throw InvalidArgument("dataset file: trailing bytes");
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  const auto bytes = serialize_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_dataset(bytes);
}

DatasetShard pool_shards(std::span<const DatasetShard> shards) {
  DatasetShard pooled;
  for (const auto& s : shards) pooled.images.insert(pooled.images.end(), s.images.begin(), s.images.end());
  return pooled;
}

}  // namespace bt
