#include "psinet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "psinet/error.hpp"

namespace psinet {

namespace {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Dataset parse_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes,
                      std::size_t classes) {
  const std::size_t record = label_bytes + kCifarImageBytes;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() / record * record;
    throw FormatError("truncated record: " + std::to_string(bytes.size() - offset) +
                          " trailing bytes, expected multiples of " + std::to_string(record),
                      offset);
  }
  const std::size_t n = bytes.size() / record;
  Dataset ds;
  ds.num_classes = classes;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  float* px = ds.images.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const std::size_t label = rec[label_bytes - 1];
    if (label >= classes) {
      throw FormatError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")",
                        i * record + label_bytes - 1);
    }
    ds.labels[i] = static_cast<int>(label);
    for (std::size_t k = 0; k < kCifarImageBytes; ++k) {
      px[i * kCifarImageBytes + k] = static_cast<float>(rec[label_bytes + k]) / 255.0f;
    }
  }
  return ds;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

Dataset concat_datasets(std::vector<Dataset> parts) {
  Dataset out;
  out.num_classes = parts.front().num_classes;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape s = parts.front().images.shape();
  s[0] = n;
  std::vector<float> data;
  data.reserve(shape_numel(s));
  for (const auto& p : parts) {
    data.insert(data.end(), p.images.raw(), p.images.raw() + p.images.numel());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = Tensor(s, std::move(data));
  return out;
}

Dataset load_file(const std::filesystem::path& path, bool cifar100) {
  const auto bytes = read_file(path);
  try {
    return cifar100 ? parse_cifar100(bytes) : parse_cifar10(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.filename().string() + ": " + e.what(), e.offset());
  }
}

void standardize(DatasetSplit& split) {
  Dataset& tr = split.train;
  const std::size_t c = tr.images.dim(1);
  const std::size_t plane = tr.images.dim(2) * tr.images.dim(3);
  tr.channel_mean.assign(c, 0.0f);
  tr.channel_std.assign(c, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const float* p = tr.images.raw() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        ss += double(p[k]) * p[k];
      }
    }
    const double count = double(tr.size() * plane);
    const double mean = s / count;
    tr.channel_mean[ch] = static_cast<float>(mean);
    tr.channel_std[ch] = static_cast<float>(std::sqrt(std::max(ss / count - mean * mean, 1e-12)));
  }
  split.test.channel_mean = tr.channel_mean;
  split.test.channel_std = tr.channel_std;
  for (Dataset* ds : {&split.train, &split.test}) {
    for (std::size_t i = 0; i < ds->size(); ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        float* p = ds->images.raw() + (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          p[k] = (p[k] - tr.channel_mean[ch]) / tr.channel_std[ch];
        }
      }
    }
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ull + 1));
}

Shape Dataset::sample_shape() const {
  if (images.rank() != 4) return {};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  Shape s = images.shape();
  const std::size_t per = shape_numel(sample_shape());
  s[0] = indices.size();
  std::vector<float> data(indices.size() * per);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= size()) throw ShapeError("sample index out of range");
    std::copy_n(images.raw() + indices[j] * per, per, data.data() + j * per);
  }
  return Tensor(s, std::move(data));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.channel_mean = channel_mean;
  out.channel_std = channel_std;
  out.images = gather(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels[i]);
  return out;
}

std::vector<std::vector<std::size_t>> Dataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return out;
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ShapeError("dataset images " + shape_string(images.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ShapeError("sample " + std::to_string(i) + " has label " +
                       std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
  return parse_records(bytes, 1, 10);
}

Dataset parse_cifar100(std::span<const std::uint8_t> bytes) {
  return parse_records(bytes, 2, 100);
}

std::vector<std::uint8_t> encode_cifar10_record(const Dataset& ds, std::size_t index) {
  if (ds.sample_shape() != Shape{3, 32, 32}) {
    throw ShapeError("CIFAR records need 3x32x32 images");
  }
  if (!ds.channel_mean.empty()) {
    throw ConfigError("cannot re-encode standardized images");
  }
  std::vector<std::uint8_t> rec(kCifar10RecordBytes);
  rec[0] = static_cast<std::uint8_t>(ds.labels.at(index));
  const float* px = ds.images.raw() + index * kCifarImageBytes;
  for (std::size_t k = 0; k < kCifarImageBytes; ++k) {
    rec[1 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(px[k], 0.0f, 1.0f) * 255.0f));
  }
  return rec;
}

DatasetSplit load_cifar10(const std::filesystem::path& dir, bool standardize_channels) {
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b) {
    parts.push_back(load_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), false));
  }
  DatasetSplit split{concat_datasets(std::move(parts)),
                     load_file(dir / "test_batch.bin", false)};
  if (standardize_channels) standardize(split);
  return split;
}

DatasetSplit load_cifar100(const std::filesystem::path& dir, bool standardize_channels) {
  DatasetSplit split{load_file(dir / "train.bin", true), load_file(dir / "test.bin", true)};
  if (standardize_channels) standardize(split);
  return split;
}

Dataset synthesize_dataset(const SynthOptions& o) {
  if (o.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (o.height == 0 || o.width == 0 || o.channels == 0) {
    throw ConfigError("synthetic image size must be positive");
  }
  // Classes are spread over orientations first, then over frequency bands.
  const std::size_t orientations = std::min<std::size_t>(o.classes, 6);
  const std::size_t bands = (o.classes + orientations - 1) / orientations;
  const double pi = std::numbers::pi;
  const std::size_t n = o.classes * o.per_class;
  const std::size_t plane = o.height * o.width;

  Dataset ds;
  ds.num_classes = o.classes;
  ds.labels.resize(n);
  std::vector<float> data(n * o.channels * plane);
  std::mt19937_64 rng(derive_seed(o.seed, 0x5e7));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % o.classes;
    ds.labels[i] = static_cast<int>(k);
    const double theta = pi * double(k % orientations) / double(orientations) +
                         (unit(rng) - 0.5) * pi / double(orientations) * 0.35;
    const double base_freq = 0.12 + 0.14 * double(k / orientations) / double(std::max<std::size_t>(bands, 1));
    const double freq = base_freq * (1.0 + 0.1 * (unit(rng) - 0.5));
    const double phase = 2.0 * pi * unit(rng);
    const double contrast = 0.55 + 0.45 * unit(rng);
    const double cx = std::cos(theta), sy = std::sin(theta);
    for (std::size_t ch = 0; ch < o.channels; ++ch) {
      float* px = data.data() + (i * o.channels + ch) * plane;
      for (std::size_t y = 0; y < o.height; ++y) {
        for (std::size_t x = 0; x < o.width; ++x) {
          const double t = 2.0 * pi * freq * (double(x) * cx + double(y) * sy) + phase;
          const double v = 0.5 + 0.5 * contrast * std::sin(t) + o.noise * gauss(rng);
          px[y * o.width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  ds.images = Tensor({n, o.channels, o.height, o.width}, std::move(data));
  return ds;
}

Dataset synthesize_dataset(std::size_t classes, std::size_t per_class, std::size_t height,
                           std::size_t width, std::uint64_t seed) {
  SynthOptions o;
  o.classes = classes;
  o.per_class = per_class;
  o.height = height;
  o.width = width;
  o.seed = seed;
  return synthesize_dataset(o);
}

DatasetSplit synthesize_split(const SynthOptions& options, std::size_t test_per_class) {
  SynthOptions test = options;
  test.per_class = test_per_class;
  test.seed = derive_seed(options.seed, 0x7e57);
  return {synthesize_dataset(options), synthesize_dataset(test)};
}

}  // namespace psinet
