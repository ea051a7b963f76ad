#include "whitebed/data.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace whitebed {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (images.size() != labels.size()) {
    throw Error("dataset: " + std::to_string(images.size()) + " images but " + std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw Error("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " outside [0, " +
                  std::to_string(class_count) + ")");
    }
    const Image& im = images[i];
    const Image& first = images.front();
    if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
      throw ShapeError("dataset: sample " + std::to_string(i) + " has a different image shape");
    }
  }
}

MatF Dataset::as_matrix(const std::vector<Index>& indices) const {
  if (indices.empty()) return MatF(0, 0);
  const Index cols = images[static_cast<std::size_t>(indices.front())].size();
  MatF m(static_cast<Index>(indices.size()), cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Image& im = images.at(static_cast<std::size_t>(indices[r]));
    m.row(Index(r)) = Eigen::Map<const RowVec<float>>(im.data.data(), cols);
  }
  return m;
}

MatF Dataset::as_matrix() const {
  std::vector<Index> all(images.size());
  std::iota(all.begin(), all.end(), Index{0});
  return as_matrix(all);
}

Dataset read_cifar_file(const fs::path& file, int label_bytes, int class_count) {
  if (label_bytes != 1 && label_bytes != 2) throw ConfigError("cifar: label_bytes must be 1 or 2");
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cifar: cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t record = std::size_t(label_bytes) + std::size_t(kCifarPixels);
  if (bytes.empty() || bytes.size() % record != 0) {
    throw IoError("cifar: " + file.string() + " has " + std::to_string(bytes.size()) +
                  " bytes, expected a positive multiple of " + std::to_string(record));
  }
  Dataset ds;
  ds.class_count = class_count;
  const std::size_t n = bytes.size() / record;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * record;
    ds.labels.push_back(int(rec[label_bytes - 1]));
    Image im(3, kCifarSide, kCifarSide);
    for (Index p = 0; p < kCifarPixels; ++p) im.data[std::size_t(p)] = float(rec[label_bytes + p]) / 255.0f;
    ds.images.push_back(std::move(im));
  }
  ds.validate();
  return ds;
}

Dataset load_cifar10(const fs::path& dir, Split split) {
  std::vector<std::string> names;
  if (split == Split::train) {
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    names.push_back("test_batch.bin");
  }
  constexpr std::uintmax_t kFileBytes = 10000ULL * (1 + kCifarPixels);
  Dataset out;
  out.class_count = 10;
  for (const auto& name : names) {
    const fs::path file = dir / name;
    if (!fs::exists(file)) throw IoError("cifar: missing " + file.string());
    if (fs::file_size(file) != kFileBytes) {
      throw IoError("cifar: " + file.string() + " has " + std::to_string(fs::file_size(file)) + " bytes, expected " +
                    std::to_string(kFileBytes));
    }
    Dataset part = read_cifar_file(file);
    std::move(part.images.begin(), part.images.end(), std::back_inserter(out.images));
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  return out;
}

std::vector<std::uint8_t> encode_cifar_records(const Dataset& data) {
  data.validate();
  std::vector<std::uint8_t> bytes;
  bytes.reserve(data.images.size() * std::size_t(1 + kCifarPixels));
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const Image& im = data.images[i];
    if (im.channels != 3 || im.height != kCifarSide || im.width != kCifarSide) {
      throw ShapeError("cifar: records hold 3x32x32 images, sample " + std::to_string(i) + " is " +
                       std::to_string(im.channels) + "x" + shape_str(im.height, im.width));
    }
    if (data.labels[i] > 255) throw Error("cifar: label does not fit one byte");
    bytes.push_back(std::uint8_t(data.labels[i]));
    for (float v : im.data) bytes.push_back(std::uint8_t(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0)));
  }
  return bytes;
}

void write_cifar_file(const fs::path& file, const Dataset& data) {
  const auto bytes = encode_cifar_records(data);
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cifar: cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("cifar: short write to " + file.string());
}

Dataset gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("synthetic: need at least 2 classes, got " + std::to_string(cfg.classes));
  if (cfg.per_class < 1 || cfg.side < 8) throw ConfigError("synthetic: per_class >= 1 and side >= 8 required");
  constexpr double kPi = 3.14159265358979323846;
  const Index side = cfg.side;
  const double mid = double(side - 1) / 2.0;
  const double radius = double(side) / 4.0;

  Dataset ds;
  ds.class_count = cfg.classes;
  const Index n = Index(cfg.classes) * cfg.per_class;
  ds.images.reserve(std::size_t(n));
  for (Index i = 0; i < n; ++i) {
    const int c = int(i % cfg.classes);
    auto rng = derived_rng({cfg.seed, std::uint64_t(i)});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double angle = 2.0 * kPi * double(c) / double(cfg.classes);
    const double cy = mid + radius * std::sin(angle) + 4.0 * u(rng);
    const double cx = mid + radius * std::cos(angle) + 4.0 * u(rng);
    const double sigma = cfg.sigma * (1.0 + 0.2 * u(rng));
    double hue = double(c) / double(cfg.classes) + 0.05 * u(rng);
    hue -= std::floor(hue);

    double rgb[3];
    {
      const double hh = hue * 6.0;
      const int sector = int(std::floor(hh)) % 6;
      const double f = hh - std::floor(hh);
      const double q = 1.0 - f, t = f;
      const double table[6][3] = {{1, t, 0}, {q, 1, 0}, {0, 1, t}, {0, q, 1}, {t, 0, 1}, {1, 0, q}};
      for (int k = 0; k < 3; ++k) rgb[k] = table[sector][k];
    }

    Image im(3, side, side);
    std::uniform_real_distribution<double> noise(0.0, 0.05);
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) {
        const double r2 = (double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx);
        const double intensity = std::exp(-r2 / (2.0 * sigma * sigma));
        for (Index ch = 0; ch < 3; ++ch) {
          im.at(ch, y, x) = float(std::clamp(noise(rng) + intensity * rgb[ch], 0.0, 1.0));
        }
      }
    ds.images.push_back(std::move(im));
    ds.labels.push_back(c);
  }
  return ds;
}

EpochSampler::EpochSampler(Index dataset_size, Index batch_origins, std::uint64_t seed, std::uint64_t epoch)
    : dataset_size_(dataset_size), batch_origins_(batch_origins) {
  if (batch_origins < 1 || batch_origins > dataset_size) {
    throw ConfigError("sampler: batch of " + std::to_string(batch_origins) + " origins from a dataset of " +
                      std::to_string(dataset_size));
  }
  order_.resize(std::size_t(dataset_size));
  std::iota(order_.begin(), order_.end(), Index{0});
  auto rng = derived_rng({seed, 0x6570'6f63ULL, epoch});
  std::shuffle(order_.begin(), order_.end(), rng);
}

std::vector<Index> EpochSampler::batch(Index b) const {
  if (b < 0 || b >= batch_count()) throw Error("sampler: batch " + std::to_string(b) + " out of range");
  auto first = order_.begin() + b * batch_origins_;
  return std::vector<Index>(first, first + batch_origins_);
}

}  // namespace whitebed
