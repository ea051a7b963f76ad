#pragma once

// Datasets: the CIFAR binary record format and a seeded synthetic image
// generator, plus epoch-level origin sampling.

#include "whitebed/augment.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace whitebed {

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int class_count = 0;

  Index size() const { return static_cast<Index>(images.size()); }
  /// Throws when lengths differ, a label is out of range or image shapes disagree.
  void validate() const;
  /// Images flattened channel-major, one row each.
  MatF as_matrix(const std::vector<Index>& indices) const;
  MatF as_matrix() const;
};

enum class Split { train, test };

inline constexpr Index kCifarSide = 32;
inline constexpr Index kCifarPixels = 3 * kCifarSide * kCifarSide;

/// One CIFAR record file. label_bytes is 1 for CIFAR-10 and 2 for CIFAR-100
/// (coarse, fine; the fine label is kept).
Dataset read_cifar_file(const std::filesystem::path& file, int label_bytes = 1, int class_count = 10);

/// data_batch_1..5.bin for train, test_batch.bin for test.
Dataset load_cifar10(const std::filesystem::path& dir, Split split);

/// Serializes 32x32 RGB images in the CIFAR-10 record layout; pixels round to the nearest 1/255.
void write_cifar_file(const std::filesystem::path& file, const Dataset& data);
std::vector<std::uint8_t> encode_cifar_records(const Dataset& data);

struct SyntheticConfig {
  int classes = 4;
  Index per_class = 64;
  Index side = 32;
  double sigma = 5.0;
  std::uint64_t seed = 0;
};

/// Gaussian colour blobs: each class owns a base hue and a blob center; every
/// image jitters sigma (+-20%), center (+-4 px) and hue (+-0.05) over a uniform
/// noise floor of amplitude 0.05. Labels cycle 0, 1, ..., classes-1.
Dataset gen_synthetic(const SyntheticConfig& cfg);

/// Seeded permutation of a dataset; consecutive slices of N origins form the
/// batches of one epoch and the ragged tail is dropped.
class EpochSampler {
 public:
  EpochSampler(Index dataset_size, Index batch_origins, std::uint64_t seed, std::uint64_t epoch);

  Index batch_count() const { return dataset_size_ / batch_origins_; }
  std::vector<Index> batch(Index b) const;
  const std::vector<Index>& order() const { return order_; }

 private:
  Index dataset_size_, batch_origins_;
  std::vector<Index> order_;
};

}  // namespace whitebed
