#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "certkit/tensor.hpp"

namespace certkit {

// Inputs live in [0,1]; labels in [0, k-1]. Split indices are disjoint and
// cover the whole sample range once a split has been taken.
struct Dataset {
  Tensor inputs;  // [N,d] or [N,C,H,W]
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  // Gather rows into a batch tensor + label vector.
  Tensor gather(const std::vector<std::size_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const;
};

// IDX readers/writers (big-endian magic 0x00000803 for images, 0x00000801 for
// labels). Pixels are scaled to [0,1] on load and back to bytes on save, so a
// write-then-read round trip is bit-identical.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Gaussian blobs at deterministic centers, scaled into [0,1]^d.
Dataset synth_blobs(int classes, int per_class, int dims, double spread, std::uint64_t seed);

// Deterministic shuffled train/validation split.
void split_dataset(Dataset& ds, double val_fraction, std::uint64_t seed);

// Keep only the first `limit` samples (after a deterministic shuffle) --
// desk-scale subsetting for the larger IDX files.
void subsample(Dataset& ds, std::size_t limit, std::uint64_t seed);

}  // namespace certkit
