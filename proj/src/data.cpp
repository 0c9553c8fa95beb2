#include "certkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "certkit/rng.hpp"

namespace certkit {

Shape Dataset::sample_shape() const {
  Shape s(inputs.shape().begin() + 1, inputs.shape().end());
  return s;
}

Tensor Dataset::gather(const std::vector<std::size_t>& idx) const {
  const std::size_t per = inputs.size() / size();
  std::vector<double> out(idx.size() * per);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(inputs.data().begin() + static_cast<long>(idx[i] * per),
              inputs.data().begin() + static_cast<long>((idx[i] + 1) * per),
              out.begin() + static_cast<long>(i * per));
  }
  Shape s = inputs.shape();
  s[0] = idx.size();
  return Tensor(std::move(s), std::move(out));
}

std::vector<int> Dataset::gather_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& is, const std::string& path, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("truncated IDX file " + path + " while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("cannot open IDX images file: " + images_path);
  std::uint32_t magic = read_be32(imgs, images_path, "magic");
  if (magic != kImagesMagic) {
    throw IoError("bad IDX magic at offset 0 of " + images_path + ": expected 0x00000803");
  }
  const std::uint32_t n = read_be32(imgs, images_path, "count");
  const std::uint32_t rows = read_be32(imgs, images_path, "rows");
  const std::uint32_t cols = read_be32(imgs, images_path, "cols");
  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * rows * cols);
  imgs.read(reinterpret_cast<char*>(pixels.data()), static_cast<long>(pixels.size()));
  if (static_cast<std::size_t>(imgs.gcount()) != pixels.size()) {
    throw IoError("truncated IDX images file " + images_path);
  }

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw IoError("cannot open IDX labels file: " + labels_path);
  std::uint32_t lmagic = read_be32(labs, labels_path, "magic");
  if (lmagic != kLabelsMagic) {
    throw IoError("bad IDX magic at offset 0 of " + labels_path + ": expected 0x00000801");
  }
  const std::uint32_t ln = read_be32(labs, labels_path, "count");
  if (ln != n) {
    throw IoError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(ln) +
                  " labels");
  }
  std::vector<unsigned char> raw_labels(ln);
  labs.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<long>(raw_labels.size()));
  if (static_cast<std::size_t>(labs.gcount()) != raw_labels.size()) {
    throw IoError("truncated IDX labels file " + labels_path);
  }

  Dataset ds;
  std::vector<double> vals(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) vals[i] = pixels[i] / 255.0;
  ds.inputs = Tensor({n, 1, rows, cols}, std::move(vals));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int y : ds.labels) max_label = std::max(max_label, y);
  ds.num_classes = max_label + 1;
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.inputs.rank() != 4 || ds.inputs.shape()[1] != 1) {
    throw IoError("write_idx expects [N,1,H,W] inputs, got " + shape_to_string(ds.inputs.shape()));
  }
  const std::size_t n = ds.size();
  const std::size_t rows = ds.inputs.shape()[2], cols = ds.inputs.shape()[3];
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("cannot open IDX images file for writing: " + images_path);
  write_be32(imgs, kImagesMagic);
  write_be32(imgs, static_cast<std::uint32_t>(n));
  write_be32(imgs, static_cast<std::uint32_t>(rows));
  write_be32(imgs, static_cast<std::uint32_t>(cols));
  std::vector<unsigned char> pixels(n * rows * cols);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, ds.inputs[i]));
    pixels[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  imgs.write(reinterpret_cast<const char*>(pixels.data()), static_cast<long>(pixels.size()));
  if (!imgs) throw IoError("failed writing " + images_path);

  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw IoError("cannot open IDX labels file for writing: " + labels_path);
  write_be32(labs, kLabelsMagic);
  write_be32(labs, static_cast<std::uint32_t>(n));
  std::vector<unsigned char> raw(n);
  for (std::size_t i = 0; i < n; ++i) raw[i] = static_cast<unsigned char>(ds.labels[i]);
  labs.write(reinterpret_cast<const char*>(raw.data()), static_cast<long>(raw.size()));
  if (!labs) throw IoError("failed writing " + labels_path);
}

Dataset synth_blobs(int classes, int per_class, int dims, double spread, std::uint64_t seed) {
  if (classes < 2 || dims < 2) throw ConfigError("synth_blobs requires classes >= 2 and dims >= 2");
  if (per_class < 1) throw ConfigError("synth_blobs requires per_class >= 1");
  Rng center_rng(derive_seed(seed, "blob-centers"));
  Rng noise_rng(derive_seed(seed, "blob-noise"));
  // Fixed centers well inside the unit box so that moderate spreads stay in
  // range after clamping.
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(classes));
  for (auto& c : centers) {
    c.resize(static_cast<std::size_t>(dims));
    for (auto& v : c) v = center_rng.uniform(0.15, 0.85);
  }
  const std::size_t n = static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class);
  std::vector<double> inputs(n * static_cast<std::size_t>(dims));
  std::vector<int> labels(n);
  std::size_t row = 0;
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < per_class; ++i) {
      for (int d = 0; d < dims; ++d) {
        double v = centers[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)] +
                   spread * noise_rng.normal();
        inputs[row * static_cast<std::size_t>(dims) + static_cast<std::size_t>(d)] =
            std::min(1.0, std::max(0.0, v));
      }
      labels[row] = k;
      ++row;
    }
  }
  Dataset ds;
  ds.inputs = Tensor({n, static_cast<std::size_t>(dims)}, std::move(inputs));
  ds.labels = std::move(labels);
  ds.num_classes = classes;
  return ds;
}

void split_dataset(Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw ConfigError("val_fraction must be in [0,1)");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * ds.size()));
  ds.val_idx.assign(order.begin(), order.begin() + static_cast<long>(n_val));
  ds.train_idx.assign(order.begin() + static_cast<long>(n_val), order.end());
}

void subsample(Dataset& ds, std::size_t limit, std::uint64_t seed) {
  if (limit >= ds.size()) return;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "subsample"));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  order.resize(limit);
  Tensor inputs = ds.gather(order);
  std::vector<int> labels = ds.gather_labels(order);
  ds.inputs = std::move(inputs);
  ds.labels = std::move(labels);
  ds.train_idx.clear();
  ds.val_idx.clear();
}

}  // namespace certkit
