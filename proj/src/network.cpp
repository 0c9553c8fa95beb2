#include "certkit/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "certkit/rng.hpp"

namespace certkit {

Layer Layer::affine(Tensor w, Tensor b) {
  Layer l;
  l.kind = LayerKind::affine;
  if (w.rank() != 2 || b.size() != w.shape()[0]) {
    throw ShapeError("affine layer: w " + shape_to_string(w.shape()) + " incompatible with b " +
                     shape_to_string(b.shape()));
  }
  l.w = std::move(w);
  l.b = std::move(b);
  return l;
}

Layer Layer::conv(Tensor w, Tensor b, int stride, int pad) {
  Layer l;
  l.kind = LayerKind::conv2d;
  if (w.rank() != 4 || b.size() != w.shape()[0]) {
    throw ShapeError("conv layer: w " + shape_to_string(w.shape()) + " incompatible with b " +
                     shape_to_string(b.shape()));
  }
  l.w = std::move(w);
  l.b = std::move(b);
  l.stride = stride;
  l.pad = pad;
  return l;
}

Layer Layer::batchnorm(std::size_t channels) {
  Layer l;
  l.kind = LayerKind::batchnorm;
  l.gamma = Tensor::full({channels}, 1.0);
  l.beta = Tensor::zeros({channels});
  l.running_mean = Tensor::zeros({channels});
  l.running_var = Tensor::full({channels}, 1.0);
  return l;
}

Tensor ParamLift::lift(const Tensor& p) {
  auto key = &p.data();
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  Tensor lifted = tape_->var(p);
  cache_.emplace(key, lifted);
  return lifted;
}

namespace {

Tensor ensure_batched(const Tensor& x, const Shape& sample_shape) {
  if (x.shape() == sample_shape) {
    Shape batched = sample_shape;
    batched.insert(batched.begin(), 1);
    return reshape(x, batched);
  }
  if (x.rank() == sample_shape.size() + 1 &&
      std::equal(sample_shape.begin(), sample_shape.end(), x.shape().begin() + 1)) {
    return x;
  }
  throw ShapeError("input shape " + shape_to_string(x.shape()) + " does not match network input " +
                   shape_to_string(sample_shape));
}

}  // namespace

Tensor Network::forward(const Tensor& x, Mode mode, ParamLift* lift) {
  Tensor h = ensure_batched(x, input_shape);
  for (auto& layer : layers) {
    switch (layer.kind) {
      case LayerKind::affine: {
        if (h.rank() != 2) h = reshape(h, {h.shape()[0], h.size() / h.shape()[0]});
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        Tensor b = lift ? lift->lift(layer.b) : layer.b;
        h = linear(h, w, &b);
        break;
      }
      case LayerKind::conv2d: {
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        Tensor b = lift ? lift->lift(layer.b) : layer.b;
        h = conv2d(h, w, &b, layer.stride, layer.pad);
        break;
      }
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::flatten:
        h = reshape(h, {h.shape()[0], h.size() / h.shape()[0]});
        break;
      case LayerKind::batchnorm: {
        Tensor gamma = lift ? lift->lift(layer.gamma) : layer.gamma;
        Tensor beta = lift ? lift->lift(layer.beta) : layer.beta;
        if (mode == Mode::train) {
          Tensor bm, bv;
          h = batchnorm_train(h, gamma, beta, layer.bn_eps, &bm, &bv);
          layer.last_mean = bm;
          layer.last_var = bv;
          layer.has_last_stats = true;
          const double m = layer.bn_momentum;
          std::vector<double> rm(layer.running_mean.size()), rv(layer.running_var.size());
          for (std::size_t i = 0; i < rm.size(); ++i) {
            rm[i] = (1.0 - m) * layer.running_mean[i] + m * bm[i];
            rv[i] = (1.0 - m) * layer.running_var[i] + m * bv[i];
          }
          layer.running_mean = Tensor(layer.running_mean.shape(), std::move(rm));
          layer.running_var = Tensor(layer.running_var.shape(), std::move(rv));
        } else {
          // y = gamma*inv_std*x + (beta - gamma*inv_std*mean), per channel.
          const std::size_t c = layer.gamma.size();
          std::vector<double> inv(c), nmi(c);
          for (std::size_t i = 0; i < c; ++i) {
            inv[i] = 1.0 / std::sqrt(layer.running_var[i] + layer.bn_eps);
            nmi[i] = -layer.running_mean[i] * inv[i];
          }
          Tensor s = mul(gamma, Tensor({c}, std::move(inv)));
          Tensor t = add(beta, mul(gamma, Tensor({c}, std::move(nmi))));
          h = scale_channels(h, s, t);
        }
        break;
      }
    }
  }
  if (h.rank() != 2 || h.shape()[1] != num_classes) {
    throw ShapeError("network produced shape " + shape_to_string(h.shape()) + ", expected k=" +
                     std::to_string(num_classes));
  }
  return h;
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> ps;
  for (auto& l : layers) {
    switch (l.kind) {
      case LayerKind::affine:
      case LayerKind::conv2d:
        ps.push_back(&l.w);
        ps.push_back(&l.b);
        break;
      case LayerKind::batchnorm:
        ps.push_back(&l.gamma);
        ps.push_back(&l.beta);
        break;
      default:
        break;
    }
  }
  return ps;
}

std::size_t Network::num_parameters() {
  std::size_t n = 0;
  for (Tensor* p : parameters()) n += p->size();
  return n;
}

const Layer& Network::final_affine() const {
  if (layers.empty() || layers.back().kind != LayerKind::affine) {
    throw ShapeError("network must end with an affine layer");
  }
  return layers.back();
}

Tensor network_logit_differences(const Tensor& logits, const std::vector<int>& labels) {
  return logit_differences(logits, labels);
}

namespace {

std::size_t fan_in_of(const Layer& l) {
  if (l.kind == LayerKind::affine) return l.w.shape()[1];
  return l.w.shape()[1] * l.w.shape()[2] * l.w.shape()[3];  // conv: c*kh*kw
}

double mean_row_l1(const Layer& l) {
  const std::size_t rows = l.w.shape()[0];
  const std::size_t cols = l.w.size() / rows;
  double acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double row = 0;
    for (std::size_t c = 0; c < cols; ++c) row += std::fabs(l.w[r * cols + c]);
    acc += row;
  }
  return acc / static_cast<double>(rows);
}

}  // namespace

void init_network(Network& net, InitScheme scheme, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init"));
  for (auto& l : net.layers) {
    if (l.kind != LayerKind::affine && l.kind != LayerKind::conv2d) continue;
    const double k = 1.0 / std::sqrt(static_cast<double>(fan_in_of(l)));
    std::vector<double> wd(l.w.size()), bd(l.b.size());
    for (auto& v : wd) v = rng.uniform(-k, k);
    for (auto& v : bd) v = rng.uniform(-k, k);
    l.w = Tensor(l.w.shape(), std::move(wd));
    l.b = Tensor(l.b.shape(), std::move(bd));
    if (scheme == InitScheme::ibp_aware) {
      const double norm = mean_row_l1(l);
      if (norm > 1.0) {
        std::vector<double> scaled(l.w.size());
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = l.w[i] / norm;
        l.w = Tensor(l.w.shape(), std::move(scaled));
      }
    }
  }
}

Network build_toy(const ToyConfig& cfg) {
  if (cfg.depth < 2) throw ShapeError("toy network depth must be >= 2");
  Network net;
  net.input_shape = {2};
  net.num_classes = 2;
  const double w = cfg.w;
  net.layers.push_back(Layer::affine(Tensor({2, 2}, {w, -w, -w, w}), Tensor::zeros({2})));
  net.layers.push_back(Layer::make_relu());
  for (int i = 2; i <= cfg.depth - 1; ++i) {
    net.layers.push_back(Layer::affine(Tensor({2, 2}, {2, 0, 0, 2}), Tensor::zeros({2})));
    net.layers.push_back(Layer::make_relu());
  }
  net.layers.push_back(Layer::affine(Tensor({2, 2}, {2, 0, 0, 2}), Tensor({2}, {3, 1})));
  return net;
}

Network build_preset(const std::string& name, const Shape& input_shape, std::size_t num_classes,
                     const std::optional<ToyConfig>& toy) {
  if (name == "toy") {
    return build_toy(toy.value_or(ToyConfig{}));
  }
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  const std::size_t d = shape_numel(input_shape);
  if (name == "mlp-small") {
    net.layers.push_back(Layer::affine(Tensor::zeros({128, d}), Tensor::zeros({128})));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::affine(Tensor::zeros({128, 128}), Tensor::zeros({128})));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::affine(Tensor::zeros({num_classes, 128}), Tensor::zeros({num_classes})));
    return net;
  }
  if (input_shape.size() != 3 && (name == "cnn-mini" || name == "cnn5-thin")) {
    throw ShapeError("conv presets need [C,H,W] input, got " + shape_to_string(input_shape));
  }
  if (name == "cnn-mini") {
    const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    net.layers.push_back(Layer::conv(Tensor::zeros({8, c, 3, 3}), Tensor::zeros({8}), 1, 1));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::conv(Tensor::zeros({16, 8, 4, 4}), Tensor::zeros({16}), 2, 1));
    net.layers.push_back(Layer::make_relu());
    const std::size_t oh = (h + 2 - 4) / 2 + 1, ow = (w + 2 - 4) / 2 + 1;
    net.layers.push_back(Layer::make_flatten());
    net.layers.push_back(Layer::affine(Tensor::zeros({100, 16 * oh * ow}), Tensor::zeros({100})));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::affine(Tensor::zeros({num_classes, 100}), Tensor::zeros({num_classes})));
    return net;
  }
  if (name == "cnn5-thin") {
    // CNN-5 structure at reduced width: 16/16/32 channels, 128-unit linear.
    const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    net.layers.push_back(Layer::conv(Tensor::zeros({16, c, 3, 3}), Tensor::zeros({16}), 1, 1));
    net.layers.push_back(Layer::batchnorm(16));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::conv(Tensor::zeros({16, 16, 4, 4}), Tensor::zeros({16}), 2, 1));
    net.layers.push_back(Layer::batchnorm(16));
    net.layers.push_back(Layer::make_relu());
    const std::size_t h2 = (h + 2 - 4) / 2 + 1, w2 = (w + 2 - 4) / 2 + 1;
    net.layers.push_back(Layer::conv(Tensor::zeros({32, 16, 4, 4}), Tensor::zeros({32}), 2, 1));
    net.layers.push_back(Layer::batchnorm(32));
    net.layers.push_back(Layer::make_relu());
    const std::size_t h3 = (h2 + 2 - 4) / 2 + 1, w3 = (w2 + 2 - 4) / 2 + 1;
    net.layers.push_back(Layer::make_flatten());
    net.layers.push_back(Layer::affine(Tensor::zeros({128, 32 * h3 * w3}), Tensor::zeros({128})));
    net.layers.push_back(Layer::batchnorm(128));
    net.layers.push_back(Layer::make_relu());
    net.layers.push_back(Layer::affine(Tensor::zeros({num_classes, 128}), Tensor::zeros({num_classes})));
    return net;
  }
  throw ConfigError("unknown network preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Checkpoint format: "CKNET" magic, u32 version, then a layer list. All
// numeric payloads are little-endian raw doubles, so parameters round-trip
// bit-exactly.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[6] = "CKNET";
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double get_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u64(os, d);
  for (double v : t.data()) put_f64(os, v);
}

Tensor get_tensor(std::istream& is) {
  std::uint32_t rank = get_u32(is);
  Shape shape(rank);
  for (auto& d : shape) d = get_u64(is);
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = get_f64(is);
  if (!is) throw IoError("truncated tensor in checkpoint");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 5);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(net.input_shape.size()));
  for (auto d : net.input_shape) put_u64(os, d);
  put_u64(os, net.num_classes);
  put_u32(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    put_u32(os, static_cast<std::uint32_t>(l.kind));
    switch (l.kind) {
      case LayerKind::affine:
        put_tensor(os, l.w);
        put_tensor(os, l.b);
        break;
      case LayerKind::conv2d:
        put_tensor(os, l.w);
        put_tensor(os, l.b);
        put_u32(os, static_cast<std::uint32_t>(l.stride));
        put_u32(os, static_cast<std::uint32_t>(l.pad));
        break;
      case LayerKind::batchnorm:
        put_tensor(os, l.gamma);
        put_tensor(os, l.beta);
        put_tensor(os, l.running_mean);
        put_tensor(os, l.running_var);
        put_f64(os, l.bn_momentum);
        put_f64(os, l.bn_eps);
        break;
      default:
        break;
    }
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[5] = {};
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) {
    throw IoError("bad checkpoint magic in " + path);
  }
  std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Network net;
  std::uint32_t rank = get_u32(is);
  net.input_shape.resize(rank);
  for (auto& d : net.input_shape) d = get_u64(is);
  net.num_classes = get_u64(is);
  std::uint32_t n_layers = get_u32(is);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    auto kind = static_cast<LayerKind>(get_u32(is));
    switch (kind) {
      case LayerKind::affine: {
        Tensor w = get_tensor(is);
        Tensor b = get_tensor(is);
        net.layers.push_back(Layer::affine(std::move(w), std::move(b)));
        break;
      }
      case LayerKind::conv2d: {
        Tensor w = get_tensor(is);
        Tensor b = get_tensor(is);
        int stride = static_cast<int>(get_u32(is));
        int pad = static_cast<int>(get_u32(is));
        net.layers.push_back(Layer::conv(std::move(w), std::move(b), stride, pad));
        break;
      }
      case LayerKind::batchnorm: {
        Layer l = Layer::batchnorm(1);
        l.gamma = get_tensor(is);
        l.beta = get_tensor(is);
        l.running_mean = get_tensor(is);
        l.running_var = get_tensor(is);
        l.bn_momentum = get_f64(is);
        l.bn_eps = get_f64(is);
        net.layers.push_back(std::move(l));
        break;
      }
      case LayerKind::relu:
        net.layers.push_back(Layer::make_relu());
        break;
      case LayerKind::flatten:
        net.layers.push_back(Layer::make_flatten());
        break;
      default:
        throw IoError("unknown layer kind in checkpoint");
    }
  }
  if (!is) throw IoError("truncated checkpoint: " + path);
  return net;
}

}  // namespace certkit
