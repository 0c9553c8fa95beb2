#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "certkit/tensor.hpp"

namespace certkit {

enum class Mode { train, eval };

enum class LayerKind { affine, conv2d, relu, flatten, batchnorm };

// One stage of the feed-forward stack. Parameter tensors are value-semantic;
// the optimizer swaps payloads rather than mutating shared buffers.
struct Layer {
  LayerKind kind = LayerKind::relu;

  // affine: w [out,in], b [out]
  // conv2d: w [f,c,kh,kw], b [f]
  Tensor w, b;
  int stride = 1;
  int pad = 0;

  // batchnorm, per channel
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  Tensor last_mean, last_var;  // statistics captured by the latest train-mode forward
  bool has_last_stats = false;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  static Layer affine(Tensor w, Tensor b);
  static Layer conv(Tensor w, Tensor b, int stride, int pad);
  static Layer make_relu() {
    Layer l;
    l.kind = LayerKind::relu;
    return l;
  }
  static Layer make_flatten() {
    Layer l;
    l.kind = LayerKind::flatten;
    return l;
  }
  static Layer batchnorm(std::size_t channels);
};

// Caches parameter leaves on a tape so that repeated forwards (attack branch,
// bound branch, |W| branch) share nodes and their gradients accumulate.
class ParamLift {
 public:
  explicit ParamLift(Tape& tape) : tape_(&tape) {}
  Tensor lift(const Tensor& p);
  Tape& tape() { return *tape_; }

 private:
  Tape* tape_;
  std::unordered_map<const std::vector<double>*, Tensor> cache_;
};

enum class InitScheme { fan_in_uniform, ibp_aware };

struct Network {
  Shape input_shape;  // sample shape without batch dimension, e.g. {784} or {1,28,28}
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  // Logits for a batch (a leading batch dimension is added when x matches the
  // sample shape exactly). In train mode batchnorm uses and captures batch
  // statistics and updates the running estimates; eval mode uses running
  // statistics. With a lift, parameters become tape leaves; otherwise they
  // are constants and only input gradients can flow.
  Tensor forward(const Tensor& x, Mode mode, ParamLift* lift = nullptr);

  std::vector<Tensor*> parameters();
  std::size_t num_parameters();

  // Final layer must be affine; throws ShapeError otherwise.
  const Layer& final_affine() const;
};

// z_i = logits_y - logits_i for a single sample or a batch.
Tensor network_logit_differences(const Tensor& logits, const std::vector<int>& labels);

// Deterministic parameter initialization. fan_in_uniform draws U(-k, k) with
// k = 1/sqrt(fan_in). ibp_aware additionally rescales each weight matrix so
// its mean row-wise l1 norm is at most 1, which keeps the layerwise gap
// recursion from amplifying (a documented stand-in, not a replication of the
// specialized scheme the literature uses).
void init_network(Network& net, InitScheme scheme, std::uint64_t seed);

struct ToyConfig {
  int depth = 2;     // number of affine layers n (>= 2)
  double w = 1.0;    // first-layer coupling weight
};

// Presets. `toy` builds the tunable-bounds two-unit stack; the conv presets
// expect 28x28 single-channel inputs.
Network build_toy(const ToyConfig& cfg);
Network build_preset(const std::string& name, const Shape& input_shape, std::size_t num_classes,
                     const std::optional<ToyConfig>& toy = std::nullopt);

// Versioned binary checkpoint; parameter round-trip is bit-exact.
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

}  // namespace certkit
