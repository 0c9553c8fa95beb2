#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "certkit/errors.hpp"

namespace certkit {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

// Dense row-major tensor of doubles. Payloads are immutable and shared, so
// copies are cheap and tensors captured by tape closures stay valid. A tensor
// optionally carries a handle into the tape that recorded it.
class Tensor {
 public:
  Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  const std::vector<double>& data() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double value() const;  // scalar accessor; throws ShapeError if size != 1

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  bool all_finite() const;

  // Used by Tape when recording results and lifting leaves.
  Tensor with_tape(Tape* t, int node) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradient accumulator handed to backward closures. Buffers are allocated on
// first touch; untouched nodes read back as zero gradients.
class GradStore {
 public:
  explicit GradStore(std::size_t n) : bufs_(n) {}
  // Dense buffer for a node, allocated with `size` zeros on first access.
  std::vector<double>& buffer(int node, std::size_t size);
  bool touched(int node) const {
    return static_cast<std::size_t>(node) < bufs_.size() &&
           !bufs_[static_cast<std::size_t>(node)].empty();
  }
  const std::vector<double>& at(int node) const { return bufs_[static_cast<std::size_t>(node)]; }

 private:
  std::vector<std::vector<double>> bufs_;
};

// Result of a backward pass: gradient of the root w.r.t. every recorded node.
class Gradients {
 public:
  Gradients(std::shared_ptr<GradStore> store, const Tape* tape)
      : store_(std::move(store)), tape_(tape) {}
  // Gradient w.r.t. a tensor recorded on the tape (zeros if off the autodiff
  // path). Throws TapeError for tensors from another tape or none.
  Tensor wrt(const Tensor& t) const;

 private:
  std::shared_ptr<GradStore> store_;
  const Tape* tape_;
};

// Reverse-mode tape. Append-only; node ids are topologically ordered because
// an op can only consume tensors that were already recorded. A tape belongs
// to one forward computation and is never shared across threads.
class Tape {
 public:
  using BackFn = std::function<void(std::span<const double> grad_out, GradStore& store)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Lift a value onto the tape as a tracked leaf.
  Tensor var(const Tensor& value);

  // Record an op result. `parents` holds the tape inputs; constants are
  // captured inside `back` by value.
  Tensor record(Tensor result, std::vector<int> parents, BackFn back);

  // Gradients of a scalar root w.r.t. every node, visiting each node exactly
  // once in reverse topological order. Deterministic for a fixed tape.
  Gradients backward(const Tensor& root) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t node_size(int id) const { return nodes_[static_cast<std::size_t>(id)].out_size; }

 private:
  struct Node {
    std::vector<int> parents;
    BackFn back;  // null for leaves
    std::size_t out_size;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. Each returns a plain value when no input is on a tape, and records the
// local gradient otherwise. Mixing tensors from two different tapes throws.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n] -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b);  // x[B,in], w[out,in] -> [B,out]
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor* b, int stride, int pad);
Tensor transpose(const Tensor& a);                          // 2-D

Tensor add(const Tensor& a, const Tensor& b);  // broadcasting, numpy rules
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);      // subgradient at 0 is 0
Tensor abs(const Tensor& a);       // subgradient at 0 is 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);       // DomainError on non-positive values
Tensor sqrt(const Tensor& a);
Tensor sign(const Tensor& a);      // sign(0) = 0; gradient defined as 0
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor sum(const Tensor& a);       // -> scalar
Tensor max(const Tensor& a);       // -> scalar; gradient routed to first argmax
Tensor mean(const Tensor& a);      // sum / numel

// Per-channel affine y[b,c,...] = x[b,c,...] * s[c] + t[c]; channel is axis 1.
Tensor scale_channels(const Tensor& x, const Tensor& s, const Tensor& t);

// Reshape (sizes must agree); gradient reshapes back.
Tensor reshape(const Tensor& a, Shape shape);

// Stable cross-entropy of logits [B,k] (or [k]) against integer labels,
// computed via log-sum-exp with max subtraction. Returns per-sample losses.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// z[b,i] = logits[b,y_b] - logits[b,i]; z[b,y_b] = 0.
Tensor logit_differences(const Tensor& logits, const std::vector<int>& labels);

// Elided affine lower bound: row-wise
//   low[b,i] = sum_m (W[y_b,m]-W[i,m]) mid[b,m] - |W[y_b,m]-W[i,m]| rad[b,m]
//              + bias[y_b] - bias[i]
// with low[b,y_b] = 0. Differentiable in W, bias, mid and rad.
Tensor elided_lower_bound(const Tensor& w, const Tensor& bias, const Tensor& mid,
                          const Tensor& rad, const std::vector<int>& labels);

// Fused batch normalization over axis 0 (and spatial axes for rank-4 input).
// Returns the normalized output and writes the batch statistics per channel.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps, Tensor* batch_mean, Tensor* batch_var);

}  // namespace certkit
