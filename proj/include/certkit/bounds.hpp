#pragma once

#include <vector>

#include "certkit/network.hpp"

namespace certkit {

// Which batchnorm statistics bound propagation folds in as constants.
enum class BnStats { batch, running };

struct BoundOptions {
  BnStats stats = BnStats::running;
  // Clip the input box to [0,1] before propagating. Off by default: the
  // perturbation set is the pure l-infinity ball.
  bool clip_input_domain = false;
};

// Interval state after propagating B_eps(x) through the stack. `layer_lower`
// and `layer_upper` hold the post-affine bounds of every affine/conv/
// batchnorm stage including the final layer (pre-elision); `final_lower`
// holds the elided logit-difference lower bounds with a zero at the label
// index. Everything participates in the tape when parameters were lifted.
struct BoundsState {
  double epsilon = 0.0;
  std::vector<Tensor> layer_lower;
  std::vector<Tensor> layer_upper;
  Tensor final_lower;  // [B,k]
  BnStats stats_used = BnStats::running;
};

// Single-pass over-approximation of the output gap: the layerwise recursion
// delta^1 = 2 eps |W^1| 1, delta^k = |W^k| delta^(k-1), with activations
// passed through unchanged. Shift terms never contribute.
struct ForwAbsGap {
  std::vector<Tensor> per_layer;
  Tensor total;  // scalar, 1^T delta^n
};

// Interval bound propagation with last-layer elision. Differentiable w.r.t.
// lifted parameters; batchnorm scale/shift and statistics enter as constants.
// Throws NumericError if any bound is non-finite.
BoundsState ibp_bounds(Network& net, const Tensor& x, const std::vector<int>& labels, double eps,
                       ParamLift* lift = nullptr, const BoundOptions& opts = {});

// The merged last layer for label y: w_tilde row i = W row y - W row i,
// b_tilde_i = b_y - b_i. Row y is all zeros.
std::pair<Tensor, Tensor> elide_last_layer(const Network& net, int label);

ForwAbsGap forwabs_gap(Network& net, double eps, ParamLift* lift = nullptr,
                       const BoundOptions& opts = {});

// min_{i != y} final_lower_i >= 0 for one sample.
bool ibp_certified(Network& net, const Tensor& x, int label, double eps,
                   const BoundOptions& opts = {});

// Per-sample minimum of the elided lower bounds over i != y.
std::vector<double> min_logit_lower_bounds(const BoundsState& state,
                                           const std::vector<int>& labels);

}  // namespace certkit
