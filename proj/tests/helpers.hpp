#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "certkit/losses.hpp"
#include "certkit/network.hpp"
#include "certkit/rng.hpp"

namespace testutil {

using namespace certkit;

inline bool approx(double a, double b, double tol = 1e-9) { return std::fabs(a - b) <= tol; }

inline bool approx_rel(double a, double b, double tol) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-12});
  return std::fabs(a - b) / denom <= tol;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(shape, std::move(d));
}

// Weights drawn away from zero so that |.| and ReLU kinks do not sit under
// the finite-difference probes.
inline Tensor random_weights(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) {
    const double mag = rng.uniform(0.1, 1.0) * scale;
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(shape, std::move(d));
}

// Random affine/ReLU stack: `layers` affine stages with the given widths.
inline Network random_mlp(const std::vector<std::size_t>& widths, Rng& rng, double scale = 1.0,
                          bool with_relu = true) {
  Network net;
  net.input_shape = {widths.front()};
  net.num_classes = widths.back();
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const double layer_scale = scale / std::sqrt(static_cast<double>(widths[i]));
    net.layers.push_back(Layer::affine(random_weights({widths[i + 1], widths[i]}, rng, layer_scale),
                                       random_tensor({widths[i + 1]}, rng, -0.1, 0.1)));
    if (with_relu && i + 2 < widths.size()) net.layers.push_back(Layer::make_relu());
  }
  return net;
}

inline std::vector<std::size_t> random_widths(Rng& rng, std::size_t min_layers = 2,
                                              std::size_t max_layers = 5,
                                              std::size_t max_width = 32) {
  const std::size_t n = min_layers + rng.below(max_layers - min_layers + 1);
  std::vector<std::size_t> widths(n + 1);
  for (auto& w : widths) w = 2 + rng.below(max_width - 1);
  return widths;
}

// Central finite differences of a scalar function of the network parameters.
// Returns the max relative error against the provided analytic gradients.
inline double max_grad_rel_error(Network& net, const std::function<double()>& eval_loss,
                                 const std::vector<Tensor>& analytic, double h = 1e-5) {
  auto params = net.parameters();
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (std::size_t j = 0; j < p->size(); ++j) {
      const Tensor saved = *p;
      std::vector<double> plus(saved.data());
      plus[j] += h;
      *p = Tensor(saved.shape(), std::move(plus));
      const double fp = eval_loss();
      std::vector<double> minus(saved.data());
      minus[j] -= h;
      *p = Tensor(saved.shape(), std::move(minus));
      const double fm = eval_loss();
      *p = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[pi][j];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

// Analytic parameter gradients of a loss expression built by `make_loss`.
inline std::vector<Tensor> param_gradients(Network& net,
                                           const std::function<Tensor(ParamLift&)>& make_loss) {
  Tape tape;
  ParamLift lift(tape);
  auto params = net.parameters();
  for (Tensor* p : params) lift.lift(*p);
  Tensor total = make_loss(lift);
  Gradients grads = tape.backward(total);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Tensor* p : params) out.push_back(grads.wrt(lift.lift(*p)));
  return out;
}

}  // namespace testutil
