#include "certkit/bounds.hpp"

#include <cmath>
#include <limits>

namespace certkit {

namespace {

struct ChannelAffine {
  Tensor scale;      // per channel
  Tensor abs_scale;  // |scale|
  Tensor shift;
};

// Batchnorm folded into a per-channel affine map using the requested
// statistics. Scale/shift are constants during bounding by design: bound
// gradients flow through W and b of the surrounding layers only.
ChannelAffine fold_batchnorm(const Layer& l, BnStats stats) {
  const std::size_t c = l.gamma.size();
  const Tensor* mean = &l.running_mean;
  const Tensor* var = &l.running_var;
  if (stats == BnStats::batch) {
    if (!l.has_last_stats) {
      throw DomainError("batch statistics requested for bounding before any train-mode forward");
    }
    mean = &l.last_mean;
    var = &l.last_var;
  }
  std::vector<double> s(c), a(c), t(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double inv = 1.0 / std::sqrt((*var)[i] + l.bn_eps);
    s[i] = l.gamma[i] * inv;
    a[i] = std::fabs(s[i]);
    t[i] = l.beta[i] - (*mean)[i] * s[i];
  }
  return {Tensor({c}, std::move(s)), Tensor({c}, std::move(a)), Tensor({c}, std::move(t))};
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite ") + what + " during bound propagation");
  }
}

}  // namespace

BoundsState ibp_bounds(Network& net, const Tensor& x, const std::vector<int>& labels, double eps,
                       ParamLift* lift, const BoundOptions& opts) {
  if (eps < 0) throw DomainError("ibp_bounds requires eps >= 0");
  if (net.layers.empty() || net.layers.back().kind != LayerKind::affine) {
    throw ShapeError("ibp_bounds requires a final affine layer");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= net.num_classes) {
      throw DomainError("label " + std::to_string(y) + " out of range");
    }
  }

  Shape batched = net.input_shape;
  batched.insert(batched.begin(), labels.size());
  Tensor xb = x.shape() == net.input_shape ? reshape(x, batched) : x;
  if (xb.shape() != batched) {
    throw ShapeError("ibp_bounds input shape " + shape_to_string(x.shape()) +
                     " does not match batch of " + std::to_string(labels.size()));
  }

  Tensor lo = add_scalar(xb, -eps);
  Tensor hi = add_scalar(xb, eps);
  if (opts.clip_input_domain) {
    lo = clamp(lo, 0.0, 1.0);
    hi = clamp(hi, 0.0, 1.0);
  }

  BoundsState state;
  state.epsilon = eps;
  state.stats_used = opts.stats;

  const std::size_t n_layers = net.layers.size();
  for (std::size_t li = 0; li + 1 < n_layers; ++li) {
    Layer& layer = net.layers[li];
    switch (layer.kind) {
      case LayerKind::affine: {
        if (lo.rank() != 2) {
          lo = reshape(lo, {lo.shape()[0], lo.size() / lo.shape()[0]});
          hi = reshape(hi, {hi.shape()[0], hi.size() / hi.shape()[0]});
        }
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        Tensor b = lift ? lift->lift(layer.b) : layer.b;
        Tensor mid = scale(add(lo, hi), 0.5);
        Tensor rad = scale(sub(hi, lo), 0.5);
        Tensor cm = linear(mid, w, &b);
        Tensor cr = linear(rad, abs(w), nullptr);
        lo = sub(cm, cr);
        hi = add(cm, cr);
        state.layer_lower.push_back(lo);
        state.layer_upper.push_back(hi);
        break;
      }
      case LayerKind::conv2d: {
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        Tensor b = lift ? lift->lift(layer.b) : layer.b;
        Tensor mid = scale(add(lo, hi), 0.5);
        Tensor rad = scale(sub(hi, lo), 0.5);
        Tensor cm = conv2d(mid, w, &b, layer.stride, layer.pad);
        Tensor cr = conv2d(rad, abs(w), nullptr, layer.stride, layer.pad);
        lo = sub(cm, cr);
        hi = add(cm, cr);
        state.layer_lower.push_back(lo);
        state.layer_upper.push_back(hi);
        break;
      }
      case LayerKind::relu:
        lo = relu(lo);
        hi = relu(hi);
        break;
      case LayerKind::flatten:
        lo = reshape(lo, {lo.shape()[0], lo.size() / lo.shape()[0]});
        hi = reshape(hi, {hi.shape()[0], hi.size() / hi.shape()[0]});
        break;
      case LayerKind::batchnorm: {
        ChannelAffine aff = fold_batchnorm(layer, opts.stats);
        Tensor mid = scale(add(lo, hi), 0.5);
        Tensor rad = scale(sub(hi, lo), 0.5);
        Tensor cm = scale_channels(mid, aff.scale, aff.shift);
        Tensor cr = scale_channels(rad, aff.abs_scale, Tensor::zeros(aff.shift.shape()));
        lo = sub(cm, cr);
        hi = add(cm, cr);
        state.layer_lower.push_back(lo);
        state.layer_upper.push_back(hi);
        break;
      }
    }
    check_finite(lo, "layer bound");
  }

  // Final affine layer: both the plain post-affine bounds (kept for
  // diagnostics and gap comparisons) and the elided logit-difference bounds.
  Layer& last = net.layers.back();
  if (lo.rank() != 2) {
    lo = reshape(lo, {lo.shape()[0], lo.size() / lo.shape()[0]});
    hi = reshape(hi, {hi.shape()[0], hi.size() / hi.shape()[0]});
  }
  Tensor w = lift ? lift->lift(last.w) : last.w;
  Tensor b = lift ? lift->lift(last.b) : last.b;
  Tensor mid = scale(add(lo, hi), 0.5);
  Tensor rad = scale(sub(hi, lo), 0.5);
  Tensor cm = linear(mid, w, &b);
  Tensor cr = linear(rad, abs(w), nullptr);
  state.layer_lower.push_back(sub(cm, cr));
  state.layer_upper.push_back(add(cm, cr));
  state.final_lower = elided_lower_bound(w, b, mid, rad, labels);
  check_finite(state.final_lower, "elided logit-difference bound");
  return state;
}

std::pair<Tensor, Tensor> elide_last_layer(const Network& net, int label) {
  const Layer& last = net.final_affine();
  const std::size_t k = last.w.shape()[0], m = last.w.shape()[1];
  if (label < 0 || static_cast<std::size_t>(label) >= k) {
    throw DomainError("label " + std::to_string(label) + " out of range [0," +
                      std::to_string(k - 1) + "]");
  }
  const std::size_t y = static_cast<std::size_t>(label);
  std::vector<double> w(k * m), b(k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t p = 0; p < m; ++p) w[i * m + p] = last.w[y * m + p] - last.w[i * m + p];
    b[i] = last.b[y] - last.b[i];
  }
  return {Tensor({k, m}, std::move(w)), Tensor({k}, std::move(b))};
}

ForwAbsGap forwabs_gap(Network& net, double eps, ParamLift* lift, const BoundOptions& opts) {
  if (eps < 0) throw DomainError("forwabs_gap requires eps >= 0");
  // delta^0 = 2 eps 1 over the input, so the first affine map yields
  // delta^1 = 2 eps |W^1| 1 and every later stage applies |W^k|.
  Shape batched = net.input_shape;
  batched.insert(batched.begin(), 1);
  Tensor delta = Tensor::full(batched, 2.0 * eps);

  ForwAbsGap gap;
  for (auto& layer : net.layers) {
    switch (layer.kind) {
      case LayerKind::affine: {
        if (delta.rank() != 2) delta = reshape(delta, {1, delta.size()});
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        delta = linear(delta, abs(w), nullptr);
        gap.per_layer.push_back(delta);
        break;
      }
      case LayerKind::conv2d: {
        Tensor w = lift ? lift->lift(layer.w) : layer.w;
        delta = conv2d(delta, abs(w), nullptr, layer.stride, layer.pad);
        gap.per_layer.push_back(delta);
        break;
      }
      case LayerKind::relu:
        break;  // |W| delta upper-bounds the post-activation gap; pass through
      case LayerKind::flatten:
        delta = reshape(delta, {1, delta.size()});
        break;
      case LayerKind::batchnorm: {
        ChannelAffine aff = fold_batchnorm(layer, opts.stats);
        delta = scale_channels(delta, aff.abs_scale, Tensor::zeros(aff.shift.shape()));
        gap.per_layer.push_back(delta);
        break;
      }
    }
  }
  gap.total = sum(delta);
  if (!gap.total.all_finite()) throw NumericError("non-finite ForwAbs gap");
  return gap;
}

bool ibp_certified(Network& net, const Tensor& x, int label, double eps,
                   const BoundOptions& opts) {
  BoundsState st = ibp_bounds(net, x, {label}, eps, nullptr, opts);
  return min_logit_lower_bounds(st, {label})[0] >= 0.0;
}

std::vector<double> min_logit_lower_bounds(const BoundsState& state,
                                           const std::vector<int>& labels) {
  const std::size_t batch = state.final_lower.shape()[0];
  const std::size_t k = state.final_lower.shape()[1];
  if (labels.size() != batch) throw ShapeError("label count does not match bounds batch");
  std::vector<double> mins(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      if (i == static_cast<std::size_t>(labels[b])) continue;
      m = std::min(m, state.final_lower[b * k + i]);
    }
    mins[b] = m;
  }
  return mins;
}

}  // namespace certkit
