#include "certkit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace certkit {

LossFamily loss_family_from_string(const std::string& s) {
  if (s == "adversarial") return LossFamily::adversarial;
  if (s == "ibp") return LossFamily::ibp;
  if (s == "mtl-ibp") return LossFamily::mtl_ibp;
  if (s == "exp-ibp") return LossFamily::exp_ibp;
  if (s == "cc-ibp") return LossFamily::cc_ibp;
  if (s == "sabr") return LossFamily::sabr;
  if (s == "forwabs") return LossFamily::forwabs;
  throw ConfigError("unknown loss family '" + s + "'");
}

std::string loss_family_to_string(LossFamily f) {
  switch (f) {
    case LossFamily::adversarial: return "adversarial";
    case LossFamily::ibp: return "ibp";
    case LossFamily::mtl_ibp: return "mtl-ibp";
    case LossFamily::exp_ibp: return "exp-ibp";
    case LossFamily::cc_ibp: return "cc-ibp";
    case LossFamily::sabr: return "sabr";
    case LossFamily::forwabs: return "forwabs";
  }
  return "?";
}

void LossSpec::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("loss.alpha must be in [0,1]");
  if (lambda < 0.0) throw ConfigError("loss.lambda must be >= 0");
  attack.validate();
}

double mtl_combine(double l_adv, double l_ibp, double alpha) {
  return (1.0 - alpha) * l_adv + alpha * l_ibp;
}

namespace {
constexpr double kLossFloor = 1e-300;
}

double exp_combine(double l_adv, double l_ibp, double alpha) {
  if (alpha == 0.0) return l_adv;
  if (alpha == 1.0) return l_ibp;
  const double la = std::log(std::max(l_adv, kLossFloor));
  const double lb = std::log(std::max(l_ibp, kLossFloor));
  return std::exp((1.0 - alpha) * la + alpha * lb);
}

double exp_combine_direct(double l_adv, double l_ibp, double alpha) {
  return std::pow(l_adv, 1.0 - alpha) * std::pow(l_ibp, alpha);
}

namespace {

bool has_batchnorm(const Network& net) {
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::batchnorm) return true;
  }
  return false;
}

Tensor batched(const Tensor& x, const Network& net) {
  if (x.shape() == net.input_shape) {
    Shape s = net.input_shape;
    s.insert(s.begin(), 1);
    return reshape(x, s);
  }
  return x;
}

BoundOptions bound_opts_for(const LossSpec& spec, Network& net, Mode mode) {
  BoundOptions opts = spec.bound_opts;
  opts.stats = (mode == Mode::train && has_batchnorm(net)) ? BnStats::batch : BnStats::running;
  return opts;
}

// The adversarial point for a spec: an explicit override (toy sweeps), or the
// configured attack. Attack outputs are plain values, never tape tensors.
AdversarialBatch adversarial_point(Network& net, const Tensor& x, const std::vector<int>& labels,
                                   const LossSpec& spec, Mode mode, const Tensor* x_adv_fixed) {
  Tensor xb = batched(x, net);
  if (x_adv_fixed) {
    Tensor fixed = batched(*x_adv_fixed, net);
    std::vector<bool> flags(labels.size(), true);
    const std::size_t per = xb.size() / labels.size();
    for (std::size_t b = 0; b < labels.size(); ++b) {
      for (std::size_t i = 0; i < per; ++i) {
        if (std::fabs(fixed[b * per + i] - xb[b * per + i]) > spec.attack.eps + 1e-12) {
          flags[b] = false;
          break;
        }
      }
    }
    return {fixed, flags};
  }
  return run_attack(net, xb, labels, spec.attack, mode);
}

Tensor mean_ce_of_forward(Network& net, const Tensor& x, const std::vector<int>& labels, Mode mode,
                          ParamLift* lift) {
  Tensor logits = net.forward(x, mode, lift);
  return mean(softmax_cross_entropy(logits, labels));
}

void check_total(const Tensor& total, const char* family) {
  if (!total.all_finite()) {
    throw NumericError(std::string("non-finite ") + family + " loss");
  }
}

}  // namespace

LossValue adversarial_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                           const LossSpec& spec, ParamLift* lift, Mode mode,
                           const Tensor* x_adv_fixed) {
  AdversarialBatch adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
  LossValue v;
  v.total = mean_ce_of_forward(net, adv.x_adv, labels, mode, lift);
  v.adversarial_part = v.total.value();
  v.x_adv = adv.x_adv;
  v.in_ball = adv.in_ball;
  check_total(v.total, "adversarial");
  return v;
}

LossValue ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels, double eps,
                   ParamLift* lift, const BoundOptions& opts) {
  BoundsState st = ibp_bounds(net, x, labels, eps, lift, opts);
  LossValue v;
  v.total = mean(softmax_cross_entropy(neg(st.final_lower), labels));
  v.ibp_part = v.total.value();
  check_total(v.total, "ibp");
  return v;
}

namespace {

// Shared flow of the convex-combination families: attack point, adversarial
// branch, bound branch. The adversarial branch runs first so that with
// batchnorm the bound statistics come from the attack batch.
struct Branches {
  AdversarialBatch adv;
  Tensor adv_ce;             // scalar on tape
  BoundsState bounds;
  Tensor ibp_ce;             // scalar on tape
};

Branches both_branches(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift, Mode mode,
                       const Tensor* x_adv_fixed) {
  Branches br;
  br.adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
  br.adv_ce = mean_ce_of_forward(net, br.adv.x_adv, labels, mode, lift);
  BoundOptions opts = bound_opts_for(spec, net, mode);
  br.bounds = ibp_bounds(net, batched(x, net), labels, spec.effective_bounding_eps(), lift, opts);
  br.ibp_ce = mean(softmax_cross_entropy(neg(br.bounds.final_lower), labels));
  return br;
}

}  // namespace

LossValue mtl_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift, Mode mode,
                       const Tensor* x_adv_fixed) {
  spec.validate();
  Branches br = both_branches(net, x, labels, spec, lift, mode, x_adv_fixed);
  LossValue v;
  v.total = add(scale(br.adv_ce, 1.0 - spec.alpha), scale(br.ibp_ce, spec.alpha));
  v.adversarial_part = br.adv_ce.value();
  v.ibp_part = br.ibp_ce.value();
  v.x_adv = br.adv.x_adv;
  v.in_ball = br.adv.in_ball;
  check_total(v.total, "mtl-ibp");
  return v;
}

LossValue exp_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift, Mode mode,
                       const Tensor* x_adv_fixed) {
  spec.validate();
  const double inf = std::numeric_limits<double>::infinity();
  // Exact endpoints: the 0-weight branch is evaluated off-tape so it cannot
  // perturb the gradient, and the total matches the active branch bit-for-bit.
  if (spec.alpha == 0.0 || spec.alpha == 1.0) {
    Branches br;
    br.adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
    LossValue v;
    if (spec.alpha == 0.0) {
      v.total = mean_ce_of_forward(net, br.adv.x_adv, labels, mode, lift);
      v.adversarial_part = v.total.value();
      BoundOptions opts = bound_opts_for(spec, net, mode);
      LossValue ref = ibp_loss(net, batched(x, net), labels, spec.effective_bounding_eps(),
                               nullptr, opts);
      v.ibp_part = ref.ibp_part;
    } else {
      double adv_val = mean_ce_of_forward(net, br.adv.x_adv, labels, mode, nullptr).value();
      BoundOptions opts = bound_opts_for(spec, net, mode);
      LossValue ibp = ibp_loss(net, batched(x, net), labels, spec.effective_bounding_eps(), lift,
                               opts);
      v.total = ibp.total;
      v.adversarial_part = adv_val;
      v.ibp_part = ibp.ibp_part;
    }
    v.x_adv = br.adv.x_adv;
    v.in_ball = br.adv.in_ball;
    check_total(v.total, "exp-ibp");
    return v;
  }
  Branches br = both_branches(net, x, labels, spec, lift, mode, x_adv_fixed);
  Tensor la = log(clamp(br.adv_ce, kLossFloor, inf));
  Tensor lb = log(clamp(br.ibp_ce, kLossFloor, inf));
  LossValue v;
  v.total = exp(add(scale(la, 1.0 - spec.alpha), scale(lb, spec.alpha)));
  v.adversarial_part = br.adv_ce.value();
  v.ibp_part = br.ibp_ce.value();
  v.x_adv = br.adv.x_adv;
  v.in_ball = br.adv.in_ball;
  check_total(v.total, "exp-ibp");
  return v;
}

LossValue cc_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const LossSpec& spec, ParamLift* lift, Mode mode,
                      const Tensor* x_adv_fixed) {
  spec.validate();
  AdversarialBatch adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
  Tensor logits = net.forward(adv.x_adv, mode, lift);
  Tensor z_adv = logit_differences(logits, labels);
  BoundOptions opts = bound_opts_for(spec, net, mode);
  BoundsState st =
      ibp_bounds(net, batched(x, net), labels, spec.effective_bounding_eps(), lift, opts);
  Tensor combo = add(scale(z_adv, 1.0 - spec.alpha), scale(st.final_lower, spec.alpha));
  LossValue v;
  v.total = mean(softmax_cross_entropy(neg(combo), labels));
  v.adversarial_part = mean(softmax_cross_entropy(neg(z_adv), labels)).value();
  v.ibp_part = mean(softmax_cross_entropy(neg(st.final_lower), labels)).value();
  v.x_adv = adv.x_adv;
  v.in_ball = adv.in_ball;
  check_total(v.total, "cc-ibp");
  return v;
}

LossValue sabr_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                    const LossSpec& spec, ParamLift* lift, Mode mode, const Tensor* x_adv_fixed) {
  spec.validate();
  AdversarialBatch adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
  Tensor xb = batched(x, net);
  double adv_val;
  {
    // Forward at the attack point: reported as the adversarial component and,
    // in train mode, the source of the bound statistics for batchnorm.
    Tensor ce = mean_ce_of_forward(net, adv.x_adv, labels, mode, nullptr);
    adv_val = ce.value();
  }
  const double small_rad = spec.alpha * spec.effective_bounding_eps();
  // Keep the shrunken ball inside the attack ball: the center may sit at most
  // eps - small_rad away from x. With N-FGSM the attack itself leaves the
  // ball, so the projection is disabled and the raw point is the center.
  Tensor center = adv.x_adv;
  if (spec.attack.kind != AttackKind::n_fgsm) {
    const double proj_rad = std::max(spec.attack.eps - small_rad, 0.0);
    std::vector<double> c(adv.x_adv.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      c[i] = std::min(xb[i] + proj_rad, std::max(xb[i] - proj_rad, adv.x_adv[i]));
    }
    center = Tensor(adv.x_adv.shape(), std::move(c));
  }
  BoundOptions opts = bound_opts_for(spec, net, mode);
  LossValue v = ibp_loss(net, center, labels, small_rad, lift, opts);
  v.adversarial_part = adv_val;
  v.x_adv = adv.x_adv;
  v.in_ball = adv.in_ball;
  check_total(v.total, "sabr");
  return v;
}

LossValue forwabs_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift, Mode mode,
                       const Tensor* x_adv_fixed) {
  spec.validate();
  AdversarialBatch adv = adversarial_point(net, x, labels, spec, mode, x_adv_fixed);
  Tensor adv_ce = mean_ce_of_forward(net, adv.x_adv, labels, mode, lift);
  BoundOptions opts = bound_opts_for(spec, net, mode);
  LossValue v;
  if (spec.lambda == 0.0) {
    // Exact reduction to the adversarial loss; the gap is still reported.
    ForwAbsGap gap = forwabs_gap(net, spec.effective_bounding_eps(), nullptr, opts);
    v.total = adv_ce;
    v.forwabs_part = gap.total.value();
  } else {
    ForwAbsGap gap = forwabs_gap(net, spec.effective_bounding_eps(), lift, opts);
    v.total = add(adv_ce, scale(gap.total, spec.lambda));
    v.forwabs_part = gap.total.value();
  }
  v.adversarial_part = adv_ce.value();
  v.x_adv = adv.x_adv;
  v.in_ball = adv.in_ball;
  check_total(v.total, "forwabs");
  return v;
}

LossValue compute_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift, Mode mode,
                       const Tensor* x_adv_fixed) {
  switch (spec.family) {
    case LossFamily::adversarial:
      return adversarial_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
    case LossFamily::ibp: {
      if (mode == Mode::train && has_batchnorm(net)) {
        net.forward(batched(x, net), Mode::train, nullptr);  // clean batch statistics
      }
      BoundOptions opts = bound_opts_for(spec, net, mode);
      return ibp_loss(net, batched(x, net), labels, spec.effective_bounding_eps(), lift, opts);
    }
    case LossFamily::mtl_ibp: return mtl_ibp_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
    case LossFamily::exp_ibp: return exp_ibp_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
    case LossFamily::cc_ibp: return cc_ibp_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
    case LossFamily::sabr: return sabr_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
    case LossFamily::forwabs: return forwabs_loss(net, x, labels, spec, lift, mode, x_adv_fixed);
  }
  throw ConfigError("unreachable loss family");
}

}  // namespace certkit
