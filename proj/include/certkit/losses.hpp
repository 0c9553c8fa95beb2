#pragma once

#include <optional>
#include <string>

#include "certkit/attacks.hpp"
#include "certkit/bounds.hpp"

namespace certkit {

enum class LossFamily { adversarial, ibp, mtl_ibp, exp_ibp, cc_ibp, sabr, forwabs };

LossFamily loss_family_from_string(const std::string& s);
std::string loss_family_to_string(LossFamily f);

struct LossSpec {
  LossFamily family = LossFamily::adversarial;
  double alpha = 0.0;   // over-approximation coefficient in [0,1]
  double lambda = 0.0;  // ForwAbs regularization weight >= 0
  AttackConfig attack;
  // Radius used for the IBP/ForwAbs side. Ramp schedules move this while the
  // attack radius stays fixed. Negative means "same as attack.eps".
  double bounding_eps = -1.0;
  BoundOptions bound_opts;

  double effective_bounding_eps() const { return bounding_eps < 0 ? attack.eps : bounding_eps; }
  void validate() const;
};

struct LossValue {
  Tensor total;  // scalar, on the tape when parameters were lifted
  std::optional<double> adversarial_part;
  std::optional<double> ibp_part;
  std::optional<double> forwabs_part;
  // Attack output when one ran, used by the training loop for its metrics.
  std::optional<Tensor> x_adv;
  std::vector<bool> in_ball;
};

// Scalar combination rules, exposed separately so the numeric behavior can be
// exercised with synthetic component values.
double mtl_combine(double l_adv, double l_ibp, double alpha);
// Log-space product: exp((1-alpha) log l_adv + alpha log l_ibp), with both
// components floored at 1e-300 before the log.
double exp_combine(double l_adv, double l_ibp, double alpha);
// Reference direct-product path, for agreement checks only.
double exp_combine_direct(double l_adv, double l_ibp, double alpha);

// Each loss takes the network, a clean batch and labels. When `x_adv_fixed`
// is given no attack runs and the point is used as-is (the toy sweeps pin
// x_adv = 0). Attack outputs are constants: parameter gradients flow through
// the network evaluation at x_adv, never through the attack search.
LossValue adversarial_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                           const LossSpec& spec, ParamLift* lift = nullptr,
                           Mode mode = Mode::train, const Tensor* x_adv_fixed = nullptr);
LossValue ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels, double eps,
                   ParamLift* lift = nullptr, const BoundOptions& opts = {});
LossValue mtl_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                       const Tensor* x_adv_fixed = nullptr);
LossValue exp_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                       const Tensor* x_adv_fixed = nullptr);
LossValue cc_ibp_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                      const Tensor* x_adv_fixed = nullptr);
LossValue sabr_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                    const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                    const Tensor* x_adv_fixed = nullptr);
LossValue forwabs_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                       const Tensor* x_adv_fixed = nullptr);

// Dispatch on spec.family.
LossValue compute_loss(Network& net, const Tensor& x, const std::vector<int>& labels,
                       const LossSpec& spec, ParamLift* lift = nullptr, Mode mode = Mode::train,
                       const Tensor* x_adv_fixed = nullptr);

}  // namespace certkit
