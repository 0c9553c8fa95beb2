#include "certkit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "certkit/rng.hpp"

namespace certkit {

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "rs-fgsm") return AttackKind::rs_fgsm;
  if (s == "n-fgsm") return AttackKind::n_fgsm;
  if (s == "pgd") return AttackKind::pgd;
  throw ConfigError("unknown attack kind '" + s + "'");
}

std::string attack_kind_to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::rs_fgsm: return "rs-fgsm";
    case AttackKind::n_fgsm: return "n-fgsm";
    case AttackKind::pgd: return "pgd";
  }
  return "?";
}

double AttackConfig::effective_step() const {
  if (step_size > 0) return step_size;
  return kind == AttackKind::pgd ? eps / 4.0 : eps;
}

void AttackConfig::validate() const {
  if (eps < 0) throw ConfigError("attack.eps must be >= 0");
  if (steps < 1) throw ConfigError("attack.steps must be >= 1");
  if (restarts < 1) throw ConfigError("attack.restarts must be >= 1");
  if (kind != AttackKind::pgd && steps != 1) {
    throw ConfigError("attack.steps must be 1 for single-step attacks");
  }
  if (noise_multiplier < 0) throw ConfigError("attack.noise_multiplier must be >= 0");
}

Tensor input_gradient(Network& net, const Tensor& x, const std::vector<int>& labels,
                      Mode bn_mode) {
  Tape tape;
  Tensor xt = tape.var(x);
  Tensor logits = net.forward(xt, bn_mode, nullptr);
  Tensor ce = softmax_cross_entropy(logits, labels);
  Tensor root = sum(ce);
  return tape.backward(root).wrt(xt);
}

namespace {

std::vector<double> per_sample_ce(Network& net, const Tensor& x, const std::vector<int>& labels,
                                  Mode bn_mode) {
  Tensor logits = net.forward(x, bn_mode, nullptr);
  Tensor ce = softmax_cross_entropy(logits, labels);
  return ce.data();
}

Tensor uniform_noise(const Shape& shape, double lo, double hi, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(shape, std::move(d));
}

// x_adv = clamp(base + step*sign(g), x-eps, x+eps), elementwise, with the
// optional [0,1] domain clamp applied after the ball projection.
Tensor signed_step_and_project(const Tensor& base, const Tensor& g, double step, const Tensor& x,
                               double eps, bool project, bool clip_input) {
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double sg = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
    double v = base[i] + step * sg;
    if (project) v = std::min(x[i] + eps, std::max(x[i] - eps, v));
    if (clip_input) v = std::min(1.0, std::max(0.0, v));
    out[i] = v;
  }
  return Tensor(base.shape(), std::move(out));
}

std::vector<bool> in_ball_flags(const Tensor& x_adv, const Tensor& x, double eps) {
  const std::size_t batch = x.shape()[0];
  const std::size_t per = x.size() / batch;
  std::vector<bool> flags(batch, true);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per; ++i) {
      if (std::fabs(x_adv[b * per + i] - x[b * per + i]) > eps + 1e-12) {
        flags[b] = false;
        break;
      }
    }
  }
  return flags;
}

Tensor batched_input(const Tensor& x, const Network& net) {
  if (x.shape() == net.input_shape) {
    Shape s = net.input_shape;
    s.insert(s.begin(), 1);
    return reshape(x, s);
  }
  return x;
}

}  // namespace

AdversarialBatch fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const AttackConfig& cfg, Mode bn_mode) {
  Tensor xb = batched_input(x, net);
  Tensor g = input_gradient(net, xb, labels, bn_mode);
  Tensor x_adv = signed_step_and_project(xb, g, cfg.eps, xb, cfg.eps, true, cfg.clip_input);
  return {x_adv, in_ball_flags(x_adv, xb, cfg.eps)};
}

AdversarialBatch rs_fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                         const AttackConfig& cfg, Mode bn_mode) {
  Tensor xb = batched_input(x, net);
  Rng rng(derive_seed(cfg.seed, "rs-fgsm"));
  Tensor start = add(xb, uniform_noise(xb.shape(), -cfg.eps, cfg.eps, rng));
  if (cfg.clip_input) start = clamp(start, 0.0, 1.0);
  Tensor g = input_gradient(net, start, labels, bn_mode);
  Tensor x_adv =
      signed_step_and_project(start, g, cfg.effective_step(), xb, cfg.eps, true, cfg.clip_input);
  return {x_adv, in_ball_flags(x_adv, xb, cfg.eps)};
}

AdversarialBatch n_fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                        const AttackConfig& cfg, Mode bn_mode) {
  Tensor xb = batched_input(x, net);
  Rng rng(derive_seed(cfg.seed, "n-fgsm"));
  const double k = cfg.noise_multiplier * cfg.eps;
  Tensor start = add(xb, uniform_noise(xb.shape(), -k, k, rng));
  Tensor g = input_gradient(net, start, labels, bn_mode);
  // No projection back onto B_eps(x): the point may leave the ball.
  Tensor x_adv =
      signed_step_and_project(start, g, cfg.effective_step(), xb, cfg.eps, false, cfg.clip_input);
  return {x_adv, in_ball_flags(x_adv, xb, cfg.eps)};
}

AdversarialBatch pgd(Network& net, const Tensor& x, const std::vector<int>& labels,
                     const AttackConfig& cfg, Mode bn_mode) {
  Tensor xb = batched_input(x, net);
  const std::size_t batch = xb.shape()[0];
  const std::size_t per = xb.size() / batch;
  const double step = cfg.effective_step();

  std::vector<double> best(xb.data());
  std::vector<double> best_loss(batch, -std::numeric_limits<double>::infinity());

  for (int r = 0; r < cfg.restarts; ++r) {
    Rng rng(derive_seed(cfg.seed, "pgd", static_cast<std::uint64_t>(r)));
    Tensor it = cfg.random_start ? add(xb, uniform_noise(xb.shape(), -cfg.eps, cfg.eps, rng)) : xb;
    if (cfg.clip_input) it = clamp(it, 0.0, 1.0);
    for (int s = 0; s < cfg.steps; ++s) {
      Tensor g = input_gradient(net, it, labels, bn_mode);
      it = signed_step_and_project(it, g, step, xb, cfg.eps, true, cfg.clip_input);
    }
    std::vector<double> loss = per_sample_ce(net, it, labels, bn_mode);
    for (std::size_t b = 0; b < batch; ++b) {
      if (loss[b] > best_loss[b]) {  // strict: ties keep the earlier restart
        best_loss[b] = loss[b];
        std::copy(it.data().begin() + static_cast<long>(b * per),
                  it.data().begin() + static_cast<long>((b + 1) * per),
                  best.begin() + static_cast<long>(b * per));
      }
    }
  }
  Tensor x_adv(xb.shape(), std::move(best));
  return {x_adv, in_ball_flags(x_adv, xb, cfg.eps)};
}

AdversarialBatch run_attack(Network& net, const Tensor& x, const std::vector<int>& labels,
                            const AttackConfig& cfg, Mode bn_mode) {
  cfg.validate();
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(net, x, labels, cfg, bn_mode);
    case AttackKind::rs_fgsm: return rs_fgsm(net, x, labels, cfg, bn_mode);
    case AttackKind::n_fgsm: return n_fgsm(net, x, labels, cfg, bn_mode);
    case AttackKind::pgd: return pgd(net, x, labels, cfg, bn_mode);
  }
  throw ConfigError("unreachable attack kind");
}

}  // namespace certkit
