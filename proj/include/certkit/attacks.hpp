#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "certkit/network.hpp"

namespace certkit {

enum class AttackKind { fgsm, rs_fgsm, n_fgsm, pgd };

AttackKind attack_kind_from_string(const std::string& s);
std::string attack_kind_to_string(AttackKind k);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double eps = 0.0;
  // Step size in input units. <= 0 selects the default for the kind:
  // eps for the single-step attacks, eps/4 for PGD.
  double step_size = 0.0;
  int steps = 1;     // forced to 1 for the single-step kinds
  int restarts = 1;  // PGD only
  double noise_multiplier = 2.0;  // N-FGSM samples from [-k*eps, k*eps]
  bool clip_input = false;        // clamp iterates to the [0,1] pixel domain
  bool random_start = true;       // PGD uniform start; off reduces PGD-1 to FGSM
  std::uint64_t seed = 0;

  double effective_step() const;
  void validate() const;  // throws ConfigError on bad combinations
};

struct AdversarialBatch {
  Tensor x_adv;
  // Per sample: ||x_adv - x||_inf <= eps. Always true except for N-FGSM,
  // which deliberately skips the projection and may leave the ball.
  std::vector<bool> in_ball;
};

AdversarialBatch fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                      const AttackConfig& cfg, Mode bn_mode = Mode::train);
AdversarialBatch rs_fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                         const AttackConfig& cfg, Mode bn_mode = Mode::train);
AdversarialBatch n_fgsm(Network& net, const Tensor& x, const std::vector<int>& labels,
                        const AttackConfig& cfg, Mode bn_mode = Mode::train);
AdversarialBatch pgd(Network& net, const Tensor& x, const std::vector<int>& labels,
                     const AttackConfig& cfg, Mode bn_mode = Mode::train);

AdversarialBatch run_attack(Network& net, const Tensor& x, const std::vector<int>& labels,
                            const AttackConfig& cfg, Mode bn_mode = Mode::train);

// Gradient of the summed cross-entropy w.r.t. the input, evaluated at `x`.
Tensor input_gradient(Network& net, const Tensor& x, const std::vector<int>& labels, Mode bn_mode);

}  // namespace certkit
