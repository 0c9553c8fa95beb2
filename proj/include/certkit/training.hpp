#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "certkit/data.hpp"
#include "certkit/losses.hpp"

namespace certkit {

enum class ScheduleKind { cyclic, long_schedule };
enum class OptimizerKind { sgd, adam };

struct TrainPlan {
  ScheduleKind schedule = ScheduleKind::cyclic;
  int epochs = 10;
  int batch_size = 128;
  OptimizerKind optimizer = OptimizerKind::sgd;

  // cyclic: lr rises linearly 0 -> lr_peak over peak_fraction of training,
  // then back down to 0. long: constant lr with multiplicative decays.
  double lr_peak = 0.2;
  double peak_fraction = 0.5;
  double lr = 5e-4;                       // long schedule base rate
  std::vector<double> lr_decay_at = {0.75, 0.875};  // fractions of total epochs
  double lr_decay_factor = 0.2;

  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 0.0;  // l2 cap; 0 disables

  // Ramp of the bounding radius and of the loss coefficient, both driven by
  // the exponential-then-linear curve. 0 disables the ramp (full values from
  // the first step).
  int eps_ramp_epochs = 0;
  int coeff_ramp_epochs = 0;

  // Per-epoch validation metrics.
  int eval_pgd_steps = 10;
  int eval_pgd_restarts = 1;
  std::size_t eval_subset = 0;  // 0 = whole validation split

  // When false the wall_ms CSV column is written as 0 so that equal seeds
  // give byte-identical metrics files. Real timings go to the run log.
  bool measure_wall = false;

  void validate() const;
};

struct ScheduleState {
  int step = 0;
  int epoch = 0;
  double current_lr = 0.0;
  double current_bounding_eps = 0.0;
  double current_coeff_fraction = 1.0;
};

struct EpochMetrics {
  int epoch = 0;
  double clean_acc = 0.0;
  double attack_train_acc = 0.0;
  double pgd_acc = 0.0;
  double ibp_cert_acc = 0.0;
  double ibp_loss_mean = 0.0;
  double forwabs_gap = 0.0;
  double lr = 0.0;
  double eps_bound = 0.0;
  long wall_ms = 0;
};

// Continuous nondecreasing ramp with f(0)=0 and f(1)=1: an exponential
// segment on [0, 0.25] joined C1-continuously to a linear segment.
double smoothed_ramp(double t);

// Schedule queries, exposed for tests; step indices are 0-based.
double cyclic_lr(const TrainPlan& plan, int step, int total_steps);
ScheduleState schedule_at(const TrainPlan& plan, int step, int steps_per_epoch);

struct TrainResult {
  std::vector<EpochMetrics> history;
  bool aborted = false;
  std::string abort_reason;
};

// Full training run over ds.train_idx with per-epoch metrics on ds.val_idx.
// Deterministic for a fixed (seed, plan, spec, data). Non-finite losses abort
// with the batch index and component values in the exception message.
TrainResult train(Network& net, const Dataset& ds, const TrainPlan& plan, const LossSpec& spec,
                  std::uint64_t seed, std::ostream* log = nullptr);

// Clean / PGD / IBP-certified accuracy over the given indices.
EpochMetrics evaluate(Network& net, const Dataset& ds, const std::vector<std::size_t>& idx,
                      double eps, const AttackConfig& eval_attack,
                      const BoundOptions& opts = {});

std::string metrics_csv(const std::vector<EpochMetrics>& history);
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history);

struct CoVerdict {
  bool co_detected = false;
  int onset_epoch = -1;
};

// Flags catastrophic overfitting: smoothed PGD accuracy below pgd_threshold
// while smoothed attack-train accuracy exceeds train_threshold.
CoVerdict co_probe(const std::vector<EpochMetrics>& history, double pgd_threshold = 0.05,
                   double train_threshold = 0.60, int smooth_window = 3);

struct ToySweepRow {
  int depth = 0;
  double w = 0.0;
  std::string family;
  double alpha = 0.0;
  double loss = 0.0;
  double adv_part = 0.0;
  double ibp_part = 0.0;
  double min_lower_bound = 0.0;
};

// The fixed-point sensitivity sweep: x0 = [-5,5], y = 1, eps = 10 and
// x_adv pinned to the origin, for every (depth, w, family) combination.
std::vector<ToySweepRow> toy_sweep(const std::vector<int>& depths, const std::vector<double>& ws,
                                   const std::vector<std::pair<LossFamily, double>>& families);
std::string toy_sweep_csv(const std::vector<ToySweepRow>& rows);

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}
  void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);

 private:
  double momentum_, wd_;
  std::vector<std::vector<double>> velocity_;
};

class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so the global l2 norm is at most `cap` (no-op when
// cap <= 0). Returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double cap);

}  // namespace certkit
