#include "certkit/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "certkit/rng.hpp"

namespace certkit {

void TrainPlan::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (lr_peak < 0 || lr < 0) throw ConfigError("train.lr must be >= 0");
  if (peak_fraction <= 0 || peak_fraction >= 1) {
    throw ConfigError("train.peak_fraction must be in (0,1)");
  }
  if (grad_clip < 0) throw ConfigError("train.grad_clip must be >= 0");
  if (eps_ramp_epochs < 0 || coeff_ramp_epochs < 0) {
    throw ConfigError("train ramp epochs must be >= 0");
  }
  for (double f : lr_decay_at) {
    if (f <= 0 || f >= 1) throw ConfigError("train.lr_decay_at fractions must be in (0,1)");
  }
}

// Exponential segment beta*(2^(16t)-1) on [0, 0.25], then linear to (1,1).
// beta is chosen so the two segments join with matching slope at t=0.25.
double smoothed_ramp(double t) {
  t = std::min(1.0, std::max(0.0, t));
  constexpr double kJoin = 0.25;
  const double ln2 = 0.6931471805599453;
  // slope match: beta*16*ln2*16 = (1 - 15*beta)/0.75
  const double beta = 1.0 / (15.0 + 0.75 * 256.0 * ln2);
  const double f_join = beta * 15.0;
  if (t <= kJoin) return beta * (std::exp(16.0 * t * ln2) - 1.0);
  return f_join + (t - kJoin) / (1.0 - kJoin) * (1.0 - f_join);
}

double cyclic_lr(const TrainPlan& plan, int step, int total_steps) {
  if (total_steps <= 1) return plan.lr_peak;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  if (t <= plan.peak_fraction) return plan.lr_peak * t / plan.peak_fraction;
  return plan.lr_peak * (1.0 - t) / (1.0 - plan.peak_fraction);
}

namespace {

double long_lr(const TrainPlan& plan, int epoch) {
  double lr = plan.lr;
  for (double frac : plan.lr_decay_at) {
    if (epoch >= static_cast<int>(frac * plan.epochs)) lr *= plan.lr_decay_factor;
  }
  return lr;
}

double ramp_fraction(int step, int ramp_epochs, int steps_per_epoch) {
  if (ramp_epochs <= 0) return 1.0;
  const int ramp_steps = ramp_epochs * steps_per_epoch;
  if (ramp_steps <= 0) return 1.0;
  const double t = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(ramp_steps));
  return smoothed_ramp(t);
}

}  // namespace

ScheduleState schedule_at(const TrainPlan& plan, int step, int steps_per_epoch) {
  ScheduleState st;
  st.step = step;
  st.epoch = steps_per_epoch > 0 ? step / steps_per_epoch : 0;
  const int total = plan.epochs * steps_per_epoch;
  st.current_lr = plan.schedule == ScheduleKind::cyclic ? cyclic_lr(plan, step, total)
                                                        : long_lr(plan, st.epoch);
  st.current_bounding_eps = ramp_fraction(step, plan.eps_ramp_epochs, steps_per_epoch);
  st.current_coeff_fraction = ramp_fraction(step, plan.coeff_ramp_epochs, steps_per_epoch);
  return st;
}

void SgdOptimizer::step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                        double lr) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    std::vector<double> next(p.size());
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j] + wd_ * p[j];
      v[j] = momentum_ * v[j] + g;
      next[j] = p[j] - lr * v[j];
    }
    p = Tensor(p.shape(), std::move(next));
  }
}

void AdamOptimizer::step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                         double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    std::vector<double> next(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      next[j] = p[j] - lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
    }
    p = Tensor(p.shape(), std::move(next));
  }
}

double clip_gradients(std::vector<Tensor>& grads, double cap) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (cap > 0 && norm > cap) {
    const double s = cap / norm;
    for (Tensor& g : grads) {
      std::vector<double> d(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * s;
      g = Tensor(g.shape(), std::move(d));
    }
  }
  return norm;
}

namespace {

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

double accuracy_of(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
  std::size_t hits = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (logits[b * k + i] > logits[b * k + arg]) arg = i;
    }
    if (arg == static_cast<std::size_t>(labels[b])) ++hits;
  }
  return batch == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(batch);
}

}  // namespace

EpochMetrics evaluate(Network& net, const Dataset& ds, const std::vector<std::size_t>& idx,
                      double eps, const AttackConfig& eval_attack, const BoundOptions& opts) {
  EpochMetrics m;
  if (idx.empty()) return m;
  Tensor x = ds.gather(idx);
  std::vector<int> y = ds.gather_labels(idx);

  Tensor clean_logits = net.forward(x, Mode::eval, nullptr);
  m.clean_acc = accuracy_of(clean_logits, y);

  if (eps > 0) {
    AttackConfig cfg = eval_attack;
    cfg.eps = eps;
    AdversarialBatch adv = run_attack(net, x, y, cfg, Mode::eval);
    Tensor adv_logits = net.forward(adv.x_adv, Mode::eval, nullptr);
    m.pgd_acc = accuracy_of(adv_logits, y);
  } else {
    m.pgd_acc = m.clean_acc;
  }

  BoundsState st = ibp_bounds(net, x, y, eps, nullptr, opts);
  std::vector<double> mins = min_logit_lower_bounds(st, y);
  std::size_t certified = 0;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    // A nonnegative elided bound implies correct classification, so no
    // separate prediction check is needed.
    if (mins[b] >= 0.0) ++certified;
  }
  m.ibp_cert_acc = static_cast<double>(certified) / static_cast<double>(idx.size());
  Tensor ibp_ce = mean(softmax_cross_entropy(neg(st.final_lower), y));
  m.ibp_loss_mean = ibp_ce.value();
  return m;
}

TrainResult train(Network& net, const Dataset& ds, const TrainPlan& plan, const LossSpec& spec,
                  std::uint64_t seed, std::ostream* log) {
  plan.validate();
  spec.validate();
  TrainResult result;
  if (plan.epochs == 0) return result;
  if (ds.train_idx.empty()) throw ConfigError("train called on a dataset without a train split");

  const int steps_per_epoch =
      static_cast<int>((ds.train_idx.size() + static_cast<std::size_t>(plan.batch_size) - 1) /
                       static_cast<std::size_t>(plan.batch_size));

  SgdOptimizer sgd(plan.momentum, plan.weight_decay);
  AdamOptimizer adam;

  AttackConfig eval_cfg;
  eval_cfg.kind = AttackKind::pgd;
  eval_cfg.eps = spec.attack.eps;
  eval_cfg.steps = plan.eval_pgd_steps;
  eval_cfg.restarts = plan.eval_pgd_restarts;
  eval_cfg.clip_input = spec.attack.clip_input;
  eval_cfg.seed = derive_seed(seed, "eval-attack");

  int step = 0;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto order = shuffled(ds.train_idx, derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));

    double attack_hits = 0.0, attack_total = 0.0;
    ScheduleState st;

    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(plan.batch_size)) {
      const std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(plan.batch_size));
      std::vector<std::size_t> batch_idx(order.begin() + static_cast<long>(off),
                                         order.begin() + static_cast<long>(end));
      Tensor x = ds.gather(batch_idx);
      std::vector<int> y = ds.gather_labels(batch_idx);

      st = schedule_at(plan, step, steps_per_epoch);

      LossSpec step_spec = spec;
      step_spec.attack.seed = derive_seed(seed, "attack", static_cast<std::uint64_t>(step));
      step_spec.bounding_eps = spec.effective_bounding_eps() * st.current_bounding_eps;
      step_spec.alpha = spec.alpha * st.current_coeff_fraction;
      step_spec.lambda = spec.lambda * st.current_coeff_fraction;

      Tape tape;
      ParamLift lift(tape);
      auto params = net.parameters();
      // Lift every parameter up front so unused ones read back zero grads.
      for (Tensor* p : params) lift.lift(*p);
      LossValue loss;
      try {
        loss = compute_loss(net, x, y, step_spec, &lift, Mode::train);
      } catch (const NumericError& e) {
        result.aborted = true;
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << " step " << step << " (batch offset " << off
           << "): " << e.what();
        result.abort_reason = os.str();
        if (log) *log << result.abort_reason << "\n";
        return result;
      }

      if (loss.x_adv) {
        Tensor adv_logits = net.forward(*loss.x_adv, Mode::eval, nullptr);
        attack_hits += accuracy_of(adv_logits, y) * static_cast<double>(y.size());
        attack_total += static_cast<double>(y.size());
      }

      Gradients grads = tape.backward(loss.total);
      std::vector<Tensor> gs;
      gs.reserve(params.size());
      for (Tensor* p : params) {
        gs.push_back(grads.wrt(lift.lift(*p)));
      }
      clip_gradients(gs, plan.grad_clip);
      if (plan.optimizer == OptimizerKind::sgd) {
        sgd.step(params, gs, st.current_lr);
      } else {
        adam.step(params, gs, st.current_lr);
      }
      ++step;
    }

    EpochMetrics m;
    const auto& eval_idx = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
    std::vector<std::size_t> subset = eval_idx;
    if (plan.eval_subset > 0 && plan.eval_subset < subset.size()) subset.resize(plan.eval_subset);
    m = evaluate(net, ds, subset, spec.attack.eps, eval_cfg, spec.bound_opts);
    m.epoch = epoch;
    m.attack_train_acc = attack_total > 0 ? attack_hits / attack_total : 0.0;
    {
      BoundOptions opts = spec.bound_opts;
      opts.stats = BnStats::running;
      ForwAbsGap gap = forwabs_gap(net, spec.effective_bounding_eps(), nullptr, opts);
      m.forwabs_gap = gap.total.value();
    }
    m.lr = st.current_lr;
    m.eps_bound = spec.effective_bounding_eps() * st.current_bounding_eps;
    const auto t1 = std::chrono::steady_clock::now();
    const long wall =
        static_cast<long>(std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count());
    m.wall_ms = plan.measure_wall ? wall : 0;
    result.history.push_back(m);
    if (log) {
      *log << "epoch " << epoch << ": clean " << m.clean_acc << ", attack-train "
           << m.attack_train_acc << ", pgd " << m.pgd_acc << ", ibp-cert " << m.ibp_cert_acc
           << ", ibp-loss " << m.ibp_loss_mean << ", lr " << m.lr << ", eps-bound " << m.eps_bound
           << ", wall-ms " << wall << "\n";
    }
  }
  return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  os << "epoch,clean_acc,attack_train_acc,pgd_acc,ibp_cert_acc,ibp_loss,forwabs_gap,lr,eps_bound,"
        "wall_ms\n";
  char buf[420];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%ld\n",
                  m.epoch, m.clean_acc, m.attack_train_acc, m.pgd_acc, m.ibp_cert_acc,
                  m.ibp_loss_mean, m.forwabs_gap, m.lr, m.eps_bound, m.wall_ms);
    os << buf;
  }
  return os.str();
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open metrics file for writing: " + path);
  os << metrics_csv(history);
  if (!os) throw IoError("failed writing metrics file: " + path);
}

CoVerdict co_probe(const std::vector<EpochMetrics>& history, double pgd_threshold,
                   double train_threshold, int smooth_window) {
  CoVerdict v;
  if (history.empty()) return v;
  const int n = static_cast<int>(history.size());
  const int w = std::max(1, smooth_window);
  auto smooth = [&](auto getter, int i) {
    // centered moving average, truncated at the ends
    const int lo = std::max(0, i - w / 2);
    const int hi = std::min(n - 1, i + w / 2);
    double acc = 0;
    for (int j = lo; j <= hi; ++j) acc += getter(history[static_cast<std::size_t>(j)]);
    return acc / static_cast<double>(hi - lo + 1);
  };
  for (int i = 0; i < n; ++i) {
    const double pgd = smooth([](const EpochMetrics& m) { return m.pgd_acc; }, i);
    const double atk = smooth([](const EpochMetrics& m) { return m.attack_train_acc; }, i);
    if (pgd < pgd_threshold && atk > train_threshold) {
      v.co_detected = true;
      v.onset_epoch = history[static_cast<std::size_t>(i)].epoch;
      break;
    }
  }
  return v;
}

std::vector<ToySweepRow> toy_sweep(const std::vector<int>& depths, const std::vector<double>& ws,
                                   const std::vector<std::pair<LossFamily, double>>& families) {
  std::vector<ToySweepRow> rows;
  const Tensor x0({2}, {-5.0, 5.0});
  const Tensor x_adv({2}, {0.0, 0.0});
  const std::vector<int> y = {1};
  for (int n : depths) {
    for (double w : ws) {
      if (w < 0) throw ConfigError("toy sweep requires w >= 0");
      Network net = build_toy({n, w});
      BoundsState st = ibp_bounds(net, x0, y, 10.0, nullptr);
      const double min_lb = min_logit_lower_bounds(st, y)[0];
      for (const auto& [family, alpha] : families) {
        LossSpec spec;
        spec.family = family;
        if (family == LossFamily::forwabs) {
          spec.lambda = alpha;  // the sweep coefficient plays lambda here
        } else {
          spec.alpha = alpha;
        }
        spec.attack.kind = AttackKind::pgd;
        spec.attack.eps = 10.0;
        LossValue v = compute_loss(net, x0, y, spec, nullptr, Mode::eval, &x_adv);
        ToySweepRow row;
        row.depth = n;
        row.w = w;
        row.family = loss_family_to_string(family);
        row.alpha = alpha;
        row.loss = v.total.value();
        row.adv_part = v.adversarial_part.value_or(0.0);
        row.ibp_part = v.ibp_part.value_or(0.0);
        row.min_lower_bound = min_lb;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::string toy_sweep_csv(const std::vector<ToySweepRow>& rows) {
  std::ostringstream os;
  os << "depth,w,family,alpha,loss,adv_part,ibp_part,min_lower_bound\n";
  char buf[360];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%s,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.depth, r.w,
                  r.family.c_str(), r.alpha, r.loss, r.adv_part, r.ibp_part, r.min_lower_bound);
    os << buf;
  }
  return os.str();
}

}  // namespace certkit
