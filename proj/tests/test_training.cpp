#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "certkit/config.hpp"
#include "certkit/training.hpp"
#include "helpers.hpp"

using namespace certkit;
using testutil::approx;

namespace {

Dataset tiny_blobs(std::uint64_t seed = 3) {
  Dataset ds = synth_blobs(3, 40, 8, 0.04, seed);
  split_dataset(ds, 0.2, seed);
  return ds;
}

Network tiny_net(const Dataset& ds, std::uint64_t seed) {
  Network net = build_preset("mlp-small", ds.sample_shape(),
                             static_cast<std::size_t>(ds.num_classes));
  init_network(net, InitScheme::fan_in_uniform, seed);
  return net;
}

TrainPlan fast_plan(int epochs) {
  TrainPlan plan;
  plan.epochs = epochs;
  plan.batch_size = 32;
  plan.lr_peak = 0.05;
  plan.eval_pgd_steps = 3;
  return plan;
}

LossSpec fgsm_spec(double eps) {
  LossSpec spec;
  spec.family = LossFamily::adversarial;
  spec.attack.kind = AttackKind::fgsm;
  spec.attack.eps = eps;
  return spec;
}

bool params_equal(Network& a, Network& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->size() != pb[i]->size()) return false;
    for (std::size_t j = 0; j < pa[i]->size(); ++j) {
      if ((*pa[i])[j] != (*pb[i])[j]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("smoothed ramp shape properties") {
  CHECK(smoothed_ramp(0.0) <= 1e-3);
  CHECK(smoothed_ramp(1.0) == 1.0);
  double prev = -1;
  for (int i = 0; i <= 1000; ++i) {
    const double v = smoothed_ramp(i / 1000.0);
    CHECK(v >= prev);
    CHECK(v <= 1.0);
    prev = v;
  }
  // C0 continuity at the junction
  CHECK(std::fabs(smoothed_ramp(0.25 - 1e-9) - smoothed_ramp(0.25 + 1e-9)) < 1e-6);
}

TEST_CASE("cyclic schedule is piecewise linear with the exact peak") {
  TrainPlan plan;
  plan.lr_peak = 0.2;
  plan.peak_fraction = 0.5;
  const int total = 101;  // odd so a step lands exactly on the peak
  double best = 0;
  for (int s = 0; s < total; ++s) best = std::max(best, cyclic_lr(plan, s, total));
  CHECK(best == 0.2);
  CHECK(cyclic_lr(plan, 0, total) == 0.0);
  CHECK(cyclic_lr(plan, total - 1, total) == 0.0);
  // linearity on each side
  const double d1 = cyclic_lr(plan, 10, total) - cyclic_lr(plan, 9, total);
  const double d2 = cyclic_lr(plan, 20, total) - cyclic_lr(plan, 19, total);
  CHECK(approx(d1, d2, 1e-12));
}

TEST_CASE("long schedule decays at the configured epochs") {
  TrainPlan plan;
  plan.schedule = ScheduleKind::long_schedule;
  plan.epochs = 40;
  plan.lr = 5e-4;
  plan.lr_decay_at = {0.75, 0.875};
  plan.lr_decay_factor = 0.2;
  ScheduleState before = schedule_at(plan, 29 * 10, 10);
  ScheduleState after = schedule_at(plan, 30 * 10, 10);
  CHECK(approx(before.current_lr, 5e-4, 1e-15));
  CHECK(approx(after.current_lr, 1e-4, 1e-15));
  ScheduleState last = schedule_at(plan, 35 * 10, 10);
  CHECK(approx(last.current_lr, 2e-5, 1e-15));
}

TEST_CASE("zero epochs leaves the network untouched with empty metrics") {
  Dataset ds = tiny_blobs();
  Network net = tiny_net(ds, 1);
  Network ref = tiny_net(ds, 1);
  TrainPlan plan = fast_plan(0);
  TrainResult res = train(net, ds, plan, fgsm_spec(0.05), 9);
  CHECK(res.history.empty());
  CHECK(params_equal(net, ref));
}

TEST_CASE("forwabs with lambda 0 replays the pure adversarial trajectory") {
  Dataset ds = tiny_blobs();
  Network a = tiny_net(ds, 2);
  Network b = tiny_net(ds, 2);
  TrainPlan plan = fast_plan(2);

  LossSpec adv = fgsm_spec(0.05);
  LossSpec fw = adv;
  fw.family = LossFamily::forwabs;
  fw.lambda = 0.0;

  TrainResult ra = train(a, ds, plan, adv, 77);
  TrainResult rb = train(b, ds, plan, fw, 77);
  CHECK(params_equal(a, b));
  // metrics match except the forwabs_gap column is populated either way
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    CHECK(ra.history[i].pgd_acc == rb.history[i].pgd_acc);
    CHECK(ra.history[i].clean_acc == rb.history[i].clean_acc);
  }
}

TEST_CASE("mtl and exp at alpha 1 follow identical pure-IBP trajectories") {
  Dataset ds = tiny_blobs();
  Network a = tiny_net(ds, 4);
  Network b = tiny_net(ds, 4);
  TrainPlan plan = fast_plan(2);
  plan.lr_peak = 0.01;  // IBP losses are larger; keep steps tame

  LossSpec mtl = fgsm_spec(0.03);
  mtl.family = LossFamily::mtl_ibp;
  mtl.alpha = 1.0;
  LossSpec expibp = mtl;
  expibp.family = LossFamily::exp_ibp;

  TrainResult ra = train(a, ds, plan, mtl, 31);
  TrainResult rb = train(b, ds, plan, expibp, 31);
  CHECK(params_equal(a, b));
  CHECK(metrics_csv(ra.history) == metrics_csv(rb.history));
}

TEST_CASE("gradient clipping caps the global norm") {
  Rng rng(9001);
  std::vector<Tensor> grads;
  grads.push_back(testutil::random_tensor({30}, rng, -5, 5));
  grads.push_back(testutil::random_tensor({20}, rng, -5, 5));
  const double pre = clip_gradients(grads, 1.5);
  CHECK(pre > 1.5);
  double sq = 0;
  for (const auto& g : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  }
  CHECK(std::sqrt(sq) <= 1.5 + 1e-9);
  // no-op below the cap
  std::vector<Tensor> small;
  small.push_back(Tensor({2}, {0.1, 0.1}));
  clip_gradients(small, 10.0);
  CHECK(small[0][0] == 0.1);
}

TEST_CASE("bounding eps ramp is nondecreasing and hits the target exactly") {
  TrainPlan plan = fast_plan(4);
  plan.eps_ramp_epochs = 2;
  const int steps_per_epoch = 5;
  double prev = 0;
  for (int s = 0; s < 4 * steps_per_epoch; ++s) {
    ScheduleState st = schedule_at(plan, s, steps_per_epoch);
    CHECK(st.current_bounding_eps >= prev - 1e-15);
    prev = st.current_bounding_eps;
  }
  ScheduleState at_end = schedule_at(plan, 2 * steps_per_epoch - 1, steps_per_epoch);
  CHECK(at_end.current_bounding_eps == 1.0);
}

TEST_CASE("same seed and plan give byte-identical metrics") {
  Dataset ds = tiny_blobs();
  TrainPlan plan = fast_plan(2);
  LossSpec spec = fgsm_spec(0.04);
  spec.family = LossFamily::mtl_ibp;
  spec.alpha = 0.3;

  Network a = tiny_net(ds, 6);
  TrainResult ra = train(a, ds, plan, spec, 123);
  Network b = tiny_net(ds, 6);
  TrainResult rb = train(b, ds, plan, spec, 123);
  CHECK(metrics_csv(ra.history) == metrics_csv(rb.history));

  Network c = tiny_net(ds, 6);
  TrainResult rc = train(c, ds, plan, spec, 124);
  CHECK(metrics_csv(ra.history) != metrics_csv(rc.history));
}

TEST_CASE("evaluate degenerate radius and soundness ordering") {
  Dataset ds = tiny_blobs();
  Network net = tiny_net(ds, 8);
  TrainPlan plan = fast_plan(3);
  plan.lr_peak = 0.1;
  LossSpec spec = fgsm_spec(0.0);
  train(net, ds, plan, spec, 5);

  AttackConfig atk;
  atk.kind = AttackKind::pgd;
  atk.steps = 5;
  atk.seed = 11;

  EpochMetrics m0 = evaluate(net, ds, ds.val_idx, 0.0, atk);
  CHECK(m0.pgd_acc == m0.clean_acc);
  CHECK(m0.ibp_cert_acc <= m0.pgd_acc + 1e-9);

  EpochMetrics m = evaluate(net, ds, ds.val_idx, 0.05, atk);
  CHECK(m.ibp_cert_acc <= m.pgd_acc + 1e-9);
}

TEST_CASE("an untrained network sits near chance level") {
  Dataset ds = synth_blobs(4, 100, 10, 0.05, 77);
  split_dataset(ds, 0.0, 77);
  Network net = tiny_net(ds, 909);
  AttackConfig atk;
  atk.kind = AttackKind::pgd;
  EpochMetrics m = evaluate(net, ds, ds.train_idx, 0.0, atk);
  CHECK(m.clean_acc >= 0.25 - 0.05 - 0.12);  // chance 1/4 with slack
  CHECK(m.clean_acc <= 0.25 + 0.05 + 0.12);
}

TEST_CASE("co_probe fixtures") {
  auto mk = [](std::vector<std::pair<double, double>> pts) {
    std::vector<EpochMetrics> h;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      EpochMetrics m;
      m.epoch = static_cast<int>(i);
      m.attack_train_acc = pts[i].first;
      m.pgd_acc = pts[i].second;
      h.push_back(m);
    }
    return h;
  };

  // both series rising together: healthy run
  auto healthy = mk({{0.3, 0.25}, {0.5, 0.4}, {0.6, 0.5}, {0.7, 0.55}, {0.75, 0.6}});
  CHECK_FALSE(co_probe(healthy).co_detected);

  // pgd collapses while the train attack accuracy spikes
  auto co = mk({{0.5, 0.5}, {0.6, 0.55}, {0.7, 0.7}, {0.75, 0.70}, {0.85, 0.3},
                {0.95, 0.02}, {0.95, 0.01}, {0.96, 0.02}});
  CoVerdict v = co_probe(co);
  CHECK(v.co_detected);
  CHECK(v.onset_epoch >= 5);
  CHECK(v.onset_epoch <= 6);

  // verdict stable within one epoch across smoothing windows 1 and 3
  CoVerdict v1 = co_probe(co, 0.05, 0.60, 1);
  CHECK(v1.co_detected);
  CHECK(std::abs(v1.onset_epoch - v.onset_epoch) <= 1);

  // configurable thresholds: an extreme floor suppresses the flag
  CHECK_FALSE(co_probe(co, 0.001, 0.99, 3).co_detected);
}

TEST_CASE("toy sweep reproduces the fixed-point structure") {
  std::vector<int> depths = {2, 6, 18};
  std::vector<double> ws = {0.0, 0.1, 0.3, 0.6, 1.0};
  std::vector<std::pair<LossFamily, double>> fams = {{LossFamily::mtl_ibp, 0.01},
                                                     {LossFamily::exp_ibp, 0.1}};
  auto rows = toy_sweep(depths, ws, fams);
  REQUIRE(rows.size() == depths.size() * ws.size() * fams.size());

  for (const auto& r : rows) {
    // adversarial component constant: z(x_adv) = -2 regardless of w,n
    CHECK(approx(r.adv_part, rows.front().adv_part, 1e-9));
    if (r.w == 0.0) CHECK(approx(r.min_lower_bound, -2.0, 1e-9));
  }
  // IBP part nondecreasing in w for every depth, and in depth for every w
  for (int n : depths) {
    double prev = -1;
    for (double w : ws) {
      for (const auto& r : rows) {
        if (r.depth == n && r.w == w && r.family == "mtl-ibp") {
          if (prev >= 0) CHECK(r.ibp_part >= prev - 1e-9);
          prev = r.ibp_part;
        }
      }
    }
  }
  for (double w : ws) {
    double prev = -1;
    for (int n : depths) {
      for (const auto& r : rows) {
        if (r.depth == n && r.w == w && r.family == "exp-ibp") {
          if (prev >= 0) CHECK(r.ibp_part >= prev - 1e-9);
          prev = r.ibp_part;
        }
      }
    }
  }
  // CSV round trip sanity
  std::string csv = toy_sweep_csv(rows);
  CHECK(csv.find("depth,w,family,alpha,loss") == 0);
}

TEST_CASE("training aborts cleanly on numeric blowup") {
  Dataset ds = tiny_blobs();
  Network net = tiny_net(ds, 3);
  // poison a weight so bounds go non-finite
  auto params = net.parameters();
  std::vector<double> bad(params[0]->size(), 1e308);
  *params[0] = Tensor(params[0]->shape(), std::move(bad));
  TrainPlan plan = fast_plan(1);
  LossSpec spec = fgsm_spec(0.3);
  spec.family = LossFamily::ibp;
  TrainResult res = train(net, ds, plan, spec, 2);
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("epoch 0") != std::string::npos);
}
