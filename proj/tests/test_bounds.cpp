#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "certkit/attacks.hpp"
#include "certkit/bounds.hpp"
#include "helpers.hpp"

using namespace certkit;
using testutil::approx;
using testutil::approx_rel;
using testutil::random_tensor;

TEST_CASE("eps = 0 reduces the elided bounds to exact logit differences") {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    auto net = testutil::random_mlp({4, 9, 9, 3}, rng);
    Tensor x = random_tensor({2, 4}, rng);
    std::vector<int> y = {0, 2};
    BoundsState st = ibp_bounds(net, x, y, 0.0);
    Tensor logits = net.forward(x, Mode::eval);
    Tensor z = logit_differences(logits, y);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::fabs(st.final_lower[i] - z[i]) < 1e-9);
    }
  }
}

TEST_CASE("single affine layer bounds match the hand computation") {
  Network net;
  net.input_shape = {1};
  net.num_classes = 1;
  net.layers.push_back(Layer::affine(Tensor({1, 1}, {1.0}), Tensor({1}, {0.0})));
  BoundsState st = ibp_bounds(net, Tensor({1}, {0.0}), {0}, 1.0);
  REQUIRE(st.layer_lower.size() == 1);
  CHECK(approx(st.layer_lower[0][0], -1.0, 1e-12));
  CHECK(approx(st.layer_upper[0][0], 1.0, 1e-12));
  // brute force over the corners x' in {-1, 1}
  double lo = 1e300, hi = -1e300;
  for (double xp : {-1.0, 1.0}) {
    Tensor l = net.forward(Tensor({1}, {xp}), Mode::eval);
    lo = std::min(lo, l[0]);
    hi = std::max(hi, l[0]);
  }
  CHECK(approx(st.layer_lower[0][0], lo, 1e-12));
  CHECK(approx(st.layer_upper[0][0], hi, 1e-12));
}

TEST_CASE("soundness: sampled points never dip below the lower bounds") {
  Rng rng(2025);
  int violations = 0;
  for (int trial = 0; trial < 25; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 4, 16);
    auto net = testutil::random_mlp(widths, rng);
    Tensor x = random_tensor({1, widths.front()}, rng);
    const int y = static_cast<int>(rng.below(widths.back()));
    const double eps = rng.uniform(0.01, 0.3);
    BoundsState st = ibp_bounds(net, x, {y}, eps);
    for (int s = 0; s < 100; ++s) {
      std::vector<double> xp(x.data());
      for (auto& v : xp) v += rng.uniform(-eps, eps);
      Tensor logits = net.forward(Tensor(x.shape(), std::move(xp)), Mode::eval);
      Tensor z = logit_differences(logits, {y});
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] < st.final_lower[i] - 1e-6) ++violations;
      }
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("elide_last_layer worked examples") {
  Network net;
  net.input_shape = {2};
  net.num_classes = 2;
  net.layers.push_back(Layer::affine(Tensor::identity(2), Tensor::zeros({2})));
  auto [w, b] = elide_last_layer(net, 1);
  CHECK(w.shape() == Shape{2, 2});
  CHECK(w[0] == -1.0);
  CHECK(w[1] == 1.0);
  CHECK(w[2] == 0.0);
  CHECK(w[3] == 0.0);
  CHECK(b[0] == 0.0);
  CHECK(b[1] == 0.0);
  CHECK_THROWS_AS(elide_last_layer(net, 5), DomainError);
}

TEST_CASE("the elided row for the label is always zero") {
  Rng rng(55);
  for (int trial = 0; trial < 20; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 3, 10);
    auto net = testutil::random_mlp(widths, rng);
    const int y = static_cast<int>(rng.below(widths.back()));
    auto [w, b] = elide_last_layer(net, y);
    const std::size_t m = w.shape()[1];
    for (std::size_t p = 0; p < m; ++p) {
      CHECK(w[static_cast<std::size_t>(y) * m + p] == 0.0);
    }
    CHECK(b[static_cast<std::size_t>(y)] == 0.0);
  }
}

TEST_CASE("elided bound dominates the naive bound-then-difference route") {
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 4, 12);
    auto net = testutil::random_mlp(widths, rng);
    Tensor x = random_tensor({1, widths.front()}, rng);
    const int y = static_cast<int>(rng.below(widths.back()));
    const double eps = rng.uniform(0.01, 0.2);
    BoundsState st = ibp_bounds(net, x, {y}, eps);
    // naive: bound the logits, then difference the interval ends
    const Tensor& lo = st.layer_lower.back();
    const Tensor& hi = st.layer_upper.back();
    const std::size_t k = widths.back();
    for (std::size_t i = 0; i < k; ++i) {
      if (i == static_cast<std::size_t>(y)) continue;
      const double naive = lo[static_cast<std::size_t>(y)] - hi[i];
      CHECK(st.final_lower[i] >= naive - 1e-9);
    }
  }
}

TEST_CASE("forwabs hand example") {
  Network net;
  net.input_shape = {2};
  net.num_classes = 1;
  net.layers.push_back(Layer::affine(Tensor({1, 2}, {1.0, -1.0}), Tensor::zeros({1})));
  net.layers.push_back(Layer::make_relu());
  net.layers.push_back(Layer::affine(Tensor({1, 1}, {2.0}), Tensor::zeros({1})));
  ForwAbsGap gap = forwabs_gap(net, 0.1);
  REQUIRE(gap.per_layer.size() == 2);
  CHECK(approx(gap.per_layer[0][0], 0.4, 1e-12));  // 2*0.1*(1+1)
  CHECK(approx(gap.per_layer[1][0], 0.8, 1e-12));  // 2*0.4
  CHECK(approx(gap.total.value(), 0.8, 1e-12));

  ForwAbsGap zero = forwabs_gap(net, 0.0);
  CHECK(zero.total.value() == 0.0);
}

TEST_CASE("forwabs equals the IBP gap on deep linear networks") {
  Rng rng(808);
  for (int trial = 0; trial < 30; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 5, 14);
    auto net = testutil::random_mlp(widths, rng, 1.0, /*with_relu=*/false);
    const double eps = rng.uniform(0.01, 0.5);
    ForwAbsGap gap = forwabs_gap(net, eps);
    Tensor x = random_tensor({1, widths.front()}, rng);
    BoundsState st = ibp_bounds(net, x, {0}, eps);
    const Tensor& lo = st.layer_lower.back();
    const Tensor& hi = st.layer_upper.back();
    const Tensor& d = gap.per_layer.back();
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(approx_rel(d[i], hi[i] - lo[i], 1e-9));
    }
  }
}

TEST_CASE("forwabs dominates the IBP gap on ReLU networks") {
  Rng rng(909);
  for (int trial = 0; trial < 30; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 5, 14);
    auto net = testutil::random_mlp(widths, rng);
    const double eps = rng.uniform(0.01, 0.5);
    ForwAbsGap gap = forwabs_gap(net, eps);
    Tensor x = random_tensor({1, widths.front()}, rng);
    BoundsState st = ibp_bounds(net, x, {0}, eps);
    const Tensor& lo = st.layer_lower.back();
    const Tensor& hi = st.layer_upper.back();
    const Tensor& d = gap.per_layer.back();
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(d[i] >= (hi[i] - lo[i]) - 1e-9);
    }
  }
}

TEST_CASE("forwabs gap is nondecreasing under entrywise weight growth") {
  Rng rng(4141);
  auto net = testutil::random_mlp({4, 8, 8, 3}, rng);
  ForwAbsGap before = forwabs_gap(net, 0.1);
  for (Tensor* p : net.parameters()) {
    std::vector<double> scaled(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) scaled[i] = (*p)[i] * 1.5;
    *p = Tensor(p->shape(), std::move(scaled));
  }
  ForwAbsGap after = forwabs_gap(net, 0.1);
  CHECK(after.total.value() >= before.total.value());
}

TEST_CASE("bounds are monotone in eps") {
  Rng rng(660);
  for (int trial = 0; trial < 20; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 4, 12);
    auto net = testutil::random_mlp(widths, rng);
    Tensor x = random_tensor({1, widths.front()}, rng);
    const int y = static_cast<int>(rng.below(widths.back()));
    const double e1 = rng.uniform(0.0, 0.2);
    const double e2 = e1 + rng.uniform(0.0, 0.3);
    BoundsState s1 = ibp_bounds(net, x, {y}, e1);
    BoundsState s2 = ibp_bounds(net, x, {y}, e2);
    for (std::size_t i = 0; i < s1.final_lower.size(); ++i) {
      CHECK(s1.final_lower[i] >= s2.final_lower[i] - 1e-9);
    }
  }
}

TEST_CASE("certification degenerate cases and monotonicity") {
  Rng rng(31337);
  auto net = testutil::random_mlp({3, 10, 10, 3}, rng);
  Tensor x = random_tensor({3}, rng);
  Tensor logits = net.forward(x, Mode::eval);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < 3; ++i) {
    if (logits[i] > logits[arg]) arg = i;
  }
  const int correct = static_cast<int>(arg);
  const int wrong = (correct + 1) % 3;
  CHECK(ibp_certified(net, x, correct, 0.0));
  CHECK_FALSE(ibp_certified(net, x, wrong, 0.0));

  // certified at eps implies certified at every smaller eps
  for (int trial = 0; trial < 10; ++trial) {
    auto w2 = testutil::random_widths(rng, 2, 3, 8);
    auto n2 = testutil::random_mlp(w2, rng, 0.6);
    Tensor p = random_tensor({1, w2.front()}, rng);
    Tensor l2 = n2.forward(p, Mode::eval);
    std::size_t best = 0;
    for (std::size_t i = 1; i < w2.back(); ++i) {
      if (l2[i] > l2[best]) best = i;
    }
    double eps_hi = 0.2;
    if (ibp_certified(n2, p, static_cast<int>(best), eps_hi)) {
      for (double frac : {0.75, 0.5, 0.25, 0.0}) {
        CHECK(ibp_certified(n2, p, static_cast<int>(best), eps_hi * frac));
      }
    }
  }
}

TEST_CASE("certified points resist PGD at the same radius") {
  Rng rng(7117);
  int tested = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 3, 10);
    auto net = testutil::random_mlp(widths, rng, 0.5);
    Tensor x = random_tensor({1, widths.front()}, rng);
    Tensor logits = net.forward(x, Mode::eval);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < widths.back(); ++i) {
      if (logits[i] > logits[arg]) arg = i;
    }
    const int y = static_cast<int>(arg);
    const double eps = 0.05;
    if (!ibp_certified(net, x, y, eps)) continue;
    ++tested;
    AttackConfig cfg;
    cfg.kind = AttackKind::pgd;
    cfg.eps = eps;
    cfg.steps = 50;
    cfg.restarts = 2;
    cfg.seed = 99 + static_cast<std::uint64_t>(trial);
    AdversarialBatch adv = pgd(net, x, {y}, cfg, Mode::eval);
    Tensor adv_logits = net.forward(adv.x_adv, Mode::eval);
    std::size_t adv_arg = 0;
    for (std::size_t i = 1; i < widths.back(); ++i) {
      if (adv_logits[i] > adv_logits[adv_arg]) adv_arg = i;
    }
    CHECK(adv_arg == static_cast<std::size_t>(y));
  }
  CHECK(tested > 0);
}

TEST_CASE("gradients of mean lower bound and forwabs total match finite differences") {
  Rng rng(98);
  for (int trial = 0; trial < 5; ++trial) {
    auto widths = testutil::random_widths(rng, 2, 4, 8);
    auto net = testutil::random_mlp(widths, rng);
    Tensor x = random_tensor({1, widths.front()}, rng);
    const int y = static_cast<int>(rng.below(widths.back()));
    const double eps = 0.07;

    auto analytic_l = testutil::param_gradients(net, [&](ParamLift& lift) {
      BoundsState st = ibp_bounds(net, x, {y}, eps, &lift);
      return mean(st.final_lower);
    });
    auto eval_l = [&]() {
      BoundsState st = ibp_bounds(net, x, {y}, eps);
      return mean(st.final_lower).value();
    };
    CHECK(testutil::max_grad_rel_error(net, eval_l, analytic_l) <= 1e-4);

    auto analytic_g = testutil::param_gradients(net, [&](ParamLift& lift) {
      return forwabs_gap(net, eps, &lift).total;
    });
    auto eval_g = [&]() { return forwabs_gap(net, eps).total.value(); };
    CHECK(testutil::max_grad_rel_error(net, eval_g, analytic_g) <= 1e-4);
  }
}

TEST_CASE("conv layers bound soundly") {
  Rng rng(246);
  Network net;
  net.input_shape = {1, 6, 6};
  net.num_classes = 3;
  net.layers.push_back(Layer::conv(testutil::random_weights({4, 1, 3, 3}, rng, 0.4),
                                   random_tensor({4}, rng, -0.1, 0.1), 1, 1));
  net.layers.push_back(Layer::make_relu());
  net.layers.push_back(Layer::make_flatten());
  net.layers.push_back(Layer::affine(testutil::random_weights({3, 4 * 6 * 6}, rng, 0.1),
                                     random_tensor({3}, rng, -0.1, 0.1)));
  Tensor x = random_tensor({1, 1, 6, 6}, rng, 0, 1);
  const double eps = 0.08;
  BoundsState st = ibp_bounds(net, x, {1}, eps);
  for (int s = 0; s < 200; ++s) {
    std::vector<double> xp(x.data());
    for (auto& v : xp) v += rng.uniform(-eps, eps);
    Tensor logits = net.forward(Tensor(x.shape(), std::move(xp)), Mode::eval);
    Tensor z = logit_differences(logits, {1});
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] >= st.final_lower[i] - 1e-6);
  }
}

TEST_CASE("non-finite bounds raise NumericError") {
  Network net;
  net.input_shape = {1};
  net.num_classes = 2;
  const double huge = 1e308;
  net.layers.push_back(Layer::affine(Tensor({2, 1}, {huge, -huge}), Tensor::zeros({2})));
  net.layers.push_back(Layer::make_relu());
  net.layers.push_back(Layer::affine(Tensor({2, 2}, {huge, 0, 0, huge}), Tensor::zeros({2})));
  CHECK_THROWS_AS(ibp_bounds(net, Tensor({1}, {1.0}), {0}, 10.0), NumericError);
}

TEST_CASE("input-domain clipping tightens the box when enabled") {
  Network net;
  net.input_shape = {1};
  net.num_classes = 1;
  net.layers.push_back(Layer::affine(Tensor({1, 1}, {1.0}), Tensor({1}, {0.0})));
  BoundOptions clip;
  clip.clip_input_domain = true;
  BoundsState clipped = ibp_bounds(net, Tensor({1}, {0.5}), {0}, 2.0, nullptr, clip);
  BoundsState pure = ibp_bounds(net, Tensor({1}, {0.5}), {0}, 2.0);
  CHECK(approx(clipped.layer_lower[0][0], 0.0, 1e-12));
  CHECK(approx(clipped.layer_upper[0][0], 1.0, 1e-12));
  CHECK(approx(pure.layer_lower[0][0], -1.5, 1e-12));
  CHECK(approx(pure.layer_upper[0][0], 2.5, 1e-12));
}
