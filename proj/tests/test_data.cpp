#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "certkit/config.hpp"
#include "certkit/data.hpp"
#include "certkit/rng.hpp"
#include "certkit/training.hpp"
#include "helpers.hpp"

using namespace certkit;

namespace {

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
}

void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
}

struct TempFiles {
  std::vector<std::string> paths;
  ~TempFiles() {
    for (const auto& p : paths) std::remove(p.c_str());
  }
  const std::string& add(std::string p) {
    paths.push_back(std::move(p));
    return paths.back();
  }
};

}  // namespace

TEST_CASE("golden 4-image IDX fixture loads exactly") {
  TempFiles tmp;
  const auto& img_path = tmp.add("golden_images.idx");
  const auto& lab_path = tmp.add("golden_labels.idx");

  // 4 images of 28x28 with a recognizable per-image fill pattern
  std::vector<unsigned char> img;
  push_be32(img, 0x00000803);
  push_be32(img, 4);
  push_be32(img, 28);
  push_be32(img, 28);
  for (int n = 0; n < 4; ++n) {
    for (int p = 0; p < 28 * 28; ++p) {
      img.push_back(static_cast<unsigned char>((n * 50 + p) % 256));
    }
  }
  write_bytes(img_path, img);

  std::vector<unsigned char> lab;
  push_be32(lab, 0x00000801);
  push_be32(lab, 4);
  for (unsigned char y : {7, 0, 3, 9}) lab.push_back(y);
  write_bytes(lab_path, lab);

  Dataset ds = load_idx(img_path, lab_path);
  CHECK(ds.inputs.shape() == Shape{4, 1, 28, 28});
  CHECK(ds.labels == std::vector<int>{7, 0, 3, 9});
  CHECK(ds.num_classes == 10);
  // spot-check scaled pixels
  CHECK(ds.inputs[0] == 0.0);
  CHECK(ds.inputs[1] == 1.0 / 255.0);
  CHECK(ds.inputs[28 * 28] == 50.0 / 255.0);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    CHECK(ds.inputs[i] >= 0.0);
    CHECK(ds.inputs[i] <= 1.0);
  }
}

TEST_CASE("IDX error cases are distinct") {
  TempFiles tmp;
  const auto& img_path = tmp.add("bad_images.idx");
  const auto& lab_path = tmp.add("bad_labels.idx");

  // wrong magic
  std::vector<unsigned char> img;
  push_be32(img, 0x12345678);
  push_be32(img, 1);
  push_be32(img, 2);
  push_be32(img, 2);
  img.resize(img.size() + 4, 0);
  write_bytes(img_path, img);
  std::vector<unsigned char> lab;
  push_be32(lab, 0x00000801);
  push_be32(lab, 1);
  lab.push_back(0);
  write_bytes(lab_path, lab);
  try {
    load_idx(img_path, lab_path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }

  // count mismatch
  img.clear();
  push_be32(img, 0x00000803);
  push_be32(img, 2);
  push_be32(img, 2);
  push_be32(img, 2);
  img.resize(img.size() + 8, 3);
  write_bytes(img_path, img);
  try {
    load_idx(img_path, lab_path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("mismatch") != std::string::npos);
  }

  // truncated pixel payload
  img.resize(img.size() - 3);
  write_bytes(img_path, img);
  lab.clear();
  push_be32(lab, 0x00000801);
  push_be32(lab, 2);
  lab.push_back(0);
  lab.push_back(1);
  write_bytes(lab_path, lab);
  try {
    load_idx(img_path, lab_path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}

TEST_CASE("IDX write-then-read round trip is bit-identical") {
  TempFiles tmp;
  const auto& img1 = tmp.add("rt_images1.idx");
  const auto& lab1 = tmp.add("rt_labels1.idx");
  const auto& img2 = tmp.add("rt_images2.idx");
  const auto& lab2 = tmp.add("rt_labels2.idx");

  // random byte-valued images
  Rng rng(42);
  std::vector<unsigned char> img;
  push_be32(img, 0x00000803);
  push_be32(img, 6);
  push_be32(img, 9);
  push_be32(img, 9);
  for (int i = 0; i < 6 * 81; ++i) img.push_back(static_cast<unsigned char>(rng.below(256)));
  write_bytes(img1, img);
  std::vector<unsigned char> lab;
  push_be32(lab, 0x00000801);
  push_be32(lab, 6);
  for (int i = 0; i < 6; ++i) lab.push_back(static_cast<unsigned char>(rng.below(10)));
  write_bytes(lab1, lab);

  Dataset ds = load_idx(img1, lab1);
  write_idx(ds, img2, lab2);
  CHECK(slurp(img1) == slurp(img2));
  CHECK(slurp(lab1) == slurp(lab2));

  // and reading back gives an identical dataset
  Dataset ds2 = load_idx(img2, lab2);
  CHECK(ds2.labels == ds.labels);
  CHECK(std::memcmp(ds2.inputs.data().data(), ds.inputs.data().data(),
                    ds.inputs.size() * sizeof(double)) == 0);
}

TEST_CASE("synthetic blobs are deterministic, balanced and in range") {
  Dataset a = synth_blobs(4, 25, 6, 0.03, 9);
  Dataset b = synth_blobs(4, 25, 6, 0.03, 9);
  CHECK(a.labels == b.labels);
  CHECK(std::memcmp(a.inputs.data().data(), b.inputs.data().data(),
                    a.inputs.size() * sizeof(double)) == 0);

  std::vector<int> counts(4, 0);
  for (int y : a.labels) counts[static_cast<std::size_t>(y)]++;
  for (int c : counts) CHECK(c == 25);
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    CHECK(a.inputs[i] >= 0.0);
    CHECK(a.inputs[i] <= 1.0);
  }
  CHECK_THROWS_AS(synth_blobs(1, 5, 4, 0.1, 0), ConfigError);
}

TEST_CASE("a linear probe separates well-separated blobs") {
  Dataset ds = synth_blobs(3, 80, 8, 0.02, 31);
  split_dataset(ds, 0.25, 31);
  Network net;
  net.input_shape = ds.sample_shape();
  net.num_classes = 3;
  net.layers.push_back(Layer::affine(Tensor::zeros({3, 8}), Tensor::zeros({3})));
  init_network(net, InitScheme::fan_in_uniform, 5);
  TrainPlan plan;
  plan.epochs = 12;
  plan.batch_size = 30;
  plan.lr_peak = 0.8;
  plan.eval_pgd_steps = 1;
  LossSpec spec;  // adversarial family at eps=0 is plain training
  spec.attack.kind = AttackKind::fgsm;
  spec.attack.eps = 0.0;
  train(net, ds, plan, spec, 8);
  AttackConfig atk;
  atk.kind = AttackKind::pgd;
  EpochMetrics m = evaluate(net, ds, ds.val_idx, 0.0, atk);
  CHECK(m.clean_acc >= 0.99);
}

TEST_CASE("split fractions, disjointness and determinism") {
  Dataset ds = synth_blobs(2, 50, 4, 0.05, 12);

  split_dataset(ds, 0.0, 1);
  CHECK(ds.val_idx.empty());
  CHECK(ds.train_idx.size() == 100);

  split_dataset(ds, 0.2, 1);
  CHECK(ds.val_idx.size() == 20);
  CHECK(ds.train_idx.size() == 80);
  std::set<std::size_t> seen(ds.train_idx.begin(), ds.train_idx.end());
  for (auto i : ds.val_idx) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 100);

  Dataset ds2 = synth_blobs(2, 50, 4, 0.05, 12);
  split_dataset(ds2, 0.2, 1);
  CHECK(ds2.train_idx == ds.train_idx);
  CHECK(ds2.val_idx == ds.val_idx);
}

TEST_CASE("minimal config gets defaults and dumps idempotently") {
  RunConfig cfg = parse_config(R"({"dataset": {"source": "blobs"}, "loss": {"family": "mtl-ibp"}})");
  CHECK(cfg.loss.family == LossFamily::mtl_ibp);
  CHECK(cfg.dataset.val_fraction == 0.2);
  CHECK(cfg.train.epochs == 10);
  CHECK(cfg.eval_attack.steps == 50);   // strong-attack default
  CHECK(cfg.eval_attack.restarts == 3);

  std::string dump = dump_config(cfg);
  RunConfig back = parse_config(dump);
  CHECK(back == cfg);
  CHECK(dump_config(back) == dump);
}

TEST_CASE("config validation errors name the field") {
  try {
    parse_config(R"({"loss": {"alpha": 1.5}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("alpha") != std::string::npos);
    CHECK(std::string(e.what()).find("[0,1]") != std::string::npos);
  }
  try {
    parse_config(R"({"trian": {}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("trian") != std::string::npos);
  }
  try {
    parse_config(R"({"train": {"epochz": 3}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.epochz") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("not json at all"), ConfigError);
}

TEST_CASE("overrides rewrite nested keys before validation") {
  const std::string base = R"({"loss": {"family": "exp-ibp", "alpha": 0.1}})";
  std::string text = apply_overrides(base, {"loss.alpha=0.4", "train.epochs=3",
                                            "network.preset=cnn-mini", "seed=42"});
  RunConfig cfg = parse_config(text);
  CHECK(cfg.loss.alpha == 0.4);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.network.preset == "cnn-mini");
  CHECK(cfg.seed == 42);
  CHECK_THROWS_AS(apply_overrides(base, {"no_equals_sign"}), ConfigError);
  CHECK_THROWS_AS(parse_config(apply_overrides(base, {"loss.alpha=2.0"})), ConfigError);
}

TEST_CASE("long schedule defaults activate on request") {
  RunConfig cfg = parse_config(R"({"train": {"schedule": "long"}})");
  CHECK(cfg.train.optimizer == OptimizerKind::adam);
  CHECK(cfg.train.grad_clip == 10.0);
  CHECK(cfg.train.epochs == 40);
  CHECK(cfg.train.eps_ramp_epochs == 20);
  // explicit keys still win
  RunConfig cfg2 = parse_config(R"({"train": {"schedule": "long", "epochs": 12}})");
  CHECK(cfg2.train.epochs == 12);
}

TEST_CASE("subsample keeps a deterministic subset") {
  Dataset ds = synth_blobs(3, 40, 5, 0.05, 4);
  Dataset ds2 = synth_blobs(3, 40, 5, 0.05, 4);
  subsample(ds, 30, 9);
  subsample(ds2, 30, 9);
  CHECK(ds.size() == 30);
  CHECK(ds.labels == ds2.labels);
}
