// certkit command line: train networks with certified/adversarial losses,
// certify and attack checkpoints, run the toy-network sensitivity sweeps and
// probe metric histories for catastrophic overfitting.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "certkit/config.hpp"
#include "certkit/rng.hpp"

namespace fs = std::filesystem;
using namespace certkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

// All artifact files are written to a temp name in the target directory and
// renamed into place, so a crash mid-run never leaves a partial file.
void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os << content;
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path resolve_output_dir(const RunConfig& cfg, const std::string& cli_out) {
  if (!cli_out.empty()) return cli_out;
  if (const char* env = std::getenv("CERTKIT_OUTPUT_DIR")) {
    return fs::path(env) / fs::path(cfg.output_dir).filename();
  }
  return cfg.output_dir;
}

Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds;
  if (cfg.dataset.source == "blobs") {
    ds = synth_blobs(cfg.dataset.classes, cfg.dataset.per_class, cfg.dataset.dims,
                     cfg.dataset.spread, derive_seed(cfg.seed, "dataset"));
  } else {
    ds = load_idx(cfg.dataset.images, cfg.dataset.labels);
  }
  if (cfg.dataset.limit > 0) subsample(ds, cfg.dataset.limit, derive_seed(cfg.seed, "subset"));
  split_dataset(ds, cfg.dataset.val_fraction, derive_seed(cfg.seed, "split"));
  return ds;
}

Network build_network(const RunConfig& cfg, const Dataset& ds) {
  std::optional<ToyConfig> toy;
  if (cfg.network.preset == "toy") toy = ToyConfig{cfg.network.toy_depth, cfg.network.toy_w};
  Network net = build_preset(cfg.network.preset, ds.sample_shape(),
                             static_cast<std::size_t>(ds.num_classes), toy);
  if (cfg.network.preset != "toy") {
    init_network(net,
                 cfg.network.init == "ibp-aware" ? InitScheme::ibp_aware : InitScheme::fan_in_uniform,
                 cfg.seed);
  }
  return net;
}

RunConfig load_with_overrides(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  std::string text = read_file(config_path);
  if (!overrides.empty()) text = apply_overrides(text, overrides);
  return parse_config(text);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir_flag) {
  RunConfig cfg = load_with_overrides(config_path, overrides);
  fs::path out = resolve_output_dir(cfg, out_dir_flag);
  fs::create_directories(out);
  atomic_write(out / "config.resolved.json", dump_config(cfg));

  Dataset ds = load_dataset(cfg);
  Network net = build_network(cfg, ds);

  std::cout << "training " << cfg.network.preset << " on " << ds.train_idx.size() << " samples ("
            << ds.val_idx.size() << " validation), loss " << loss_family_to_string(cfg.loss.family)
            << "\n";
  TrainResult res = train(net, ds, cfg.train, cfg.loss, cfg.seed, &std::cout);
  if (res.aborted) {
    std::cerr << "aborted: " << res.abort_reason << "\n";
    return kExitNumeric;
  }
  atomic_write(out / "metrics.csv", metrics_csv(res.history));
  save_checkpoint(net, (out / "checkpoint.bin").string());
  std::cout << "wrote " << (out / "metrics.csv").string() << " and checkpoint.bin\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::vector<std::string>& overrides, double eps_flag) {
  RunConfig cfg = load_with_overrides(config_path, overrides);
  Network net = load_checkpoint(checkpoint);
  Dataset ds = load_dataset(cfg);
  const double eps = eps_flag >= 0 ? eps_flag : cfg.loss.attack.eps;
  AttackConfig atk = cfg.eval_attack;
  atk.eps = eps;
  atk.seed = derive_seed(cfg.seed, "eval-attack");
  const auto& idx = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
  EpochMetrics m = evaluate(net, ds, idx, eps, atk, cfg.loss.bound_opts);
  std::printf("clean_acc=%.4f pgd_acc=%.4f ibp_cert_acc=%.4f ibp_loss=%.6g (eps=%g, pgd-%d x%d)\n",
              m.clean_acc, m.pgd_acc, m.ibp_cert_acc, m.ibp_loss_mean, eps, atk.steps,
              atk.restarts);
  return kExitOk;
}

int cmd_certify(const std::string& checkpoint, const std::string& config_path,
                const std::vector<std::string>& overrides, double eps,
                const std::string& out_path) {
  RunConfig cfg = load_with_overrides(config_path, overrides);
  if (eps < 0) throw ConfigError("certify requires --eps >= 0");
  Network net = load_checkpoint(checkpoint);
  Dataset ds = load_dataset(cfg);
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  Tensor x = ds.gather(idx);
  std::vector<int> y = ds.gather_labels(idx);
  BoundsState st = ibp_bounds(net, x, y, eps, nullptr, cfg.loss.bound_opts);
  std::vector<double> mins = min_logit_lower_bounds(st, y);
  Tensor logits = net.forward(x, Mode::eval, nullptr);

  std::ostringstream os;
  os << "index,label,predicted,certified,min_lower_bound\n";
  const std::size_t k = static_cast<std::size_t>(ds.num_classes);
  std::size_t certified = 0, correct = 0;
  char buf[160];
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (logits[i * k + c] > logits[i * k + arg]) arg = c;
    }
    const bool cert = mins[i] >= 0.0;
    certified += cert ? 1 : 0;
    correct += (arg == static_cast<std::size_t>(y[i])) ? 1 : 0;
    std::snprintf(buf, sizeof(buf), "%zu,%d,%zu,%d,%.10g\n", i, y[i], arg, cert ? 1 : 0, mins[i]);
    os << buf;
  }
  atomic_write(out_path, os.str());
  std::printf("certified %zu/%zu (%.4f) at eps=%g; clean %.4f; wrote %s\n", certified, idx.size(),
              static_cast<double>(certified) / static_cast<double>(idx.size()), eps,
              static_cast<double>(correct) / static_cast<double>(idx.size()), out_path.c_str());
  return kExitOk;
}

int cmd_attack(const std::string& checkpoint, const std::string& config_path,
               const std::vector<std::string>& overrides, const std::string& out_path) {
  RunConfig cfg = load_with_overrides(config_path, overrides);
  Network net = load_checkpoint(checkpoint);
  Dataset ds = load_dataset(cfg);
  const auto& idx = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
  Tensor x = ds.gather(idx);
  std::vector<int> y = ds.gather_labels(idx);
  AttackConfig atk = cfg.eval_attack;
  atk.seed = derive_seed(cfg.seed, "attack-cmd");
  AdversarialBatch adv = run_attack(net, x, y, atk, Mode::eval);
  Tensor adv_logits = net.forward(adv.x_adv, Mode::eval, nullptr);
  Tensor ce = softmax_cross_entropy(adv_logits, y);

  const std::size_t k = static_cast<std::size_t>(ds.num_classes);
  const std::size_t per = x.size() / idx.size();
  std::ostringstream os;
  os << "index,label,adv_predicted,success,in_ball,linf,loss\n";
  char buf[200];
  std::size_t flips = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (adv_logits[i * k + c] > adv_logits[i * k + arg]) arg = c;
    }
    double linf = 0;
    for (std::size_t j = 0; j < per; ++j) {
      linf = std::max(linf, std::fabs(adv.x_adv[i * per + j] - x[i * per + j]));
    }
    const bool success = arg != static_cast<std::size_t>(y[i]);
    flips += success ? 1 : 0;
    std::snprintf(buf, sizeof(buf), "%zu,%d,%zu,%d,%d,%.10g,%.10g\n", i, y[i], arg,
                  success ? 1 : 0, adv.in_ball[i] ? 1 : 0, linf, ce[i]);
    os << buf;
  }
  atomic_write(out_path, os.str());
  std::printf("attack %s eps=%g: flipped %zu/%zu (robust acc %.4f); wrote %s\n",
              attack_kind_to_string(atk.kind).c_str(), atk.eps, flips, idx.size(),
              1.0 - static_cast<double>(flips) / static_cast<double>(idx.size()),
              out_path.c_str());
  return kExitOk;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw ConfigError("empty grid '" + s + "'");
  return out;
}

int cmd_toy_sweep(const std::string& depths_s, const std::string& ws_s,
                  const std::string& families_s, const std::string& alphas_s,
                  const std::string& out_path) {
  std::vector<int> depths;
  for (double d : parse_grid(depths_s)) depths.push_back(static_cast<int>(d));
  std::vector<double> ws = parse_grid(ws_s);
  std::vector<double> alphas = parse_grid(alphas_s);

  std::vector<std::pair<LossFamily, double>> families;
  std::stringstream ss(families_s);
  std::string fam;
  std::size_t fam_count = 0;
  while (std::getline(ss, fam, ',')) {
    if (fam.empty()) continue;
    LossFamily f = loss_family_from_string(fam);
    const double coeff = alphas[std::min(fam_count, alphas.size() - 1)];
    families.emplace_back(f, coeff);
    ++fam_count;
  }
  if (families.empty()) throw ConfigError("no loss families given");

  auto rows = toy_sweep(depths, ws, families);
  atomic_write(out_path, toy_sweep_csv(rows));
  std::printf("wrote %zu sweep rows to %s\n", rows.size(), out_path.c_str());
  return kExitOk;
}

int cmd_co_probe(const std::string& metrics_path, double pgd_threshold, double train_threshold,
                 int window) {
  std::ifstream is(metrics_path);
  if (!is) throw IoError("cannot open metrics file: " + metrics_path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty metrics file: " + metrics_path);
  std::vector<EpochMetrics> history;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    EpochMetrics m;
    std::stringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() < 10) throw IoError("malformed metrics row: " + line);
    m.epoch = std::stoi(fields[0]);
    m.clean_acc = std::stod(fields[1]);
    m.attack_train_acc = std::stod(fields[2]);
    m.pgd_acc = std::stod(fields[3]);
    m.ibp_cert_acc = std::stod(fields[4]);
    m.ibp_loss_mean = std::stod(fields[5]);
    m.forwabs_gap = std::stod(fields[6]);
    history.push_back(m);
  }
  CoVerdict v = co_probe(history, pgd_threshold, train_threshold, window);
  if (v.co_detected) {
    std::printf("CO detected at epoch %d (pgd < %g while attack-train > %g)\n", v.onset_epoch,
                pgd_threshold, train_threshold);
  } else {
    std::printf("no CO detected over %zu epochs\n", history.size());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certkit: certified/adversarial training toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir, out_path = "out.csv";
  std::vector<std::string> overrides;
  double eps = -1.0;

  auto* train_cmd = app.add_subcommand("train", "train a network from a config");
  train_cmd->add_option("--config", config_path, "run config (JSON)")->required();
  train_cmd->add_option("--set", overrides, "override section.key=value");
  train_cmd->add_option("--out", out_dir, "output directory (else config/env)");

  auto* eval_cmd = app.add_subcommand("eval", "clean/PGD/certified accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--config", config_path, "run config (JSON)")->required();
  eval_cmd->add_option("--set", overrides, "override section.key=value");
  eval_cmd->add_option("--eps", eps, "perturbation radius (default: attack.eps)");

  auto* certify_cmd = app.add_subcommand("certify", "per-sample IBP certification verdicts");
  certify_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  certify_cmd->add_option("--config", config_path, "run config (JSON)")->required();
  certify_cmd->add_option("--set", overrides, "override section.key=value");
  certify_cmd->add_option("--eps", eps, "perturbation radius")->required();
  certify_cmd->add_option("--out", out_path, "verdict CSV path");

  auto* attack_cmd = app.add_subcommand("attack", "run the eval attack, write per-sample results");
  attack_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  attack_cmd->add_option("--config", config_path, "run config (JSON)")->required();
  attack_cmd->add_option("--set", overrides, "override section.key=value");
  attack_cmd->add_option("--out", out_path, "attack CSV path");

  std::string depths = "2,18", ws = "0,0.05,0.1,0.2,0.4,0.6,0.8,1.0";
  std::string families = "mtl-ibp,exp-ibp", alphas = "0.01,0.1";
  auto* sweep_cmd = app.add_subcommand("toy-sweep", "loss sensitivity sweep on the toy stack");
  sweep_cmd->add_option("--depths", depths, "comma list of depths");
  sweep_cmd->add_option("--w", ws, "comma list of w values");
  sweep_cmd->add_option("--families", families, "comma list of loss families");
  sweep_cmd->add_option("--alphas", alphas, "per-family coefficient list");
  sweep_cmd->add_option("--out", out_path, "sweep CSV path");

  std::string metrics_path;
  double pgd_threshold = 0.05, train_threshold = 0.60;
  int window = 3;
  auto* probe_cmd = app.add_subcommand("co-probe", "flag catastrophic overfitting in metrics");
  probe_cmd->add_option("--metrics", metrics_path, "metrics CSV from train")->required();
  probe_cmd->add_option("--pgd-threshold", pgd_threshold, "PGD accuracy floor");
  probe_cmd->add_option("--train-threshold", train_threshold, "attack-train accuracy ceiling");
  probe_cmd->add_option("--window", window, "smoothing window");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path, overrides, out_dir);
    if (*eval_cmd) return cmd_eval(checkpoint, config_path, overrides, eps);
    if (*certify_cmd) return cmd_certify(checkpoint, config_path, overrides, eps, out_path);
    if (*attack_cmd) return cmd_attack(checkpoint, config_path, overrides, out_path);
    if (*sweep_cmd) return cmd_toy_sweep(depths, ws, families, alphas, out_path);
    if (*probe_cmd) return cmd_co_probe(metrics_path, pgd_threshold, train_threshold, window);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
