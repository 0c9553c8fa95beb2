#include "certkit/config.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace certkit {

using nlohmann::json;

namespace {

// Pulls known keys out of a JSON object and rejects anything left over, so
// typos surface as errors instead of silently using defaults.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (!j.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) remaining_[it.key()] = it.value();
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = remaining_.find(key);
    if (it == remaining_.end()) return;
    try {
      out = it->second.get<T>();
    } catch (const json::exception&) {
      throw ConfigError("field '" + name_ + "." + key + "' has the wrong type");
    }
    remaining_.erase(it);
  }

  bool take(const char* key, json& out) {
    auto it = remaining_.find(key);
    if (it == remaining_.end()) return false;
    out = it->second;
    remaining_.erase(it);
    return true;
  }

  void finish() const {
    if (!remaining_.empty()) {
      throw ConfigError("unknown key '" + name_ + "." + remaining_.begin()->first + "'");
    }
  }

 private:
  std::string name_;
  std::map<std::string, json> remaining_;
};

AttackConfig parse_attack(const json& j, const std::string& name) {
  AttackConfig a;
  Section s(j, name);
  std::string kind = attack_kind_to_string(a.kind);
  s.get("kind", kind);
  a.kind = attack_kind_from_string(kind);
  s.get("eps", a.eps);
  s.get("step_size", a.step_size);
  s.get("steps", a.steps);
  s.get("restarts", a.restarts);
  s.get("noise_multiplier", a.noise_multiplier);
  s.get("clip_input", a.clip_input);
  s.get("random_start", a.random_start);
  s.finish();
  return a;
}

json attack_to_json(const AttackConfig& a) {
  return json{{"kind", attack_kind_to_string(a.kind)},
              {"eps", a.eps},
              {"step_size", a.step_size},
              {"steps", a.steps},
              {"restarts", a.restarts},
              {"noise_multiplier", a.noise_multiplier},
              {"clip_input", a.clip_input},
              {"random_start", a.random_start}};
}

}  // namespace

void RunConfig::validate() const {
  if (dataset.source != "blobs" && dataset.source != "idx") {
    throw ConfigError("dataset.source must be 'blobs' or 'idx'");
  }
  if (dataset.source == "idx" && (dataset.images.empty() || dataset.labels.empty())) {
    throw ConfigError("dataset.images and dataset.labels are required for source 'idx'");
  }
  if (dataset.val_fraction < 0 || dataset.val_fraction >= 1) {
    throw ConfigError("dataset.val_fraction must be in [0,1)");
  }
  if (network.init != "default" && network.init != "ibp-aware") {
    throw ConfigError("network.init must be 'default' or 'ibp-aware'");
  }
  if (network.preset != "toy" && network.preset != "mlp-small" && network.preset != "cnn-mini" &&
      network.preset != "cnn5-thin") {
    throw ConfigError("network.preset must be one of toy, mlp-small, cnn-mini, cnn5-thin");
  }
  loss.validate();
  train.validate();
  eval_attack.validate();
}

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig cfg;
  Section top(root, "config");
  top.get("seed", cfg.seed);
  top.get("output_dir", cfg.output_dir);

  json sec;
  if (top.take("dataset", sec)) {
    Section s(sec, "dataset");
    s.get("source", cfg.dataset.source);
    s.get("classes", cfg.dataset.classes);
    s.get("per_class", cfg.dataset.per_class);
    s.get("dims", cfg.dataset.dims);
    s.get("spread", cfg.dataset.spread);
    s.get("images", cfg.dataset.images);
    s.get("labels", cfg.dataset.labels);
    s.get("limit", cfg.dataset.limit);
    s.get("val_fraction", cfg.dataset.val_fraction);
    s.finish();
  }
  if (top.take("network", sec)) {
    Section s(sec, "network");
    s.get("preset", cfg.network.preset);
    s.get("toy_depth", cfg.network.toy_depth);
    s.get("toy_w", cfg.network.toy_w);
    s.get("init", cfg.network.init);
    s.finish();
  }
  if (top.take("loss", sec)) {
    Section s(sec, "loss");
    std::string family = loss_family_to_string(cfg.loss.family);
    s.get("family", family);
    cfg.loss.family = loss_family_from_string(family);
    double alpha = cfg.loss.alpha;
    s.get("alpha", alpha);
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("loss.alpha must be in [0,1]");
    cfg.loss.alpha = alpha;
    double lambda = cfg.loss.lambda;
    s.get("lambda", lambda);
    if (lambda < 0.0) throw ConfigError("loss.lambda must be >= 0");
    cfg.loss.lambda = lambda;
    s.get("bounding_eps", cfg.loss.bounding_eps);
    s.get("clip_input_domain", cfg.loss.bound_opts.clip_input_domain);
    s.finish();
  }
  if (top.take("attack", sec)) {
    cfg.loss.attack = parse_attack(sec, "attack");
  }
  if (top.take("eval_attack", sec)) {
    cfg.eval_attack = parse_attack(sec, "eval_attack");
  } else {
    // AutoAttack stand-in: strong PGD with restarts.
    cfg.eval_attack.kind = AttackKind::pgd;
    cfg.eval_attack.steps = 50;
    cfg.eval_attack.restarts = 3;
    cfg.eval_attack.eps = cfg.loss.attack.eps;
    cfg.eval_attack.clip_input = cfg.loss.attack.clip_input;
  }
  if (top.take("train", sec)) {
    Section s(sec, "train");
    std::string schedule = cfg.train.schedule == ScheduleKind::cyclic ? "cyclic" : "long";
    s.get("schedule", schedule);
    if (schedule == "cyclic") {
      cfg.train.schedule = ScheduleKind::cyclic;
    } else if (schedule == "long") {
      cfg.train.schedule = ScheduleKind::long_schedule;
      // Long-schedule defaults: Adam, lr 5e-4, decays, grad clip 10, eps
      // ramp over the first half. Explicit keys below still win.
      cfg.train.optimizer = OptimizerKind::adam;
      cfg.train.epochs = 40;
      cfg.train.grad_clip = 10.0;
      cfg.train.weight_decay = 0.0;
      cfg.train.eps_ramp_epochs = 20;
    } else {
      throw ConfigError("train.schedule must be 'cyclic' or 'long'");
    }
    std::string opt = cfg.train.optimizer == OptimizerKind::sgd ? "sgd" : "adam";
    s.get("optimizer", opt);
    if (opt == "sgd") {
      cfg.train.optimizer = OptimizerKind::sgd;
    } else if (opt == "adam") {
      cfg.train.optimizer = OptimizerKind::adam;
    } else {
      throw ConfigError("train.optimizer must be 'sgd' or 'adam'");
    }
    s.get("epochs", cfg.train.epochs);
    s.get("batch_size", cfg.train.batch_size);
    s.get("lr_peak", cfg.train.lr_peak);
    s.get("peak_fraction", cfg.train.peak_fraction);
    s.get("lr", cfg.train.lr);
    s.get("lr_decay_at", cfg.train.lr_decay_at);
    s.get("lr_decay_factor", cfg.train.lr_decay_factor);
    s.get("momentum", cfg.train.momentum);
    s.get("weight_decay", cfg.train.weight_decay);
    s.get("grad_clip", cfg.train.grad_clip);
    s.get("eps_ramp_epochs", cfg.train.eps_ramp_epochs);
    s.get("coeff_ramp_epochs", cfg.train.coeff_ramp_epochs);
    s.get("eval_pgd_steps", cfg.train.eval_pgd_steps);
    s.get("eval_pgd_restarts", cfg.train.eval_pgd_restarts);
    s.get("eval_subset", cfg.train.eval_subset);
    s.get("measure_wall", cfg.train.measure_wall);
    s.finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const std::string& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override '" + ov + "' is not of the form section.key=value");
    }
    const std::string path = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      parsed = value;  // bare strings are allowed unquoted
    }
    json* node = &root;
    std::size_t pos = 0;
    while (true) {
      auto dot = path.find('.', pos);
      const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (key.empty()) throw ConfigError("override '" + ov + "' has an empty path segment");
      if (dot == std::string::npos) {
        (*node)[key] = parsed;
        break;
      }
      node = &(*node)[key];
      pos = dot + 1;
    }
  }
  return root.dump(2);
}

std::string dump_config(const RunConfig& cfg) {
  json root;
  root["seed"] = cfg.seed;
  root["output_dir"] = cfg.output_dir;
  root["dataset"] = json{{"source", cfg.dataset.source},
                         {"classes", cfg.dataset.classes},
                         {"per_class", cfg.dataset.per_class},
                         {"dims", cfg.dataset.dims},
                         {"spread", cfg.dataset.spread},
                         {"images", cfg.dataset.images},
                         {"labels", cfg.dataset.labels},
                         {"limit", cfg.dataset.limit},
                         {"val_fraction", cfg.dataset.val_fraction}};
  root["network"] = json{{"preset", cfg.network.preset},
                         {"toy_depth", cfg.network.toy_depth},
                         {"toy_w", cfg.network.toy_w},
                         {"init", cfg.network.init}};
  root["loss"] = json{{"family", loss_family_to_string(cfg.loss.family)},
                      {"alpha", cfg.loss.alpha},
                      {"lambda", cfg.loss.lambda},
                      {"bounding_eps", cfg.loss.bounding_eps},
                      {"clip_input_domain", cfg.loss.bound_opts.clip_input_domain}};
  root["attack"] = attack_to_json(cfg.loss.attack);
  root["eval_attack"] = attack_to_json(cfg.eval_attack);
  root["train"] = json{
      {"schedule", cfg.train.schedule == ScheduleKind::cyclic ? "cyclic" : "long"},
      {"optimizer", cfg.train.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
      {"epochs", cfg.train.epochs},
      {"batch_size", cfg.train.batch_size},
      {"lr_peak", cfg.train.lr_peak},
      {"peak_fraction", cfg.train.peak_fraction},
      {"lr", cfg.train.lr},
      {"lr_decay_at", cfg.train.lr_decay_at},
      {"lr_decay_factor", cfg.train.lr_decay_factor},
      {"momentum", cfg.train.momentum},
      {"weight_decay", cfg.train.weight_decay},
      {"grad_clip", cfg.train.grad_clip},
      {"eps_ramp_epochs", cfg.train.eps_ramp_epochs},
      {"coeff_ramp_epochs", cfg.train.coeff_ramp_epochs},
      {"eval_pgd_steps", cfg.train.eval_pgd_steps},
      {"eval_pgd_restarts", cfg.train.eval_pgd_restarts},
      {"eval_subset", cfg.train.eval_subset},
      {"measure_wall", cfg.train.measure_wall}};
  return root.dump(2) + "\n";
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return dump_config(a) == dump_config(b);
}

}  // namespace certkit
