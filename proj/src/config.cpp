#include "stepflow/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "stepflow/errors.hpp"

namespace stepflow {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  return kind == TaskKind::checkerboard ? "checkerboard" : "text";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "checkerboard") return TaskKind::checkerboard;
  if (name == "text") return TaskKind::text;
  throw ConfigError("unknown task '" + name + "' (expected checkerboard or text)");
}

StepPolicy RunConfig::make_policy() const {
  StepPolicy p;
  p.kind = policy;
  p.anneal_interval = anneal_interval;
  return p;
}

void validate(const RunConfig& cfg) {
  (void)cfg.make_scheduler();
  validate(cfg.make_blend());
  if (cfg.length < 2) throw ConfigError("length must be at least 2");
  if (cfg.budget < 1) throw ConfigError("budget must be positive");
  for (int s : cfg.budgets) {
    if (s < 1) throw ConfigError("budgets must be positive");
  }
  if (cfg.anneal_interval < 1) throw ConfigError("anneal_interval must be positive");
  if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.pretrain_steps < 0 || cfg.finetune_steps < 0) throw ConfigError("step counts must be non-negative");
  if (!(cfg.learning_rate >= 0.0) || !(cfg.finetune_learning_rate >= 0.0)) {
    throw ConfigError("learning rates must be non-negative");
  }
  if (!(cfg.grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (cfg.samples < 1) throw ConfigError("samples must be positive");
  if (cfg.frames < 1) throw ConfigError("frames must be positive");
  if (cfg.frame_format != "csv" && cfg.frame_format != "pgm") {
    throw ConfigError("frame_format must be csv or pgm");
  }
  if (!(cfg.corruption_fraction >= 0.0 && cfg.corruption_fraction <= 1.0)) {
    throw ConfigError("corruption_fraction must lie in [0, 1]");
  }
  if (cfg.embed_dim < 1 || cfg.hidden_dim < 1 || cfg.depth < 0 || cfg.cond_dim < 1 ||
      cfg.freq_dim < 2 || cfg.freq_dim % 2 != 0) {
    throw ConfigError("model dimensions must be positive (freq_dim even)");
  }
}

namespace {

std::filesystem::path resolve(const std::string& value, const std::filesystem::path& base) {
  std::filesystem::path p(value);
  if (value.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

using Setter = std::function<void(RunConfig&, const json&, const std::filesystem::path&)>;

template <typename T>
T as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"version",
       [](RunConfig&, const json& v, const auto&) {
         if (as<int>(v, "version") != RunConfig::kVersion) {
           throw ConfigError("unsupported config version (expected " +
                             std::to_string(RunConfig::kVersion) + ")");
         }
       }},
      {"seed", [](RunConfig& c, const json& v, const auto&) { c.seed = as<std::uint64_t>(v, "seed"); }},
      {"task", [](RunConfig& c, const json& v, const auto&) { c.task = parse_task_kind(as<std::string>(v, "task")); }},
      {"scheduler", [](RunConfig& c, const json& v, const auto&) { c.scheduler = parse_scheduler_kind(as<std::string>(v, "scheduler")); }},
      {"clamp_epsilon", [](RunConfig& c, const json& v, const auto&) { c.clamp_epsilon = as<double>(v, "clamp_epsilon"); }},
      {"source", [](RunConfig& c, const json& v, const auto&) { c.source = parse_source_kind(as<std::string>(v, "source")); }},
      {"length", [](RunConfig& c, const json& v, const auto&) { c.length = as<int>(v, "length"); }},
      {"scale_mode", [](RunConfig& c, const json& v, const auto&) { c.scale_mode = parse_scale_mode(as<std::string>(v, "scale_mode")); }},
      {"budget", [](RunConfig& c, const json& v, const auto&) { c.budget = as<int>(v, "budget"); }},
      {"budgets", [](RunConfig& c, const json& v, const auto&) { c.budgets = as<std::vector<int>>(v, "budgets"); }},
      {"policy", [](RunConfig& c, const json& v, const auto&) { c.policy = parse_policy_kind(as<std::string>(v, "policy")); }},
      {"anneal_interval", [](RunConfig& c, const json& v, const auto&) { c.anneal_interval = as<long>(v, "anneal_interval"); }},
      {"tau", [](RunConfig& c, const json& v, const auto&) { c.tau = as<double>(v, "tau"); }},
      {"temperature", [](RunConfig& c, const json& v, const auto&) { c.temperature = as<double>(v, "temperature"); }},
      {"teacher", [](RunConfig& c, const json& v, const auto&) { c.teacher = parse_teacher_kind(as<std::string>(v, "teacher")); }},
      {"use_ema", [](RunConfig& c, const json& v, const auto&) { c.use_ema = as<bool>(v, "use_ema"); }},
      {"ema_decay", [](RunConfig& c, const json& v, const auto&) { c.ema_decay = as<double>(v, "ema_decay"); }},
      {"embed_dim", [](RunConfig& c, const json& v, const auto&) { c.embed_dim = as<int>(v, "embed_dim"); }},
      {"hidden_dim", [](RunConfig& c, const json& v, const auto&) { c.hidden_dim = as<int>(v, "hidden_dim"); }},
      {"depth", [](RunConfig& c, const json& v, const auto&) { c.depth = as<int>(v, "depth"); }},
      {"cond_dim", [](RunConfig& c, const json& v, const auto&) { c.cond_dim = as<int>(v, "cond_dim"); }},
      {"freq_dim", [](RunConfig& c, const json& v, const auto&) { c.freq_dim = as<int>(v, "freq_dim"); }},
      {"batch_size", [](RunConfig& c, const json& v, const auto&) { c.batch_size = as<int>(v, "batch_size"); }},
      {"pretrain_steps", [](RunConfig& c, const json& v, const auto&) { c.pretrain_steps = as<long>(v, "pretrain_steps"); }},
      {"finetune_steps", [](RunConfig& c, const json& v, const auto&) { c.finetune_steps = as<long>(v, "finetune_steps"); }},
      {"learning_rate", [](RunConfig& c, const json& v, const auto&) { c.learning_rate = as<double>(v, "learning_rate"); }},
      {"finetune_learning_rate", [](RunConfig& c, const json& v, const auto&) { c.finetune_learning_rate = as<double>(v, "finetune_learning_rate"); }},
      {"grad_clip", [](RunConfig& c, const json& v, const auto&) { c.grad_clip = as<double>(v, "grad_clip"); }},
      {"samples", [](RunConfig& c, const json& v, const auto&) { c.samples = as<int>(v, "samples"); }},
      {"frames", [](RunConfig& c, const json& v, const auto&) { c.frames = as<int>(v, "frames"); }},
      {"frame_format", [](RunConfig& c, const json& v, const auto&) { c.frame_format = as<std::string>(v, "frame_format"); }},
      {"corruption_fraction", [](RunConfig& c, const json& v, const auto&) { c.corruption_fraction = as<double>(v, "corruption_fraction"); }},
      {"freeze_context", [](RunConfig& c, const json& v, const auto&) { c.freeze_context = as<bool>(v, "freeze_context"); }},
      {"corpus", [](RunConfig& c, const json& v, const auto& base) { c.corpus = resolve(as<std::string>(v, "corpus"), base); }},
      {"alphabet", [](RunConfig& c, const json& v, const auto&) { c.alphabet = as<std::string>(v, "alphabet"); }},
      {"checkpoint", [](RunConfig& c, const json& v, const auto& base) { c.checkpoint = resolve(as<std::string>(v, "checkpoint"), base); }},
      {"init_checkpoint", [](RunConfig& c, const json& v, const auto& base) { c.init_checkpoint = resolve(as<std::string>(v, "init_checkpoint"), base); }},
      {"fixture", [](RunConfig& c, const json& v, const auto& base) { c.fixture = resolve(as<std::string>(v, "fixture"), base); }},
      {"output_dir", [](RunConfig& c, const json& v, const auto& base) { c.output_dir = resolve(as<std::string>(v, "output_dir"), base); }},
  };
  return table;
}

void apply(RunConfig& cfg, const std::string& key, const json& value,
           const std::filesystem::path& base) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, value, base);
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  if (!doc.contains("version")) throw ConfigError("config is missing the 'version' key");
  RunConfig cfg;
  cfg.checkpoint = resolve(cfg.checkpoint.string(), base_dir);
  cfg.output_dir = resolve(cfg.output_dir.string(), base_dir);
  for (const auto& [key, value] : doc.items()) apply(cfg, key, value, base_dir);
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.parent_path());
}

std::string dump_config(const RunConfig& c) {
  json doc = {
      {"version", RunConfig::kVersion},
      {"seed", c.seed},
      {"task", to_string(c.task)},
      {"scheduler", to_string(c.scheduler)},
      {"clamp_epsilon", c.clamp_epsilon},
      {"source", to_string(c.source)},
      {"length", c.length},
      {"scale_mode", to_string(c.scale_mode)},
      {"budget", c.budget},
      {"budgets", c.budgets},
      {"policy", to_string(c.policy)},
      {"anneal_interval", c.anneal_interval},
      {"tau", c.tau},
      {"temperature", c.temperature},
      {"teacher", to_string(c.teacher)},
      {"use_ema", c.use_ema},
      {"ema_decay", c.ema_decay},
      {"embed_dim", c.embed_dim},
      {"hidden_dim", c.hidden_dim},
      {"depth", c.depth},
      {"cond_dim", c.cond_dim},
      {"freq_dim", c.freq_dim},
      {"batch_size", c.batch_size},
      {"pretrain_steps", c.pretrain_steps},
      {"finetune_steps", c.finetune_steps},
      {"learning_rate", c.learning_rate},
      {"finetune_learning_rate", c.finetune_learning_rate},
      {"grad_clip", c.grad_clip},
      {"samples", c.samples},
      {"frames", c.frames},
      {"frame_format", c.frame_format},
      {"corruption_fraction", c.corruption_fraction},
      {"freeze_context", c.freeze_context},
      {"corpus", c.corpus.string()},
      {"alphabet", c.alphabet},
      {"checkpoint", c.checkpoint.string()},
      {"init_checkpoint", c.init_checkpoint.string()},
      {"fixture", c.fixture.string()},
      {"output_dir", c.output_dir.string()},
  };
  return doc.dump(2) + "\n";
}

void apply_override(RunConfig& cfg, const std::string& assignment,
                    const std::filesystem::path& base_dir) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  // Values are JSON when they parse as JSON, plain strings otherwise.
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  apply(cfg, key, value, base_dir);
  validate(cfg);
}

}  // namespace stepflow
