#include "stepflow/kinetics.hpp"

namespace stepflow {

std::string to_string(SchedulerKind kind) {
  return kind == SchedulerKind::linear ? "linear" : "quadratic";
}

std::string to_string(ScaleMode mode) {
  return mode == ScaleMode::instantaneous ? "instantaneous" : "cumulative";
}

SchedulerKind parse_scheduler_kind(const std::string& name) {
  if (name == "linear") return SchedulerKind::linear;
  if (name == "quadratic") return SchedulerKind::quadratic;
  throw ConfigError("unknown scheduler kind '" + name + "' (expected linear|quadratic)");
}

ScaleMode parse_scale_mode(const std::string& name) {
  if (name == "instantaneous") return ScaleMode::instantaneous;
  if (name == "cumulative") return ScaleMode::cumulative;
  throw ConfigError("unknown scale mode '" + name + "' (expected instantaneous|cumulative)");
}

}  // namespace stepflow
