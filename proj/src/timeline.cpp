#include "stepflow/timeline.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "stepflow/errors.hpp"

namespace stepflow {

namespace {

// Light backgrounds, start to end.
constexpr std::array<const char*, kTimelineBins> kColors = {
    "#fde2e4", "#fff1c1", "#e2f0cb", "#c7f0db", "#cdeffd", "#dcd6f7", "#f3d1f4", "#e8e8e8"};

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\n': out += "&#8629;"; break;
      case ' ': out += "&nbsp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

int timeline_bin(int last_change, int budget) {
  if (budget < 1) throw ValidationError("timeline_bin: budget must be positive");
  if (last_change < 0 || last_change > budget) {
    throw ValidationError("timeline_bin: last change outside the step range");
  }
  if (last_change == 0) return 1;
  const long bin = 1 + static_cast<long>(last_change - 1) * kTimelineBins / budget;
  return static_cast<int>(std::min<long>(bin, kTimelineBins));
}

TimelineArtifact make_timeline(std::vector<std::string> tokens, const std::vector<int>& last_change,
                               int budget) {
  if (tokens.size() != last_change.size()) {
    throw ValidationError("make_timeline: tokens and change steps differ in length");
  }
  TimelineArtifact out;
  out.tokens = std::move(tokens);
  out.bins.reserve(last_change.size());
  for (int step : last_change) out.bins.push_back(timeline_bin(step, budget));
  return out;
}

std::string render_timeline(const TimelineArtifact& artifact) {
  if (artifact.tokens.size() != artifact.bins.size()) {
    throw ValidationError("render_timeline: tokens and bins differ in length");
  }
  std::ostringstream out;
  out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>token timeline</title>\n"
      << "<style>\nbody{font-family:monospace;line-height:1.8}\n"
      << "span{padding:1px 0}\n";
  for (int b = 1; b <= kTimelineBins; ++b) {
    bool used = false;
    for (int v : artifact.bins) used = used || v == b;
    if (used) out << ".b" << b << "{background:" << kColors[static_cast<std::size_t>(b - 1)] << "}\n";
  }
  out << "</style></head><body>\n<p>";
  for (std::size_t i = 0; i < artifact.tokens.size(); ++i) {
    const int b = artifact.bins[i];
    if (b < 1 || b > kTimelineBins) throw ValidationError("render_timeline: bin outside 1..8");
    out << "<span class=\"b" << b << "\">" << escape(artifact.tokens[i]) << "</span>";
  }
  out << "</p>\n</body></html>\n";
  return out.str();
}

}  // namespace stepflow
