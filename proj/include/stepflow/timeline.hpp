#pragma once

// Token timelines: each token of a final sample colored by when it last changed.

#include <filesystem>
#include <string>
#include <vector>

namespace stepflow {

inline constexpr int kTimelineBins = 8;

struct TimelineArtifact {
  // Display text of each token of the final sequence.
  std::vector<std::string> tokens;
  // Bin in 1..8 of each token's last change (1 for untouched tokens).
  std::vector<int> bins;
};

// Quantize a 1-based last-change step (0 = never changed) over S steps.
int timeline_bin(int last_change, int budget);

TimelineArtifact make_timeline(std::vector<std::string> tokens, const std::vector<int>& last_change,
                               int budget);

// Self-contained HTML; identical input gives identical bytes.
std::string render_timeline(const TimelineArtifact& artifact);

}  // namespace stepflow
