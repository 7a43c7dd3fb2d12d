#pragma once

// Jump-process sampler: per-position exit rates, exponential holding-time jump
// draws, off-diagonal categorical resampling, fixed-budget loops and the
// corruption-recovery protocol.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "stepflow/denoiser.hpp"
#include "stepflow/kinetics.hpp"
#include "stepflow/path_data.hpp"
#include "stepflow/rng.hpp"

namespace stepflow {

// Uniform grid t_s = s / S, s = 0..S.
class StepGrid {
 public:
  explicit StepGrid(int budget);

  int budget() const { return budget_; }
  double time(int s) const { return static_cast<double>(s) / budget_; }
  double step() const { return 1.0 / budget_; }

 private:
  int budget_;
};

struct TrajectoryRecord {
  int budget = 0;
  // S + 1 states when recorded; empty otherwise.
  std::vector<Sequence> states;
  // Per position: 1-based index of the last step that modified it, 0 if never.
  std::vector<int> last_change;
  // Per position: number of steps at which the token changed.
  std::vector<int> change_counts;
  long nfe = 0;
};

struct SamplerOptions {
  ScaleMode mode = ScaleMode::cumulative;
  double temperature = 1.0;
  bool record_states = true;
  // Called after every step with the 1-based step index and the new state.
  std::function<void(int, const Sequence&)> observer;
};

// RNG streams of one trajectory: the source draw plus one stream per position.
struct TrajectoryRng {
  TrajectoryRng(std::uint64_t seed, std::uint64_t trajectory, std::size_t length)
      : source(Rng::stream(seed, {trajectory, 0xffffffffULL})),
        positions(seed, trajectory, length) {}

  Rng source;
  PositionStreams positions;
};

// Apply one jump draw per position given posterior rows: jump with probability
// 1 - exp(-h * scale * (1 - p[current])), then resample from the posterior with
// the current token removed. Frozen positions are copied.
Sequence apply_jumps(const Sequence& state, const RowMatrix& probs, double scale, double h,
                     PositionStreams& rng, const std::vector<bool>* frozen = nullptr);
// In-place form; returns the number of positions that changed and, when
// given, increments change_counts[i] for every changed position i.
int apply_jumps_in_place(Sequence& state, const RowMatrix& probs, double scale, double h,
                         PositionStreams& rng, const std::vector<bool>* frozen = nullptr,
                         std::vector<int>* change_counts = nullptr);

// One sampler step: one posterior evaluation at (state, t; h), then apply_jumps
// with g(t) (instantaneous) or the interval-averaged scale (cumulative).
Sequence jump_step(const Sequence& state, double t, double h, const PosteriorModel& model,
                   const Scheduler& scheduler, ScaleMode mode, PositionStreams& rng,
                   const std::vector<bool>* frozen = nullptr, double temperature = 1.0);

struct SampleResult {
  Sequence final;
  TrajectoryRecord record;
};

// Run the S-step grid starting from a given state at t_0 = 0.
SampleResult integrate(const Sequence& initial, const PosteriorModel& model, const StepGrid& grid,
                       const Scheduler& scheduler, PositionStreams& rng,
                       const SamplerOptions& options = {},
                       const std::vector<bool>* frozen = nullptr);

// Draw x_0 from the source, then integrate.
SampleResult run_sampler(const SourceSpec& source, const Vocab& vocab, std::size_t length,
                         const PosteriorModel& model, const StepGrid& grid,
                         const Scheduler& scheduler, TrajectoryRng& rng,
                         const SamplerOptions& options = {});

// Start from a corrupted sequence; with freeze_context the unchanged positions
// never move.
Sequence recover(const Sequence& corrupted, const std::vector<bool>& changed,
                 const PosteriorModel& model, const StepGrid& grid, const Scheduler& scheduler,
                 PositionStreams& rng, bool freeze_context, const SamplerOptions& options = {});

// Average over positions of the number of steps at which the token changed.
double mean_jumps(const TrajectoryRecord& record);

// Many trajectories, evaluated step-major in chunks so that each step issues a
// single batched model call. Trajectory n uses TrajectoryRng(seed, n, L), so
// results equal independent run_sampler calls. With deduplicate, trajectories
// that share a state at a step share one evaluation; nfe_per_trajectory still
// counts one posterior lookup per trajectory and step.
struct EnsembleResult {
  std::vector<Sequence> finals;
  std::vector<int> change_counts;  // summed over trajectories, per position
  long nfe_per_trajectory = 0;
  // Model evaluations actually issued (smaller than count * S with deduplication).
  long model_evaluations = 0;
  double mean_jumps = 0.0;
};

struct EnsembleOptions {
  ScaleMode mode = ScaleMode::cumulative;
  double temperature = 1.0;
  std::size_t chunk = 1024;
  std::uint64_t first_trajectory = 0;
  bool deduplicate = true;
  // Called with step 0 on each chunk's initial states, then after every step
  // with the 1-based step index.
  std::function<void(int, const std::vector<Sequence>&)> observer;
};

EnsembleResult sample_ensemble(const SourceSpec& source, const Vocab& vocab, std::size_t length,
                               const PosteriorModel& model, const StepGrid& grid,
                               const Scheduler& scheduler, std::size_t count, std::uint64_t seed,
                               const EnsembleOptions& options = {});

// CSV with columns step,position,token,changed; needs recorded states.
void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryRecord& record);

}  // namespace stepflow
