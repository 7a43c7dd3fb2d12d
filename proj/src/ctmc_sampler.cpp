#include "stepflow/ctmc_sampler.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "stepflow/errors.hpp"

namespace stepflow {

StepGrid::StepGrid(int budget) : budget_(budget) {
  if (budget < 1) throw ConfigError("step budget S must be positive");
}

namespace {

double jump_probability(double scale, double h, double p_current) {
  return -std::expm1(-h * (scale * (1.0 - p_current)));
}

// Jump draw for one position; returns whether the token changed.
bool jump_position(Token& token, const RowMatrix& probs, Eigen::Index i, double probability,
                   Rng& r) {
  if (!(r.uniform() < probability)) return false;
  const auto row = probs.row(i);
  const Token current = token;
  // Off-diagonal mass, summed directly rather than as 1 - p[current].
  double remainder = 0.0;
  for (Eigen::Index a = 0; a < row.size(); ++a) {
    if (a != current) remainder += row[a];
  }
  if (!(remainder > 0.0)) {
    throw NumericalError("apply_jumps: no off-diagonal mass to resample from");
  }
  const double target = r.uniform() * remainder;
  double acc = 0.0;
  Token pick = -1;
  for (Eigen::Index a = 0; a < row.size(); ++a) {
    if (a == current || row[a] <= 0.0) continue;
    acc += row[a];
    pick = static_cast<Token>(a);
    if (target < acc) break;
  }
  token = pick;
  return true;
}

}  // namespace

int apply_jumps_in_place(Sequence& state, const RowMatrix& probs, double scale, double h,
                         PositionStreams& rng, const std::vector<bool>* frozen,
                         std::vector<int>* change_counts) {
  const std::size_t length = state.size();
  if (static_cast<std::size_t>(probs.rows()) != length || rng.size() != length) {
    throw ValidationError("apply_jumps: state, posterior rows and RNG streams differ in length");
  }
  if (frozen && frozen->size() != length) throw ValidationError("apply_jumps: frozen mask length");
  int changed = 0;
  for (std::size_t i = 0; i < length; ++i) {
    if (frozen && (*frozen)[i]) continue;
    const auto row = static_cast<Eigen::Index>(i);
    const double p = jump_probability(scale, h, probs(row, state[i]));
    if (!jump_position(state[i], probs, row, p, rng[i])) continue;
    ++changed;
    if (change_counts) ++(*change_counts)[i];
  }
  return changed;
}

Sequence apply_jumps(const Sequence& state, const RowMatrix& probs, double scale, double h,
                     PositionStreams& rng, const std::vector<bool>* frozen) {
  Sequence next = state;
  apply_jumps_in_place(next, probs, scale, h, rng, frozen);
  return next;
}

Sequence jump_step(const Sequence& state, double t, double h, const PosteriorModel& model,
                   const Scheduler& scheduler, ScaleMode mode, PositionStreams& rng,
                   const std::vector<bool>* frozen, double temperature) {
  const double scale = scale_factor(scheduler, mode, t, h);
  const RowMatrix probs = model.probabilities(state, t, h, temperature);
  return apply_jumps(state, probs, scale, h, rng, frozen);
}

SampleResult integrate(const Sequence& initial, const PosteriorModel& model, const StepGrid& grid,
                       const Scheduler& scheduler, PositionStreams& rng,
                       const SamplerOptions& options, const std::vector<bool>* frozen) {
  const std::size_t length = initial.size();
  SampleResult result;
  auto& rec = result.record;
  rec.budget = grid.budget();
  rec.last_change.assign(length, 0);
  rec.change_counts.assign(length, 0);
  if (options.record_states) {
    rec.states.reserve(static_cast<std::size_t>(grid.budget()) + 1);
    rec.states.push_back(initial);
  }
  const long evals_before = model.evaluations();
  Sequence state = initial;
  const double h = grid.step();
  for (int s = 0; s < grid.budget(); ++s) {
    Sequence next = jump_step(state, grid.time(s), h, model, scheduler, options.mode, rng, frozen,
                              options.temperature);
    for (std::size_t i = 0; i < length; ++i) {
      if (next[i] != state[i]) {
        rec.last_change[i] = s + 1;
        ++rec.change_counts[i];
      }
    }
    state = std::move(next);
    if (options.record_states) rec.states.push_back(state);
    if (options.observer) options.observer(s + 1, state);
  }
  rec.nfe = model.evaluations() - evals_before;
  result.final = std::move(state);
  return result;
}

SampleResult run_sampler(const SourceSpec& source, const Vocab& vocab, std::size_t length,
                         const PosteriorModel& model, const StepGrid& grid,
                         const Scheduler& scheduler, TrajectoryRng& rng,
                         const SamplerOptions& options) {
  const Sequence initial = sample_source(source, vocab, length, rng.source);
  return integrate(initial, model, grid, scheduler, rng.positions, options);
}

Sequence recover(const Sequence& corrupted, const std::vector<bool>& changed,
                 const PosteriorModel& model, const StepGrid& grid, const Scheduler& scheduler,
                 PositionStreams& rng, bool freeze_context, const SamplerOptions& options) {
  if (changed.size() != corrupted.size()) {
    throw ValidationError("recover: changed mask length differs from the sequence");
  }
  std::vector<bool> frozen;
  if (freeze_context) {
    frozen.resize(changed.size());
    for (std::size_t i = 0; i < changed.size(); ++i) frozen[i] = !changed[i];
  }
  SamplerOptions opts = options;
  opts.record_states = false;
  return integrate(corrupted, model, grid, scheduler, rng, opts,
                   freeze_context ? &frozen : nullptr)
      .final;
}

double mean_jumps(const TrajectoryRecord& record) {
  if (record.change_counts.empty()) return 0.0;
  const double total =
      std::accumulate(record.change_counts.begin(), record.change_counts.end(), 0.0);
  return total / static_cast<double>(record.change_counts.size());
}

namespace {

struct SequenceHash {
  std::size_t operator()(const Sequence& z) const {
    std::size_t h = 0xcbf29ce484222325ULL;
    for (Token v : z) {
      h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(v));
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

// Slot of each distinct state within one step's batch. Small state spaces use
// a dense table indexed base-|V|; larger ones fall back to hashing.
class StateSlots {
 public:
  StateSlots(int vocab_size, std::size_t length) : vocab_size_(vocab_size) {
    const double states = std::pow(static_cast<double>(vocab_size), static_cast<double>(length));
    if (states <= kDenseLimit) dense_.assign(static_cast<std::size_t>(states), kEmpty);
  }

  void clear() {
    for (std::size_t key : touched_) dense_[key] = kEmpty;
    touched_.clear();
    map_.clear();
  }

  std::size_t find_or_add(const Sequence& z, std::vector<Sequence>& unique) {
    if (dense_.empty()) {
      auto [it, inserted] = map_.try_emplace(z, unique.size());
      if (inserted) unique.push_back(z);
      return it->second;
    }
    std::size_t key = 0;
    for (Token v : z) key = key * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(v);
    if (dense_[key] == kEmpty) {
      dense_[key] = unique.size();
      touched_.push_back(key);
      unique.push_back(z);
    }
    return dense_[key];
  }

 private:
  static constexpr double kDenseLimit = 1 << 20;
  static constexpr std::size_t kEmpty = static_cast<std::size_t>(-1);

  int vocab_size_;
  std::vector<std::size_t> dense_;
  std::vector<std::size_t> touched_;
  std::unordered_map<Sequence, std::size_t, SequenceHash> map_;
};

}  // namespace

EnsembleResult sample_ensemble(const SourceSpec& source, const Vocab& vocab, std::size_t length,
                               const PosteriorModel& model, const StepGrid& grid,
                               const Scheduler& scheduler, std::size_t count, std::uint64_t seed,
                               const EnsembleOptions& options) {
  if (options.chunk == 0) throw ConfigError("ensemble chunk size must be positive");
  EnsembleResult out;
  out.finals.reserve(count);
  out.change_counts.assign(length, 0);
  out.nfe_per_trajectory = grid.budget();
  const double h = grid.step();
  const long evals_before = model.evaluations();
  std::vector<long> lookups(count, 0);

  for (std::size_t begin = 0; begin < count; begin += options.chunk) {
    const std::size_t n = std::min(options.chunk, count - begin);
    std::vector<TrajectoryRng> rngs;
    rngs.reserve(n);
    std::vector<Sequence> states;
    states.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      rngs.emplace_back(seed, options.first_trajectory + begin + k, length);
      states.push_back(sample_source(source, vocab, length, rngs.back().source));
    }
    if (options.observer) options.observer(0, states);
    std::vector<std::size_t> slot(n);
    std::vector<Sequence> unique;
    StateSlots index(vocab.size(), length);
    for (int s = 0; s < grid.budget(); ++s) {
      const double t = grid.time(s);
      const double scale = scale_factor(scheduler, options.mode, t, h);
      unique.clear();
      index.clear();
      for (std::size_t k = 0; k < n; ++k) {
        if (!options.deduplicate) {
          slot[k] = unique.size();
          unique.push_back(states[k]);
          continue;
        }
        slot[k] = index.find_or_add(states[k], unique);
      }
      const auto probs = model.probabilities_batch(unique, std::vector<double>(unique.size(), t),
                                                   std::vector<double>(unique.size(), h),
                                                   options.temperature);
      // Jump probabilities depend only on the shared state, so compute them once.
      std::vector<double> jump(unique.size() * length);
      for (std::size_t u = 0; u < unique.size(); ++u) {
        if (static_cast<std::size_t>(probs[u].rows()) != length) {
          throw ValidationError("sample_ensemble: posterior rows differ from the state length");
        }
        for (std::size_t i = 0; i < length; ++i) {
          jump[u * length + i] =
              jump_probability(scale, h, probs[u](static_cast<Eigen::Index>(i), unique[u][i]));
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        ++lookups[begin + k];
        const std::size_t u = slot[k];
        for (std::size_t i = 0; i < length; ++i) {
          if (jump_position(states[k][i], probs[u], static_cast<Eigen::Index>(i),
                            jump[u * length + i], rngs[k].positions[i])) {
            ++out.change_counts[i];
          }
        }
      }
      if (options.observer) options.observer(s + 1, states);
    }
    for (auto& st : states) out.finals.push_back(std::move(st));
  }
  for (long c : lookups) {
    if (c != grid.budget()) {
      throw NumericalError("sample_ensemble: posterior lookups per trajectory differ from S");
    }
  }
  out.model_evaluations = model.evaluations() - evals_before;
  if (count > 0 && length > 0) {
    const double total = std::accumulate(out.change_counts.begin(), out.change_counts.end(), 0.0);
    out.mean_jumps = total / (static_cast<double>(count) * static_cast<double>(length));
  }
  return out;
}

void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryRecord& record) {
  if (record.states.empty()) {
    throw ValidationError("write_trajectory_csv: trajectory states were not recorded");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,position,token,changed\n";
  for (std::size_t s = 0; s < record.states.size(); ++s) {
    const auto& st = record.states[s];
    for (std::size_t i = 0; i < st.size(); ++i) {
      const bool changed = s > 0 && record.states[s - 1][i] != st[i];
      out << s << ',' << i << ',' << st[i] << ',' << (changed ? 1 : 0) << '\n';
    }
  }
}

}  // namespace stepflow
