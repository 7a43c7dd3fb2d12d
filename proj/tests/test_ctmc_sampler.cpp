#include <doctest.h>

#include <cmath>

#include "stepflow/ctmc_sampler.hpp"
#include "stepflow/trainer_eval.hpp"

using namespace stepflow;

TEST_CASE("step grid") {
  const StepGrid grid(8);
  CHECK(grid.time(0) == 0.0);
  CHECK(grid.time(8) == 1.0);
  CHECK(grid.step() == 0.125);
  CHECK_THROWS_AS(StepGrid(0), ConfigError);
}

TEST_CASE("one-hot posterior at the current token never jumps") {
  RowMatrix probs = RowMatrix::Zero(4, 3);
  for (int i = 0; i < 4; ++i) probs(i, i % 3) = 1.0;
  const Sequence state = {0, 1, 2, 0};
  PositionStreams rng(1, 0, 4);
  for (int k = 0; k < 1000; ++k) CHECK(apply_jumps(state, probs, 50.0, 1.0, rng) == state);
}

TEST_CASE("jump probability follows the exponential holding time") {
  // exit rate 2 = scale 4 * (1 - 0.5); h = 0.25.
  RowMatrix probs(1, 2);
  probs << 0.5, 0.5;
  PositionStreams rng(2, 0, 1);
  const int trials = 400000;
  int jumps = 0;
  for (int k = 0; k < trials; ++k) jumps += apply_jumps({0}, probs, 4.0, 0.25, rng)[0] != 0;
  const double expected = 1.0 - std::exp(-0.5);
  CHECK(expected == doctest::Approx(0.39347).epsilon(1e-4));
  const double se = std::sqrt(expected * (1 - expected) / trials);
  CHECK(std::abs(jumps / double(trials) - expected) <= 5 * se);
}

TEST_CASE("jump destination is the renormalized off-diagonal posterior") {
  RowMatrix probs(1, 3);
  probs << 0.2, 0.5, 0.3;
  PositionStreams rng(3, 0, 1);
  long jumped = 0, to_one = 0;
  for (int k = 0; k < 1000000; ++k) {
    const Token next = apply_jumps({0}, probs, 1.0, 1.0, rng)[0];
    if (next != 0) {
      ++jumped;
      to_one += next == 1;
    }
  }
  CHECK(std::abs(double(to_one) / jumped - 0.625) <= 0.005);
}

TEST_CASE("frozen positions and change counts") {
  RowMatrix probs(2, 2);
  probs << 0.0, 1.0, 0.0, 1.0;
  Sequence state = {0, 0};
  const std::vector<bool> frozen = {true, false};
  std::vector<int> counts(2, 0);
  PositionStreams rng(4, 0, 2);
  // Scale large enough that the unfrozen position jumps with certainty in double.
  const int changed = apply_jumps_in_place(state, probs, 1e4, 1.0, rng, &frozen, &counts);
  CHECK(changed == 1);
  CHECK(state == Sequence{0, 1});
  CHECK(counts == std::vector<int>{0, 1});
}

TEST_CASE("quadratic scheduler at one instantaneous step leaves the mask source untouched") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::quadratic);
  const auto model = checkerboard_bayes_model(board, source, sched);
  TrajectoryRng rng(5, 0, 2);
  SamplerOptions opts;
  opts.mode = ScaleMode::instantaneous;
  const auto res = run_sampler(source, model.vocab(), 2, model, StepGrid(1), sched, rng, opts);
  CHECK(res.final == Sequence{128, 128});
  CHECK(res.record.nfe == 1);
}

TEST_CASE("one cumulative step with a linear scheduler unmasks almost everything") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  EnsembleOptions opts;
  opts.mode = ScaleMode::cumulative;
  const auto res = sample_ensemble(source, model.vocab(), 2, model, StepGrid(1), sched, 5000, 6, opts);
  long masked = 0;
  for (const auto& s : res.finals) {
    for (Token v : s) masked += v == 128;
  }
  CHECK(masked / 10000.0 <= 1e-3);
}

TEST_CASE("every run spends exactly S evaluations") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  for (int S : {1, 3, 8, 33}) {
    for (auto mode : {ScaleMode::instantaneous, ScaleMode::cumulative}) {
      TrajectoryRng rng(7, static_cast<std::uint64_t>(S), 2);
      SamplerOptions opts;
      opts.mode = mode;
      const auto res = run_sampler(source, model.vocab(), 2, model, StepGrid(S), sched, rng, opts);
      CHECK(res.record.nfe == S);
      CHECK(res.record.states.size() == static_cast<std::size_t>(S + 1));
      for (int lc : res.record.last_change) {
        CHECK(lc >= 0);
        CHECK(lc <= S);
      }
    }
  }
}

TEST_CASE("trajectory records are consistent with the stored states") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  TrajectoryRng rng(8, 0, 2);
  const auto res = run_sampler(source, model.vocab(), 2, model, StepGrid(16), sched, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    int last = 0, count = 0;
    for (int s = 1; s <= 16; ++s) {
      if (res.record.states[static_cast<std::size_t>(s)][i] !=
          res.record.states[static_cast<std::size_t>(s - 1)][i]) {
        last = s;
        ++count;
      }
    }
    CHECK(res.record.last_change[i] == last);
    CHECK(res.record.change_counts[i] == count);
  }
  CHECK(res.final == res.record.states.back());
}

TEST_CASE("ensemble sampling reproduces independent runs") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  const StepGrid grid(6);
  EnsembleOptions opts;
  opts.chunk = 7;
  const auto ens = sample_ensemble(source, model.vocab(), 2, model, grid, sched, 20, 9, opts);
  CHECK(ens.nfe_per_trajectory == 6);
  CHECK(ens.model_evaluations <= 20 * 6);
  double jumps = 0.0;
  for (std::uint64_t n = 0; n < 20; ++n) {
    TrajectoryRng rng(9, n, 2);
    const auto single = run_sampler(source, model.vocab(), 2, model, grid, sched, rng);
    CHECK(single.final == ens.finals[n]);
    jumps += mean_jumps(single.record);
  }
  CHECK(ens.mean_jumps == doctest::Approx(jumps / 20.0));
}

TEST_CASE("identical seeds give identical trajectories") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::quadratic);
  const auto model = checkerboard_bayes_model(board, source, sched);
  TrajectoryRng a(10, 3, 2), b(10, 3, 2);
  const auto ra = run_sampler(source, model.vocab(), 2, model, StepGrid(32), sched, a);
  const auto rb = run_sampler(source, model.vocab(), 2, model, StepGrid(32), sched, b);
  CHECK(ra.record.states == rb.record.states);
}

TEST_CASE("mask-source survival matches 1 - kappa(t)") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::quadratic);
  const auto model = checkerboard_bayes_model(board, source, sched);
  const int S = 256;
  std::vector<long> unmasked(S + 1, 0);
  EnsembleOptions opts;
  opts.mode = ScaleMode::instantaneous;
  opts.observer = [&](int step, const std::vector<Sequence>& states) {
    for (const auto& s : states) {
      for (Token v : s) unmasked[static_cast<std::size_t>(step)] += v != 128;
    }
  };
  sample_ensemble(source, model.vocab(), 2, model, StepGrid(S), sched, 5000, 11, opts);
  for (int s : {S / 4, S / 2, 3 * S / 4}) {
    const double t = static_cast<double>(s) / S;
    CHECK(std::abs(unmasked[static_cast<std::size_t>(s)] / 10000.0 - t * t) <= 0.02);
  }
}

TEST_CASE("recovery") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  Rng data_rng(12);

  SUBCASE("nothing changed and context frozen returns the input") {
    const Sequence x = checkerboard_sample(board, data_rng);
    PositionStreams rng(12, 0, 2);
    CHECK(recover(x, {false, false}, model, StepGrid(8), sched, rng, true) == x);
  }

  SUBCASE("more steps with cumulative scales recover at least as well") {
    long correct_fast = 0, correct_slow = 0, total = 0;
    for (std::uint64_t n = 0; n < 4000; ++n) {
      const Sequence x = checkerboard_sample(board, data_rng);
      const auto c = corrupt(x, 0.5, model.vocab(), data_rng);
      PositionStreams r1(13, n, 2), r8(13, n, 2);
      SamplerOptions inst;
      inst.mode = ScaleMode::instantaneous;
      SamplerOptions cumul;
      cumul.mode = ScaleMode::cumulative;
      const auto y1 = recover(c.corrupted, c.changed, model, StepGrid(1), sched, r1, true, inst);
      const auto y8 = recover(c.corrupted, c.changed, model, StepGrid(8), sched, r8, true, cumul);
      for (std::size_t i = 0; i < 2; ++i) {
        if (!c.changed[i]) continue;
        ++total;
        correct_fast += y1[i] == x[i];
        correct_slow += y8[i] == x[i];
      }
    }
    MESSAGE("recovery accuracy S=1 instantaneous: " << double(correct_fast) / total
                                                    << ", S=8 cumulative: "
                                                    << double(correct_slow) / total);
    CHECK(correct_slow >= correct_fast);
  }
}

TEST_CASE("mean jumps") {
  TrajectoryRecord r;
  r.change_counts = {0, 0, 0};
  CHECK(mean_jumps(r) == 0.0);
  r.change_counts = {1, 1, 1};
  CHECK(mean_jumps(r) == 1.0);
}

TEST_CASE("uniform-source mean jumps on the checkerboard") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  EnsembleOptions opts;
  opts.mode = ScaleMode::instantaneous;
  const auto res = sample_ensemble(source, model.vocab(), 2, model, StepGrid(1024), sched, 500, 14, opts);
  MESSAGE("mean jumps per token at S=1024: " << res.mean_jumps);
  CHECK(res.mean_jumps >= 0.5);
  CHECK(res.mean_jumps <= 1.5);
}
