#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stepflow/ctmc_sampler.hpp"
#include "stepflow/trainer_eval.hpp"

using namespace stepflow;

namespace {

NeuralDenoiserSpec small_checkerboard_spec(const Vocab& vocab) {
  NeuralDenoiserSpec spec;
  spec.vocab_size = vocab.size();
  spec.length = 2;
  spec.embed_dim = 4;
  spec.hidden_dim = 16;
  spec.depth = 1;
  spec.cond_dim = 8;
  spec.freq_dim = 4;
  spec.masked_target = vocab.mask_id();
  return spec;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("state indexing round trips with position 0 most significant") {
  CHECK(state_count(3, 4) == 81);
  CHECK(state_index({1, 0, 2}, 3) == 11);
  for (std::uint64_t s = 0; s < 81; ++s) CHECK(state_index(state_from_index(s, 3, 4), 3) == s);
  CHECK_THROWS_AS(state_count(1000, 10), ValidationError);
}

TEST_CASE("source distribution") {
  const auto mask = source_distribution({SourceKind::mask}, Vocab(3, Token{2}), 2);
  CHECK(mask[state_index({2, 2}, 3)] == 1.0);
  CHECK(mask.sum() == 1.0);
  const auto uni = source_distribution({SourceKind::uniform}, Vocab(3, Token{2}), 2);
  CHECK(uni[state_index({0, 1}, 3)] == doctest::Approx(0.25));
  CHECK(uni[state_index({2, 1}, 3)] == 0.0);
}

TEST_CASE("kolmogorov reference") {
  SUBCASE("symmetric two-state chain") {
    const GeneratorFn q = [](double) {
      Eigen::MatrixXd m(2, 2);
      m << -1, 1, 1, -1;
      return m;
    };
    const auto p = kolmogorov_reference(q, 0.0, 1.0, 10000);
    CHECK(std::abs(p(0, 0) - (1.0 + std::exp(-2.0)) / 2.0) <= 1e-4);
    CHECK(std::abs(p(0, 0) - 0.56767) <= 1e-4);
  }
  SUBCASE("zero generator is the identity") {
    const GeneratorFn q = [](double) { return Eigen::MatrixXd::Zero(4, 4).eval(); };
    CHECK(kolmogorov_reference(q, 0.0, 1.0, 100) == Eigen::MatrixXd::Identity(4, 4));
  }
  SUBCASE("random time-varying generators give stochastic matrices") {
    Rng rng(1);
    Eigen::MatrixXd base(5, 5);
    for (Eigen::Index k = 0; k < base.size(); ++k) base.data()[k] = rng.uniform();
    const GeneratorFn q = [&](double t) {
      Eigen::MatrixXd m = base * (1.0 + std::sin(3 * t));
      m.diagonal().setZero();
      m.diagonal() = -m.rowwise().sum();
      return m;
    };
    const auto p = kolmogorov_reference(q, 0.0, 1.0, 2000);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(std::abs(p.row(i).sum() - 1.0) <= 1e-6);
    CHECK(p.minCoeff() >= 0.0);
  }
  SUBCASE("invalid generators") {
    const GeneratorFn leaky = [](double) { return Eigen::MatrixXd::Ones(2, 2).eval(); };
    CHECK_THROWS_AS(kolmogorov_reference(leaky, 0.0, 1.0, 10), ValidationError);
    const GeneratorFn stiff = [](double) {
      Eigen::MatrixXd m(2, 2);
      m << -100, 100, 0, 0;
      return m;
    };
    CHECK_THROWS_AS(kolmogorov_reference(stiff, 0.0, 1.0, 10), NumericalError);
  }
}

TEST_CASE("model generator rows sum to zero and only change one position") {
  ExactBayesSpec spec{{{{0, 1}, 0.5}, {{1, 0}, 0.3}, {{1, 1}, 0.2}}, {SourceKind::uniform},
                      Vocab(2), Scheduler(SchedulerKind::linear)};
  const ExactBayesModel model(spec);
  const auto q = model_generator(model, 2, 2, 0.3, 1.0 / 1024, 1.7);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(q.row(i).sum()) <= 1e-12);
  // 00 -> 11 differs in two positions.
  CHECK(q(0, 3) == 0.0);
  const auto post = model.posterior({0, 0}, 0.3);
  CHECK(q(0, 1) == doctest::Approx(1.7 * post(1, 1)));
}

TEST_CASE("metrics") {
  Eigen::VectorXd a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(tv_distance(a, a) == 0.0);
  CHECK(tv_distance(a, b) == 1.0);
  a << 0.5, 0.5;
  b << 0.75, 0.25;
  CHECK(tv_distance(a, b) == doctest::Approx(0.25));
  CHECK_THROWS_AS(tv_distance(a, Eigen::VectorXd::Zero(3)), ValidationError);

  CHECK(entropy_metric(RowMatrix::Constant(3, 4, 0.25)) == doctest::Approx(std::log(4.0)));
  RowMatrix onehot = RowMatrix::Zero(2, 3);
  onehot(0, 1) = onehot(1, 2) = 1.0;
  CHECK(entropy_metric(onehot) == 0.0);
  RowMatrix half(1, 4);
  half << 0.5, 0.5, 0.0, 0.0;
  CHECK(entropy_metric(half) == doctest::Approx(std::log(2.0)));
  RowMatrix perm(1, 4);
  perm << 0.1, 0.2, 0.3, 0.4;
  RowMatrix permuted(1, 4);
  permuted << 0.3, 0.1, 0.4, 0.2;
  CHECK(entropy_metric(perm) == doctest::Approx(entropy_metric(permuted)));

  CHECK(token_accuracy({1, 2, 3}, {1, 2, 3}, {true, true, true}) == 1.0);
  CHECK(token_accuracy({0, 0, 3}, {1, 2, 3}, {true, true, false}) == 0.0);
  CHECK(token_accuracy({1, 0, 3, 0}, {1, 2, 3, 4}, {true, true, true, true}) == 0.5);
  CHECK_THROWS_WITH_AS(token_accuracy({1}, {1}, {false}), doctest::Contains("empty changed set"),
                       ValidationError);
}

TEST_CASE("jump distribution matches Monte Carlo jumps") {
  RowMatrix probs(2, 3);
  probs << 0.2, 0.5, 0.3, 0.6, 0.1, 0.3;
  const Sequence z = {0, 2};
  const auto exact = jump_distribution(probs, z, 2.0, 0.5, 3);
  CHECK(exact.sum() == doctest::Approx(1.0));
  PositionStreams rng(2, 0, 2);
  std::vector<Sequence> draws;
  for (int k = 0; k < 200000; ++k) draws.push_back(apply_jumps(z, probs, 2.0, 0.5, rng));
  CHECK(tv_distance(exact, empirical_distribution(draws, 3)) <= 0.01);
}

TEST_CASE("one cumulative step matches many instantaneous steps on a product target") {
  Eigen::Vector3d q1(0.2, 0.3, 0.5), q2(0.6, 0.1, 0.3);
  // Mask source: the jump hazard is exact under cumulative scales when the
  // denoiser is exact and the target factorizes. A uniform source is not
  // covered; its one-step kernel is biased even for independent positions.
  const Vocab vocab(4, 3);
  ExactBayesSpec spec{{}, {SourceKind::mask}, vocab, Scheduler(SchedulerKind::linear)};
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) spec.support.push_back({{a, b}, q1[a] * q2[b]});
  }
  const ExactBayesModel model(spec);
  const auto p0 = source_distribution(spec.source, vocab, 2);
  Eigen::VectorXd one_step = Eigen::VectorXd::Zero(16);
  for (std::uint64_t s = 0; s < 16; ++s) {
    if (p0[static_cast<Eigen::Index>(s)] == 0.0) continue;
    one_step += p0[static_cast<Eigen::Index>(s)] *
                one_step_distribution(model, spec.scheduler, state_from_index(s, 4, 2), 0.0, 1.0,
                                      ScaleMode::cumulative);
  }
  EnsembleOptions opts;
  opts.mode = ScaleMode::instantaneous;
  const auto many = sample_ensemble(spec.source, vocab, 2, model, StepGrid(1024), spec.scheduler,
                                    20000, 3, opts);
  CHECK(tv_distance(one_step, empirical_distribution(many.finals, 4)) <= 0.02);
}

TEST_CASE("self-consistency probe on the sixteen-state target") {
  ExactBayesSpec spec{{}, {SourceKind::uniform}, Vocab(4), Scheduler(SchedulerKind::quadratic)};
  const double joint[4][4] = {{.20, .05, .02, .03}, {.01, .15, .04, .05}, {.06, .02, .10, .02},
                              {.03, .07, .05, .10}};
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) spec.support.push_back({{a, b}, joint[a][b]});
  }
  const ExactBayesModel model(spec);
  const DataSampler data = [&](Rng& rng) {
    double u = rng.uniform();
    for (const auto& w : spec.support) {
      if ((u -= w.probability) <= 0) return w.tokens;
    }
    return spec.support.back().tokens;
  };
  const auto probes = make_probes(20, 0.75, data, spec.source, spec.vocab, 2, spec.scheduler, 4);
  CHECK(probes.size() == 20);
  for (const auto& p : probes) CHECK(p.t <= 0.75);
  const double kl = self_consistency_kl(model, spec.scheduler, probes, 0.25, ScaleMode::cumulative);
  CHECK(kl >= 0.0);
  CHECK(std::isfinite(kl));
  const auto two = two_half_steps_distribution(model, spec.scheduler, {0, 1}, 0.25, 0.25,
                                               ScaleMode::cumulative);
  CHECK(two.sum() == doctest::Approx(1.0));
  CHECK(kl_divergence(two, two) == 0.0);
}

TEST_CASE("reference likelihoods") {
  SUBCASE("samples from an explicit reference score its entropy") {
    std::vector<WeightedSequence> support = {
        {{0, 0, 1}, 0.4}, {{1, 2, 0}, 0.3}, {{2, 2, 2}, 0.2}, {{0, 1, 2}, 0.1}};
    const ExplicitReference ref(support, Vocab(3), 1e-3);
    Rng rng(5);
    std::vector<Sequence> samples;
    for (int k = 0; k < 40000; ++k) {
      if (rng.uniform() < 1e-3) {
        Sequence x(3);
        for (auto& v : x) v = static_cast<Token>(rng.below(3));
        samples.push_back(x);
        continue;
      }
      double u = rng.uniform();
      for (const auto& w : support) {
        if ((u -= w.probability) <= 0) {
          samples.push_back(w.tokens);
          break;
        }
      }
      if (samples.size() < static_cast<std::size_t>(k + 1)) samples.push_back(support.back().tokens);
    }
    const double nll = nll_eval(samples, ref);
    CHECK(std::abs(nll - ref.entropy_per_token()) <= 0.02 * ref.entropy_per_token());
  }
  SUBCASE("deterministic reference") {
    const ExplicitReference ref({{{1, 1}, 1.0}}, Vocab(2), 1e-6);
    CHECK(nll_eval({{1, 1}, {1, 1}}, ref) <= 1e-5);
  }
  SUBCASE("checkerboard cells score ln 128 + ln 64") {
    const CheckerboardSpec board;
    const CheckerboardReference ref(board, 1e-9);
    CHECK(-ref.log_prob({5, 70}) == doctest::Approx(std::log(128.0) + std::log(64.0)).epsilon(1e-6));
    CHECK(-ref.log_prob({5, 40}) > 20.0);
  }
  SUBCASE("trigram prefers the text it was fitted on") {
    const Vocab vocab(4);
    std::vector<Sequence> corpus(50, Sequence{0, 1, 2, 0, 1, 2});
    const TrigramReference ref(corpus, vocab);
    CHECK(ref.log_prob({0, 1, 2, 0}) > ref.log_prob({2, 1, 0, 3}));
    CHECK(std::isfinite(ref.log_prob({3, 3, 3})));
  }
}

TEST_CASE("training loops") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const TrainingData data = checkerboard_data(board, source);
  const auto spec = small_checkerboard_spec(data.vocab);

  TrainConfig pre;
  pre.phase = TrainPhase::pretrain;
  pre.batch_size = 8;
  pre.steps = 20;
  pre.seed = 6;
  pre.source = source;

  SUBCASE("zero learning rate leaves the parameters untouched") {
    TrainConfig cfg = pre;
    cfg.learning_rate = 0.0;
    NeuralDenoiser model(spec, 1);
    const Eigen::VectorXd before = model.parameters();
    pretrain_loop(cfg, data, model);
    CHECK(model.parameters() == before);
  }

  SUBCASE("fixed seeds give bit-identical loss curves") {
    NeuralDenoiser a(spec, 1), b(spec, 1);
    const auto ra = pretrain_loop(pre, data, a);
    const auto rb = pretrain_loop(pre, data, b);
    REQUIRE(ra.curve.size() == 20);
    for (std::size_t k = 0; k < ra.curve.size(); ++k) CHECK(ra.curve[k].loss == rb.curve[k].loss);
    CHECK(a.parameters() == b.parameters());
    CHECK(ra.student_evaluations == 160);
    CHECK(ra.teacher_evaluations == 0);
  }

  SUBCASE("fine-tuning spends one student pass plus the teacher's evaluations") {
    NeuralDenoiser model(spec, 2);
    for (auto kind : {TeacherKind::rk2, TeacherKind::rk4}) {
      TrainConfig cfg = pre;
      cfg.phase = TrainPhase::finetune;
      cfg.scale_mode = ScaleMode::cumulative;
      cfg.steps = 3;
      cfg.policy = {PolicyKind::tb20};
      cfg.blend.tau = std::ldexp(1.0, -10);  // every h is at or above tau
      cfg.teacher.kind = kind;
      EmaRegistry ema(model.parameters(), 0.99);
      const auto r = finetune_loop(cfg, data, model, ema);
      CHECK(r.student_evaluations == 24);
      CHECK(r.teacher_evaluations == 24 * teacher_evaluations(kind));
      for (const auto& row : r.curve) CHECK(row.branch == "distill");
    }
  }

  SUBCASE("fine-tuning below tau is the path loss with cumulative scales") {
    NeuralDenoiser model(spec, 3);
    TrainConfig cfg = pre;
    cfg.phase = TrainPhase::finetune;
    cfg.scale_mode = ScaleMode::cumulative;
    cfg.steps = 40;
    cfg.batch_size = 1;
    cfg.blend.tau = 1.0;
    EmaRegistry ema(model.parameters());
    const auto r = finetune_loop(cfg, data, model, ema);
    long distilled = 0;
    for (const auto& row : r.curve) {
      CHECK(row.branch == (row.h < 1.0 ? "dfm" : "distill"));
      if (row.branch == "distill") ++distilled;
    }
    CHECK(r.teacher_evaluations == distilled * teacher_evaluations(cfg.teacher.kind));
  }

  SUBCASE("phase and scale mode are checked") {
    NeuralDenoiser model(spec, 4);
    TrainConfig cfg = pre;
    cfg.scale_mode = ScaleMode::cumulative;
    CHECK_THROWS_AS(pretrain_loop(cfg, data, model), ConfigError);
  }
}

TEST_CASE("sampler evaluation and metrics CSV") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::uniform};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  const TrainingData data = checkerboard_data(board, source);
  const CheckerboardReference ref(board);
  const auto eval = evaluate_sampler(model, data, source, sched, ref, 8, ScaleMode::cumulative, 2000, 7);
  CHECK(eval.finals.size() == 2000);
  const double valid = checkerboard_valid_fraction(board, eval.finals);
  MESSAGE("exact denoiser, S=8 cumulative: valid fraction " << valid << ", nll " << eval.row.nll);
  // Both positions usually jump together in the clamped final step and draw
  // from independent marginals, so eight steps lose about a fifth of the mass.
  CHECK(valid >= 0.75);
  CHECK(std::isfinite(eval.row.entropy));
  const auto fine = evaluate_sampler(model, data, source, sched, ref, 64, ScaleMode::cumulative, 2000, 7);
  CHECK(checkerboard_valid_fraction(board, fine.finals) >= 0.95);

  const auto dir = std::filesystem::temp_directory_path() / "stepflow_metrics_test";
  std::filesystem::create_directories(dir);
  write_metrics_csv(dir / "a.csv", {eval.row});
  const auto again = evaluate_sampler(model, data, source, sched, ref, 8, ScaleMode::cumulative, 2000, 7);
  write_metrics_csv(dir / "b.csv", {again.row});
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(slurp(dir / "a.csv").rfind("budget,mode,entropy_nats", 0) == 0);
  std::filesystem::remove_all(dir);
}
