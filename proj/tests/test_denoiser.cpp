#include <doctest.h>

#include <cmath>

#include "stepflow/denoiser.hpp"
#include "stepflow/trainer_eval.hpp"

using namespace stepflow;

namespace {

// Independent route: linear-domain sum over the support of p1(x) * prod_j lik(z_j | x_j).
RowMatrix brute_force_posterior(const ExactBayesSpec& spec, const Sequence& z, double t) {
  const double kappa = kappa_eval(spec.scheduler, t).kappa;
  const int vocab = spec.vocab.size();
  RowMatrix acc = RowMatrix::Zero(static_cast<Eigen::Index>(z.size()), vocab);
  for (const auto& w : spec.support) {
    double weight = w.probability;
    for (std::size_t j = 0; j < z.size(); ++j) {
      double lik;
      if (spec.source.kind == SourceKind::mask) {
        lik = spec.vocab.is_mask(z[j]) ? 1.0 - kappa : (z[j] == w.tokens[j] ? kappa : 0.0);
      } else {
        lik = spec.vocab.is_mask(z[j]) ? 0.0
                                       : (1.0 - kappa) / spec.vocab.data_size() +
                                             (z[j] == w.tokens[j] ? kappa : 0.0);
      }
      weight *= lik;
    }
    for (std::size_t i = 0; i < z.size(); ++i) acc(static_cast<Eigen::Index>(i), w.tokens[i]) += weight;
  }
  for (Eigen::Index i = 0; i < acc.rows(); ++i) acc.row(i) /= acc.row(i).sum();
  return acc;
}

ExactBayesSpec random_spec(Rng& rng, SourceKind source, int data_size, std::size_t length) {
  const bool mask = source == SourceKind::mask;
  ExactBayesSpec spec{{}, {source},
                      Vocab(data_size + (mask ? 1 : 0),
                            mask ? std::optional<Token>(static_cast<Token>(data_size)) : std::nullopt),
                      Scheduler(SchedulerKind::quadratic)};
  const auto n = state_count(data_size, length);
  double total = 0.0;
  for (std::uint64_t s = 0; s < n; ++s) {
    if (rng.uniform() < 0.4) continue;
    const double p = rng.uniform();
    spec.support.push_back({state_from_index(s, data_size, length), p});
    total += p;
  }
  for (auto& w : spec.support) w.probability /= total;
  return spec;
}

}  // namespace

TEST_CASE("softmax rows and impossible logits") {
  RowMatrix logits(2, 3);
  logits << 0.0, 1.0, 2.0, kImpossibleLogit, 0.0, 0.0;
  const auto p = softmax_rows(logits);
  CHECK(p.row(0).sum() == doctest::Approx(1.0));
  CHECK(p(0, 2) == doctest::Approx(std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0))));
  CHECK(p(1, 0) == 0.0);
  CHECK(p(1, 1) == doctest::Approx(0.5));
  const auto lp = log_softmax_rows(logits);
  CHECK(std::exp(lp(0, 1)) == doctest::Approx(p(0, 1)));
  CHECK(softmax_rows(logits, 1e6)(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
}

TEST_CASE("exact posterior agrees with brute-force enumeration") {
  Rng rng(21);
  for (auto source : {SourceKind::mask, SourceKind::uniform}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto spec = random_spec(rng, source, 3, 3);
      const ExactBayesModel model(spec);
      // Draw (z, t) from the path so the evidence is positive.
      const double t = 0.95 * rng.uniform();
      const auto& x1 = spec.support[rng.below(spec.support.size())].tokens;
      const auto x0 = sample_source(spec.source, spec.vocab, 3, rng);
      const auto z = sample_conditional_xt(x0, x1, t, spec.scheduler, rng);
      const auto exact = model.posterior(z, t);
      const auto oracle = brute_force_posterior(spec, z, t);
      CHECK((exact - oracle).cwiseAbs().maxCoeff() <= 1e-12);
      for (Eigen::Index i = 0; i < exact.rows(); ++i) {
        CHECK(exact.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
        if (spec.vocab.has_mask()) CHECK(exact(i, *spec.vocab.mask_id()) == 0.0);
      }
    }
  }
}

TEST_CASE("all-mask state gives the data marginals") {
  Rng rng(22);
  const auto spec = random_spec(rng, SourceKind::mask, 3, 2);
  const ExactBayesModel model(spec);
  RowMatrix marginal = RowMatrix::Zero(2, 4);
  for (const auto& w : spec.support) {
    for (std::size_t i = 0; i < 2; ++i) marginal(static_cast<Eigen::Index>(i), w.tokens[i]) += w.probability;
  }
  for (double t : {0.0, 0.4, 0.9}) {
    CHECK((model.posterior({3, 3}, t) - marginal).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("near t = 1 the uniform-source posterior concentrates on z") {
  Rng rng(23);
  auto spec = random_spec(rng, SourceKind::uniform, 3, 2);
  spec.scheduler = Scheduler(SchedulerKind::linear);
  const ExactBayesModel lin(spec);
  const Sequence z = spec.support.front().tokens;
  const auto post = lin.posterior(z, 1.0 - 1e-9);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(post(static_cast<Eigen::Index>(i), z[i]) >= 1.0 - 1e-6);
}

TEST_CASE("impossible evidence and invalid specs") {
  ExactBayesSpec spec{{{{0, 1}, 1.0}}, {SourceKind::mask}, Vocab(3, Token{2}),
                      Scheduler(SchedulerKind::linear)};
  const ExactBayesModel model(spec);
  CHECK_THROWS_AS(model.posterior({1, 2}, 0.5), EvidenceError);
  CHECK_THROWS_AS(model.posterior({2, 2}, 1.0), DomainError);
  auto bad = spec;
  bad.support.front().probability = 0.9;
  CHECK_THROWS_AS(validate(bad), ValidationError);
  bad = spec;
  bad.support.front().tokens = {0, 2};
  CHECK_THROWS_AS(validate(bad), ValidationError);
}

TEST_CASE("checkerboard posterior for a half-observed state") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::linear);
  const auto model = checkerboard_bayes_model(board, source, sched);
  const auto post = model.posterior({5, 128}, 0.9);
  for (int b = 0; b < 128; ++b) {
    const bool even = (b / 32) % 2 == 0;
    if (even) {
      CHECK(post(1, b) == doctest::Approx(1.0 / 64.0));
    } else {
      CHECK(post(1, b) <= 1e-3);
    }
  }
  CHECK(post(0, 5) == doctest::Approx(1.0));
  CHECK(post(1, 128) == 0.0);
}

TEST_CASE("bivariate closed form equals generic enumeration") {
  Rng rng(24);
  for (auto kind : {SourceKind::mask, SourceKind::uniform}) {
    const CheckerboardSpec board;
    const SourceSpec source{kind};
    const Scheduler sched(SchedulerKind::quadratic);
    const auto fast = checkerboard_bayes_model(board, source, sched);
    const ExactBayesModel slow(checkerboard_bayes_spec(board, source, sched));
    for (int k = 0; k < 10; ++k) {
      const double t = 0.98 * rng.uniform();
      const auto x1 = checkerboard_sample(board, rng);
      const auto x0 = sample_source(source, fast.vocab(), 2, rng);
      const auto z = sample_conditional_xt(x0, x1, t, sched, rng);
      CHECK((fast.posterior(z, t) - slow.posterior(z, t)).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("product-form targets factorize") {
  // p1 = q1 x q2; the posterior at position i only depends on z_i.
  Eigen::Vector3d q1(0.2, 0.3, 0.5), q2(0.6, 0.1, 0.3);
  ExactBayesSpec spec{{}, {SourceKind::uniform}, Vocab(3), Scheduler(SchedulerKind::linear)};
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) spec.support.push_back({{a, b}, q1[a] * q2[b]});
  }
  const ExactBayesModel model(spec);
  const double t = 0.35;
  const Sequence z = {1, 2};
  const auto post = model.posterior(z, t);
  auto closed = [&](const Eigen::Vector3d& q, Token zi) {
    Eigen::Vector3d w;
    for (int a = 0; a < 3; ++a) w[a] = q[a] * ((1 - t) / 3 + (a == zi ? t : 0.0));
    return Eigen::Vector3d(w / w.sum());
  };
  CHECK((post.row(0).transpose() - closed(q1, 1)).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((post.row(1).transpose() - closed(q2, 2)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("evaluation counting") {
  ExactBayesSpec spec{{{{0}, 0.5}, {{1}, 0.5}}, {SourceKind::uniform}, Vocab(2),
                      Scheduler(SchedulerKind::linear)};
  const ExactBayesModel model(spec);
  model.logits({0}, 0.1, 0.5);
  model.logits_batch({{0}, {1}, {1}}, {0.1, 0.2, 0.3}, {0.5, 0.5, 0.5});
  CHECK(model.evaluations() == 4);
  const ExactBayesModel copy = model;
  CHECK(copy.evaluations() == 0);
  model.reset_evaluations();
  CHECK(model.evaluations() == 0);
}

TEST_CASE("tabular model: smoothing and repeated pairs") {
  const Vocab vocab(4);
  TabularModel empty(vocab, 2, 4, TabularKey::full_state);
  const auto uniform = empty.posterior({0, 1}, 0.3);
  CHECK((uniform.array() - 0.25).abs().maxCoeff() <= 1e-15);

  TabularModel model(vocab, 1, 1, TabularKey::full_state);
  for (int k = 0; k < 10000; ++k) model.add({2}, {3}, 0.5);
  const auto row = model.posterior({2}, 0.5);
  CHECK(row(0, 3) == doctest::Approx(10001.0 / 10004.0));
  CHECK(row(0, 3) >= 0.99);
  CHECK_THROWS_AS(TabularModel(Vocab(9), 4, 1, TabularKey::full_state), ConfigError);
  CHECK_THROWS_AS(TabularModel(Vocab(4), 2, 1, TabularKey::mask_context), ConfigError);
}

TEST_CASE("tabular fit on checkerboard pairs approaches the exact posterior") {
  const CheckerboardSpec board;
  const SourceSpec source{SourceKind::mask};
  const Scheduler sched(SchedulerKind::linear);
  const Vocab vocab = checkerboard_vocab(board, source);
  // Masked positions of a mask-source posterior do not depend on t, so one
  // t bin suffices under the masked-context key.
  TabularModel model(vocab, 2, 1, TabularKey::mask_context);
  Rng rng(25);
  for (int k = 0; k < 1000000; ++k) {
    const auto x1 = checkerboard_sample(board, rng);
    const double t = rng.uniform();
    const auto z = sample_conditional_xt(sample_source(source, vocab, 2, rng), x1, t, sched, rng);
    model.add(z, x1, t);
  }
  const auto exact = checkerboard_bayes_model(board, source, sched);
  double total = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double t = rng.uniform() * 0.99;
    const auto x1 = checkerboard_sample(board, rng);
    const auto z = sample_conditional_xt(sample_source(source, vocab, 2, rng), x1, t, sched, rng);
    const auto a = model.posterior(z, t);
    const auto b = exact.posterior(z, t);
    double tv = 0.0;
    for (Eigen::Index i = 0; i < 2; ++i) tv += 0.5 * (a.row(i) - b.row(i)).cwiseAbs().sum() / 2.0;
    total += tv;
  }
  CHECK(total / 100.0 <= 0.05);
}

TEST_CASE("cached model returns the inner logits and counts its own calls") {
  ExactBayesSpec spec{{{{0, 1}, 0.4}, {{1, 1}, 0.6}}, {SourceKind::uniform}, Vocab(2),
                      Scheduler(SchedulerKind::linear)};
  const ExactBayesModel inner(spec);
  const CachedModel cached(inner);
  const auto a = cached.logits({0, 1}, 0.25, 0.5);
  const auto b = cached.logits({0, 1}, 0.25, 0.5);
  CHECK(a == b);
  CHECK(a == inner.logits({0, 1}, 0.25, 0.5));
  CHECK(cached.evaluations() == 2);
  CHECK(cached.cache_size() == 1);
}
