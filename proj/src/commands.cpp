#include "stepflow/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "stepflow/ctmc_sampler.hpp"
#include "stepflow/errors.hpp"
#include "stepflow/kinetics.hpp"
#include "stepflow/objective.hpp"
#include "stepflow/timeline.hpp"

namespace stepflow {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const IoError*>(&e)) return kExitUsage;
  return kExitValidation;
}

// ---------------------------------------------------------------------------
// Oracle battery

OracleFixture load_fixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read fixture " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed fixture " + path.string() + ": " + e.what());
  }
  try {
    const int vocab_size = doc.at("vocab_size").get<int>();
    const auto length = doc.at("length").get<std::size_t>();
    const SourceSpec source{parse_source_kind(doc.at("source").get<std::string>())};
    std::optional<Token> mask;
    if (source.kind == SourceKind::mask) mask = static_cast<Token>(vocab_size - 1);
    OracleFixture f{doc.value("name", path.stem().string()),
                    ExactBayesSpec{{},
                                   source,
                                   Vocab(vocab_size, mask),
                                   Scheduler(parse_scheduler_kind(doc.at("scheduler").get<std::string>()),
                                             doc.value("clamp_epsilon", 1e-4))}};
    for (const auto& entry : doc.at("support")) {
      f.spec.support.push_back(
          {entry.at("tokens").get<Sequence>(), entry.at("probability").get<double>()});
    }
    for (const auto& w : f.spec.support) {
      if (w.tokens.size() != length) throw ValidationError("fixture support length mismatch");
    }
    validate(f.spec);
    return f;
  } catch (const json::exception& e) {
    throw ConfigError("fixture " + path.string() + " is missing fields: " + e.what());
  }
}

KolmogorovComparison compare_with_kolmogorov(const ExactBayesSpec& spec, std::size_t trajectories,
                                             int budget, std::uint64_t seed, int fine_steps) {
  const ExactBayesModel exact(spec);
  const int vocab_size = spec.vocab.size();
  const std::size_t length = spec.length();
  if (state_count(vocab_size, length) > 16) {
    throw ValidationError("Kolmogorov comparison is limited to 16 states");
  }

  const MatrixXd transition = kolmogorov_reference(
      instantaneous_generator(exact, spec.scheduler, vocab_size, length), 0.0, 1.0, fine_steps);
  KolmogorovComparison out;
  out.reference =
      (source_distribution(spec.source, spec.vocab, length).transpose() * transition).transpose();

  const CachedModel cached(exact);
  EnsembleOptions options;
  options.mode = ScaleMode::instantaneous;
  options.chunk = 1024;
  const auto ensemble = sample_ensemble(spec.source, spec.vocab, length, cached, StepGrid(budget),
                                        spec.scheduler, trajectories, seed, options);
  out.nfe_per_trajectory = ensemble.nfe_per_trajectory;
  out.empirical = empirical_distribution(ensemble.finals, vocab_size);
  out.tv = tv_distance(out.reference, out.empirical);
  return out;
}

double neural_gradient_check(const NeuralDenoiserSpec& spec, std::uint64_t seed, int coordinates) {
  const ParameterLayout layout(spec);
  Rng rng = Rng::stream(seed, {0x6772616400ULL});
  VectorXd params = init_parameters(spec, seed);
  // Move off the zero-initialized head so every tensor carries gradient.
  for (Eigen::Index k = 0; k < params.size(); ++k) params[k] += 0.2 * (rng.uniform() - 0.5);

  const std::size_t batch = 3;
  std::vector<Sequence> z;
  std::vector<double> t, h;
  for (std::size_t b = 0; b < batch; ++b) {
    Sequence s(static_cast<std::size_t>(spec.length));
    for (auto& v : s) v = static_cast<Token>(rng.below(static_cast<std::size_t>(spec.vocab_size)));
    z.push_back(s);
    t.push_back(rng.uniform());
    h.push_back(std::ldexp(1.0, -static_cast<int>(rng.below(11))));
  }
  MatrixXd weights(static_cast<Eigen::Index>(spec.length) * spec.vocab_size,
                   static_cast<Eigen::Index>(batch));
  for (Eigen::Index k = 0; k < weights.size(); ++k) weights.data()[k] = rng.uniform(-1.0, 1.0);
  if (spec.masked_target) {
    for (int i = 0; i < spec.length; ++i) weights.row(i * spec.vocab_size + *spec.masked_target).setZero();
  }

  auto objective = [&](const VectorXd& p) {
    return (weights.array() * neural_forward_batch(spec, layout, p, z, t, h).array()).sum();
  };
  ForwardCache cache;
  neural_forward_batch(spec, layout, params, z, t, h, &cache);
  const VectorXd analytic = neural_backward(spec, layout, params, cache, weights);

  std::vector<Eigen::Index> picks;
  if (coordinates <= 0 || coordinates >= params.size()) {
    for (Eigen::Index k = 0; k < params.size(); ++k) picks.push_back(k);
  } else {
    for (int c = 0; c < coordinates; ++c) {
      picks.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(params.size()))));
    }
  }
  const double step = 1e-5;
  double worst = 0.0;
  VectorXd probe = params;
  for (Eigen::Index k : picks) {
    probe[k] = params[k] + step;
    const double up = objective(probe);
    probe[k] = params[k] - step;
    const double down = objective(probe);
    probe[k] = params[k];
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max(std::abs(analytic[k]) + std::abs(numeric), 1e-6);
    worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
  }
  return worst;
}

std::vector<OracleCheck> run_oracle_battery(const OracleFixture& fixture, std::uint64_t seed,
                                            std::size_t trajectories) {
  std::vector<OracleCheck> checks;
  Rng rng = Rng::stream(seed, {0x6f7261636c65ULL});

  {
    // Rate rows from random posteriors: off-diagonals non-negative, rows sum to 0.
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      VectorXd p(8);
      for (Eigen::Index a = 0; a < p.size(); ++a) p[a] = rng.uniform();
      p /= p.sum();
      const Token current = static_cast<Token>(rng.below(8));
      const double scale = 100.0 * rng.uniform();
      const RateRow row = rate_row_from_posterior(p.transpose(), current, scale);
      worst = std::max(worst, std::abs(row.rates.sum()));
      for (Eigen::Index a = 0; a < p.size(); ++a) {
        if (a != current) worst = std::max(worst, -row.rates[a]);
      }
      worst = std::max(worst, std::abs(row.exit_rate() - scale * (1.0 - p[current])));
    }
    checks.push_back({"rate_row_conditions", worst, 1e-9, worst <= 1e-9});
  }
  {
    double worst = 0.0;
    for (auto kind : {SchedulerKind::linear, SchedulerKind::quadratic}) {
      const Scheduler sched(kind);
      for (int k = 0; k < 100; ++k) {
        // Quadratic g vanishes at t = 0; keep t away from it.
        const double t = std::max(0.99 * rng.uniform(), 1e-3);
        const double g = g_instant(sched, t);
        const double gbar = g_cumulative(sched, TimeInterval(t, 1e-6));
        worst = std::max(worst, std::abs(gbar - g) / g);
      }
    }
    checks.push_back({"cumulative_scalar_limit", worst, 1e-3, worst <= 1e-3});
  }
  {
    const int draws = 100000;
    RowMatrix probs(1, 4);
    probs << 0.1, 0.2, 0.3, 0.4;
    const double scale = 3.0, h = 0.2;
    const Token current = 1;
    PositionStreams streams(seed, 0x6a756d70ULL, 1);
    int jumps = 0;
    VectorXd dest = VectorXd::Zero(4);
    for (int k = 0; k < draws; ++k) {
      Sequence s{current};
      apply_jumps_in_place(s, probs, scale, h, streams);
      if (s[0] != current) {
        ++jumps;
        dest[s[0]] += 1.0;
      }
    }
    const double expected = -std::expm1(-h * scale * (1.0 - probs(0, current)));
    const double rate_error = std::abs(static_cast<double>(jumps) / draws - expected);
    VectorXd target(4);
    target << 0.1 / 0.8, 0.0, 0.3 / 0.8, 0.4 / 0.8;
    const double dest_tv = tv_distance(dest / std::max(1.0, dest.sum()), target);
    checks.push_back({"jump_probability", rate_error, 0.01, rate_error <= 0.01});
    checks.push_back({"jump_destination_tv", dest_tv, 0.02, dest_tv <= 0.02});
  }
  {
    const auto cmp = compare_with_kolmogorov(fixture.spec, trajectories, 1024, seed);
    checks.push_back({"kolmogorov_tv_" + fixture.name, cmp.tv, 0.02, cmp.tv <= 0.02});
    const double nfe_gap = std::abs(static_cast<double>(cmp.nfe_per_trajectory - 1024));
    checks.push_back({"sampler_nfe_equals_budget", nfe_gap, 0.0, nfe_gap == 0.0});
  }
  {
    double worst = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
      const int vocab = 2 + static_cast<int>(rng.below(6));
      const int length = 1 + static_cast<int>(rng.below(4));
      RowMatrix probs(length, vocab);
      Sequence x_t(static_cast<std::size_t>(length)), x1(static_cast<std::size_t>(length));
      for (int i = 0; i < length; ++i) {
        for (int a = 0; a < vocab; ++a) probs(i, a) = std::pow(rng.uniform(), 3.0);
        probs.row(i) /= probs.row(i).sum();
        x_t[static_cast<std::size_t>(i)] = static_cast<Token>(rng.below(static_cast<std::size_t>(vocab)));
        x1[static_cast<std::size_t>(i)] = static_cast<Token>(rng.below(static_cast<std::size_t>(vocab)));
      }
      worst = std::min(worst, dfm_loss(probs, x_t, x1, 10.0 * rng.uniform()));
    }
    checks.push_back({"dfm_loss_min", worst, 0.0, worst >= 0.0});
  }
  {
    NeuralDenoiserSpec spec;
    spec.vocab_size = 5;
    spec.length = 3;
    spec.embed_dim = 4;
    spec.hidden_dim = 8;
    spec.depth = 2;
    spec.cond_dim = 6;
    spec.freq_dim = 4;
    spec.masked_target = 4;
    const double err = neural_gradient_check(spec, seed, 0);
    checks.push_back({"neural_gradient_rel_error", err, 1e-3, err <= 1e-3});
  }
  return checks;
}

// ---------------------------------------------------------------------------
// Task setup

TaskSetup make_task(const RunConfig& cfg) {
  TaskSetup setup;
  const SourceSpec source = cfg.make_source();
  if (cfg.task == TaskKind::checkerboard) {
    const CheckerboardSpec board;
    setup.data = checkerboard_data(board, source);
    for (int v = 0; v < setup.data.vocab.size(); ++v) {
      setup.token_text.push_back(setup.data.vocab.is_mask(v) ? "_" : std::to_string(v));
    }
  } else {
    if (cfg.corpus.empty()) throw ConfigError("the text task needs a corpus path");
    const auto documents = read_documents(cfg.corpus);
    const bool with_mask = source.kind == SourceKind::mask;
    const CharVocab chars = cfg.alphabet.empty() ? CharVocab::from_documents(documents, with_mask)
                                                 : CharVocab::from_alphabet(cfg.alphabet, with_mask);
    std::vector<Sequence> encoded;
    encoded.reserve(documents.size());
    for (const auto& d : documents) encoded.push_back(chars.encode(d));
    setup.blocks = pack_corpus(encoded, chars.eos(), static_cast<std::size_t>(cfg.length));
    setup.data = corpus_data(setup.blocks, chars.vocab());
    for (int v = 0; v < setup.data.vocab.size(); ++v) {
      setup.token_text.push_back(chars.decode(Sequence{static_cast<Token>(v)}));
    }
  }
  setup.spec.vocab_size = setup.data.vocab.size();
  setup.spec.length = static_cast<int>(setup.data.length);
  setup.spec.embed_dim = cfg.embed_dim;
  setup.spec.hidden_dim = cfg.hidden_dim;
  setup.spec.depth = cfg.depth;
  setup.spec.cond_dim = cfg.cond_dim;
  setup.spec.freq_dim = cfg.freq_dim;
  setup.spec.masked_target = setup.data.vocab.mask_id();
  validate(setup.spec);
  return setup;
}

namespace {

void ensure_output_dir(const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec || !std::filesystem::is_directory(cfg.output_dir)) {
    throw IoError("cannot create output directory " + cfg.output_dir.string());
  }
}

NeuralDenoiser load_model(const std::filesystem::path& path, const TaskSetup& setup) {
  if (path.empty()) throw ConfigError("no checkpoint path configured");
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  auto ckpt = load_checkpoint(path);
  if (ckpt.spec.vocab_size != setup.spec.vocab_size || ckpt.spec.length != setup.spec.length ||
      ckpt.spec.masked_target != setup.spec.masked_target) {
    throw ConfigError("checkpoint " + path.string() + " does not match the configured task");
  }
  return NeuralDenoiser(ckpt.spec, std::move(ckpt.params));
}

std::unique_ptr<ReferenceModel> make_reference(const RunConfig& cfg, const TaskSetup& setup) {
  if (cfg.task == TaskKind::checkerboard) {
    return std::make_unique<CheckerboardReference>(CheckerboardSpec{});
  }
  return std::make_unique<TrigramReference>(setup.blocks, setup.data.vocab);
}

std::uint64_t teacher_seed(std::uint64_t seed) {
  return Rng::stream(seed, {0x7465616368ULL}).next_u64();
}

std::string format_number(double v) {
  std::ostringstream out;
  out << std::setprecision(12) << v;
  return out.str();
}

struct RecoveryScore {
  double accuracy = 0.0;
  std::size_t sequences = 0;
  std::size_t changed = 0;
};

// Corrupt held-out draws, run the recovery protocol, and pool accuracy over all
// changed positions. For mask sources the changed positions are re-masked
// before integration, since that model only moves masked tokens.
RecoveryScore recovery_accuracy(const PosteriorModel& model, const TaskSetup& setup,
                                const RunConfig& cfg, int budget) {
  Rng rng = Rng::stream(cfg.seed, {0x7265636fULL});
  const auto scheduler = cfg.make_scheduler();
  const StepGrid grid(budget);
  SamplerOptions options;
  options.mode = cfg.scale_mode;
  Sequence predicted, truth;
  std::vector<bool> changed;
  for (int n = 0; n < cfg.samples; ++n) {
    const Sequence x = setup.data.sample(rng);
    Corruption c = corrupt(x, cfg.corruption_fraction, setup.data.vocab, rng);
    if (const auto mask = setup.data.vocab.mask_id(); mask && cfg.source == SourceKind::mask) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (c.changed[i]) c.corrupted[i] = *mask;
      }
    }
    PositionStreams streams(cfg.seed, static_cast<std::uint64_t>(n), x.size());
    const Sequence out = recover(c.corrupted, c.changed, model, grid, scheduler, streams,
                                 cfg.freeze_context, options);
    predicted.insert(predicted.end(), out.begin(), out.end());
    truth.insert(truth.end(), x.begin(), x.end());
    changed.insert(changed.end(), c.changed.begin(), c.changed.end());
  }
  RecoveryScore score;
  score.accuracy = token_accuracy(predicted, truth, changed);
  score.sequences = static_cast<std::size_t>(cfg.samples);
  for (bool b : changed) score.changed += b ? 1 : 0;
  return score;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

int cmd_checkerboard(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const CheckerboardSpec board;
  const SourceSpec source = cfg.make_source();
  const auto scheduler = cfg.make_scheduler();
  const auto model = checkerboard_bayes_model(board, source, scheduler);
  const Vocab& vocab = model.vocab();
  const int budget = cfg.budget;
  const StepGrid grid(budget);

  // Frame f in 1..F sits at step round(f S / F); every step when S < F.
  std::vector<int> frame_steps;
  const int frames = std::min(cfg.frames, budget);
  for (int f = 1; f <= frames; ++f) {
    frame_steps.push_back(static_cast<int>(std::lround(static_cast<double>(f) * budget / frames)));
  }
  std::vector<int> frame_of_step(static_cast<std::size_t>(budget) + 1, -1);
  for (std::size_t f = 0; f < frame_steps.size(); ++f) {
    frame_of_step[static_cast<std::size_t>(frame_steps[f])] = static_cast<int>(f);
  }

  struct FrameStats {
    Eigen::MatrixXi grid;
    long unmasked = 0;
    long valid = 0;
    long jumps = 0;
  };
  std::vector<FrameStats> stats(frame_steps.size());
  for (auto& s : stats) s.grid = Eigen::MatrixXi::Zero(board.grid, board.grid);

  long chunk_jumps = 0;
  std::vector<Sequence> previous;
  EnsembleOptions options;
  options.mode = cfg.scale_mode;
  options.chunk = 1024;
  options.observer = [&](int step, const std::vector<Sequence>& states) {
    if (step == 0) {
      chunk_jumps = 0;
      previous = states;
      return;
    }
    for (std::size_t k = 0; k < states.size(); ++k) {
      for (std::size_t i = 0; i < states[k].size(); ++i) {
        if (states[k][i] != previous[k][i]) ++chunk_jumps;
      }
    }
    previous = states;
    const int f = frame_of_step[static_cast<std::size_t>(step)];
    if (f < 0) return;
    auto& fs = stats[static_cast<std::size_t>(f)];
    for (const auto& z : states) {
      bool complete = true;
      for (Token v : z) {
        if (vocab.is_mask(v)) {
          complete = false;
        } else {
          ++fs.unmasked;
        }
      }
      if (complete) {
        ++fs.grid(z[0], z[1]);
        if (board.valid(z[0], z[1])) ++fs.valid;
      }
    }
    fs.jumps += chunk_jumps;
  };
  const auto result = sample_ensemble(source, vocab, 2, model, grid, scheduler,
                                      static_cast<std::size_t>(cfg.samples), cfg.seed, options);

  std::ostringstream summary;
  summary << "frame,step,t,unmasked_fraction,valid_mass_fraction,mean_jumps\n";
  const double positions = 2.0 * cfg.samples;
  for (std::size_t f = 0; f < stats.size(); ++f) {
    const auto& fs = stats[f];
    std::ostringstream name;
    name << "frame_" << std::setw(3) << std::setfill('0') << f + 1 << '.' << cfg.frame_format;
    std::ostringstream body;
    if (cfg.frame_format == "pgm") {
      const int peak = std::max(1, fs.grid.maxCoeff());
      body << "P2\n" << board.grid << ' ' << board.grid << "\n255\n";
      for (int r = 0; r < board.grid; ++r) {
        for (int c = 0; c < board.grid; ++c) {
          body << (c ? " " : "") << (255L * fs.grid(r, c)) / peak;
        }
        body << '\n';
      }
    } else {
      for (int r = 0; r < board.grid; ++r) {
        for (int c = 0; c < board.grid; ++c) body << (c ? "," : "") << fs.grid(r, c);
        body << '\n';
      }
    }
    write_file_atomic(cfg.output_dir / name.str(), body.str());
    const int step = frame_steps[f];
    summary << f + 1 << ',' << step << ',' << format_number(grid.time(step)) << ','
            << format_number(static_cast<double>(fs.unmasked) / positions) << ','
            << format_number(static_cast<double>(fs.valid) / cfg.samples) << ','
            << format_number(static_cast<double>(fs.jumps) / positions) << '\n';
  }
  write_file_atomic(cfg.output_dir / "summary.csv", summary.str());
  std::cerr << "checkerboard: " << frame_steps.size() << " frames, final valid-mass fraction "
            << checkerboard_valid_fraction(board, result.finals) << ", mean jumps "
            << result.mean_jumps << '\n';
  return kExitSuccess;
}

int cmd_train(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const TaskSetup setup = make_task(cfg);
  NeuralDenoiser model(setup.spec, cfg.seed);
  TrainConfig tc;
  tc.phase = TrainPhase::pretrain;
  tc.batch_size = cfg.batch_size;
  tc.steps = cfg.pretrain_steps;
  tc.learning_rate = cfg.learning_rate;
  tc.grad_clip = cfg.grad_clip;
  tc.seed = cfg.seed;
  tc.policy = StepPolicy{PolicyKind::pu};
  tc.scale_mode = ScaleMode::instantaneous;
  tc.scheduler = cfg.make_scheduler();
  tc.source = cfg.make_source();
  const auto result = pretrain_loop(tc, setup.data, model);
  save_checkpoint(cfg.checkpoint, model.spec(), model.parameters());
  write_loss_csv(cfg.output_dir / "pretrain_loss.csv", result.curve);
  std::cerr << "pretrain: " << tc.steps << " steps, final loss "
            << (result.curve.empty() ? 0.0 : result.curve.back().loss) << ", checkpoint "
            << cfg.checkpoint.string() << '\n';
  return kExitSuccess;
}

int cmd_finetune(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const TaskSetup setup = make_task(cfg);
  if (cfg.init_checkpoint.empty()) throw ConfigError("finetune needs init_checkpoint");
  NeuralDenoiser model = load_model(cfg.init_checkpoint, setup);
  EmaRegistry ema(model.parameters(), cfg.ema_decay);
  TrainConfig tc;
  tc.phase = TrainPhase::finetune;
  tc.batch_size = cfg.batch_size;
  tc.steps = cfg.finetune_steps;
  tc.learning_rate = cfg.finetune_learning_rate;
  tc.grad_clip = cfg.grad_clip;
  tc.seed = cfg.seed;
  tc.policy = cfg.make_policy();
  tc.blend = cfg.make_blend();
  tc.teacher = TeacherConfig{cfg.teacher, cfg.use_ema, teacher_seed(cfg.seed)};
  tc.ema_decay = cfg.ema_decay;
  tc.scale_mode = ScaleMode::cumulative;
  tc.scheduler = cfg.make_scheduler();
  tc.source = cfg.make_source();
  const auto result = finetune_loop(tc, setup.data, model, ema);
  save_checkpoint(cfg.checkpoint, model.spec(), model.parameters());
  write_loss_csv(cfg.output_dir / "finetune_loss.csv", result.curve);
  std::cerr << "finetune: " << tc.steps << " steps, teacher evaluations "
            << result.teacher_evaluations << ", checkpoint " << cfg.checkpoint.string() << '\n';
  return kExitSuccess;
}

int cmd_sample(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const TaskSetup setup = make_task(cfg);
  const NeuralDenoiser model = load_model(cfg.checkpoint, setup);
  const StepGrid grid(cfg.budget);
  TrajectoryRng rng(cfg.seed, 0, setup.data.length);
  SamplerOptions options;
  options.mode = cfg.scale_mode;
  const auto result = run_sampler(cfg.make_source(), setup.data.vocab, setup.data.length, model,
                                  grid, cfg.make_scheduler(), rng, options);
  if (result.record.nfe != cfg.budget) {
    throw NumericalError("sampler used " + std::to_string(result.record.nfe) +
                         " evaluations for budget " + std::to_string(cfg.budget));
  }

  std::vector<std::string> text;
  std::string joined;
  for (Token v : result.final) {
    text.push_back(setup.token_text[static_cast<std::size_t>(v)]);
    if (cfg.task == TaskKind::checkerboard && !joined.empty()) joined += ' ';
    joined += text.back();
  }
  const auto timeline = make_timeline(text, result.record.last_change, cfg.budget);
  write_file_atomic(cfg.output_dir / "sample.txt", joined + "\n");
  write_file_atomic(cfg.output_dir / "timeline.html", render_timeline(timeline));
  const std::filesystem::path trajectory = cfg.output_dir / "trajectory.csv";
  write_trajectory_csv(trajectory.string() + ".tmp", result.record);
  std::filesystem::rename(trajectory.string() + ".tmp", trajectory);
  json log = {{"budget", cfg.budget},
              {"nfe", result.record.nfe},
              {"mode", to_string(cfg.scale_mode)},
              {"mean_jumps", mean_jumps(result.record)},
              {"length", setup.data.length}};
  write_file_atomic(cfg.output_dir / "sample_log.json", log.dump(2) + "\n");
  std::cerr << "sample: NFE=" << result.record.nfe << " (S=" << cfg.budget << ")\n";
  return kExitSuccess;
}

int cmd_recover(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const TaskSetup setup = make_task(cfg);
  const NeuralDenoiser model = load_model(cfg.checkpoint, setup);
  const auto score = recovery_accuracy(model, setup, cfg, cfg.budget);
  std::ostringstream out;
  out << "budget,mode,freeze_context,sequences,changed_tokens,token_accuracy\n"
      << cfg.budget << ',' << to_string(cfg.scale_mode) << ',' << (cfg.freeze_context ? 1 : 0)
      << ',' << score.sequences << ',' << score.changed << ',' << format_number(score.accuracy)
      << '\n';
  write_file_atomic(cfg.output_dir / "recover.csv", out.str());
  std::cerr << "recover: accuracy " << score.accuracy << " over " << score.changed
            << " changed tokens\n";
  return kExitSuccess;
}

int cmd_eval(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  const TaskSetup setup = make_task(cfg);
  const NeuralDenoiser model = load_model(cfg.checkpoint, setup);
  const auto reference = make_reference(cfg, setup);
  std::vector<MetricsRow> rows;
  for (int budget : cfg.budgets) {
    auto eval = evaluate_sampler(model, setup.data, cfg.make_source(), cfg.make_scheduler(),
                                 *reference, budget, cfg.scale_mode,
                                 static_cast<std::size_t>(cfg.samples), cfg.seed);
    if (cfg.task == TaskKind::checkerboard) {
      eval.row.valid_fraction = checkerboard_valid_fraction(CheckerboardSpec{}, eval.finals);
    }
    eval.row.token_accuracy = recovery_accuracy(model, setup, cfg, budget).accuracy;
    rows.push_back(eval.row);
    std::cerr << "eval: S=" << budget << " nll " << eval.row.nll << " entropy "
              << eval.row.entropy << '\n';
  }
  write_metrics_csv(cfg.output_dir / "metrics.csv", rows);
  return kExitSuccess;
}

int cmd_oracle_check(const RunConfig& cfg) {
  ensure_output_dir(cfg);
  if (cfg.fixture.empty()) throw ConfigError("oracle-check needs a fixture path");
  const auto fixture = load_fixture(cfg.fixture);
  const auto checks = run_oracle_battery(fixture, cfg.seed);
  std::ostringstream report;
  report << "check,value,threshold,pass\n";
  bool all = true;
  for (const auto& c : checks) {
    report << c.name << ',' << format_number(c.value) << ',' << format_number(c.threshold) << ','
           << (c.pass ? "pass" : "FAIL") << '\n';
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " value=" << c.value
              << " threshold=" << c.threshold << '\n';
    all = all && c.pass;
  }
  write_file_atomic(cfg.output_dir / "oracle_report.csv", report.str());
  return all ? kExitSuccess : kExitAcceptance;
}

}  // namespace stepflow
