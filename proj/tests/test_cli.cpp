#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "stepflow/commands.hpp"
#include "stepflow/config.hpp"
#include "stepflow/timeline.hpp"

using namespace stepflow;
namespace fs = std::filesystem;

namespace {

const fs::path kData = STEPFLOW_DATA_DIR;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stepflow_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string("\"") + STEPFLOW_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Rows of a CSV file, header included.
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("config defaults, parsing and overrides") {
  const RunConfig defaults = parse_config(R"({"version": 1})");
  CHECK(defaults.budget == 8);
  CHECK(defaults.tau == 1.0 / 512.0);
  CHECK(defaults.policy == PolicyKind::ag);
  CHECK(defaults.teacher == TeacherKind::rk4);

  const RunConfig cfg = parse_config(
      R"({"version": 1, "seed": 7, "scheduler": "quadratic", "source": "uniform",
          "budgets": [1, 4], "policy": "TB20", "output_dir": "runs"})",
      "/tmp/base");
  CHECK(cfg.seed == 7);
  CHECK(cfg.scheduler == SchedulerKind::quadratic);
  CHECK(cfg.source == SourceKind::uniform);
  CHECK(cfg.budgets == std::vector<int>{1, 4});
  CHECK(cfg.output_dir == fs::path("/tmp/base/runs"));

  CHECK_THROWS_AS(parse_config(R"({"version": 1, "budjet": 4})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"budget": 4})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 2})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "budget": "eight"})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "clamp_epsilon": 0.5})"), ConfigError);

  RunConfig o = defaults;
  apply_override(o, "budget=32");
  apply_override(o, "scale_mode=instantaneous");
  apply_override(o, "budgets=[2,3]");
  CHECK(o.budget == 32);
  CHECK(o.scale_mode == ScaleMode::instantaneous);
  CHECK(o.budgets == std::vector<int>{2, 3});
  CHECK_THROWS_AS(apply_override(o, "budget"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "nope=1"), ConfigError);

  // The dump parses back to the same configuration.
  const RunConfig round = parse_config(dump_config(cfg));
  CHECK(dump_config(round) == dump_config(cfg));
}

TEST_CASE("timeline bins and rendering") {
  CHECK(timeline_bin(0, 8) == 1);
  CHECK(timeline_bin(1, 8) == 1);
  CHECK(timeline_bin(8, 8) == 8);
  CHECK(timeline_bin(1024, 1024) == 8);
  CHECK(timeline_bin(129, 1024) == 2);
  CHECK_THROWS_AS(timeline_bin(9, 8), ValidationError);

  const auto single = render_timeline(make_timeline({"a", "b", "<"}, {0, 0, 0}, 4));
  CHECK(single.find(".b1{") != std::string::npos);
  CHECK(single.find(".b2{") == std::string::npos);
  CHECK(single.find("&lt;") != std::string::npos);

  std::vector<std::string> tokens;
  std::vector<int> steps;
  for (int k = 0; k < 24; ++k) {
    tokens.push_back("t");
    steps.push_back(k % 8 + 1);
  }
  const auto artifact = make_timeline(tokens, steps, 8);
  const auto html = render_timeline(artifact);
  std::set<std::string> colors;
  for (std::size_t pos = html.find("background:"); pos != std::string::npos;
       pos = html.find("background:", pos + 1)) {
    colors.insert(html.substr(pos + 11, 7));
  }
  CHECK(colors.size() == 8);
  CHECK(render_timeline(artifact) == html);
}

TEST_CASE("exit codes") {
  const auto dir = scratch("exit");
  CHECK(run_cli("--help", dir / "log") == 0);
  CHECK(run_cli("", dir / "log") == 1);
  CHECK(run_cli("frobnicate", dir / "log") == 1);
  write(dir / "bad.json", R"({"version": 1, "colour": "red"})");
  CHECK(run_cli("print-config -c " + (dir / "bad.json").string(), dir / "log") == 1);
  CHECK(slurp(dir / "log").find("colour") != std::string::npos);
  write(dir / "ok.json", R"({"version": 1, "output_dir": "out"})");
  CHECK(run_cli("sample -c " + (dir / "ok.json").string(), dir / "log") == 1);
  CHECK(exit_code_for(ValidationError("x")) == kExitValidation);
  CHECK(exit_code_for(IoError("x")) == kExitUsage);
}

TEST_CASE("oracle-check on the two-state fixture passes") {
  const auto dir = scratch("oracle");
  write(dir / "cfg.json", R"({"version": 1, "seed": 3, "output_dir": ")" + (dir / "out").string() +
                              R"(", "fixture": ")" + (kData / "two_state.json").string() + "\"}");
  CHECK(run_cli("oracle-check -c " + (dir / "cfg.json").string(), dir / "log") == 0);
  const auto rows = read_csv(dir / "out" / "oracle_report.csv");
  REQUIRE(rows.size() > 5);
  bool saw_tv = false;
  for (const auto& r : rows) {
    if (r[0].rfind("kolmogorov_tv", 0) == 0) {
      saw_tv = true;
      CHECK(std::stod(r[1]) <= 0.02);
    }
  }
  CHECK(saw_tv);
}

TEST_CASE("checkerboard frames follow the survival law") {
  const auto dir = scratch("frames");
  auto unmasked_at = [&](const std::string& scheduler, double t) {
    const std::string args = "checkerboard --set seed=1 --set source=mask --set samples=5000"
                             " --set budget=100 --set frames=100 --set scale_mode=instantaneous"
                             " --set scheduler=" + scheduler + " --set output_dir=" +
                             (dir / scheduler).string();
    REQUIRE(run_cli(args, dir / "log") == 0);
    const auto rows = read_csv(dir / scheduler / "summary.csv");
    for (const auto& r : rows) {
      if (r[0] != "frame" && std::abs(std::stod(r[2]) - t) < 1e-9) return std::stod(r[3]);
    }
    FAIL("no frame at t");
    return -1.0;
  };
  CHECK(unmasked_at("quadratic", 0.1) <= 0.02);
  CHECK(std::abs(unmasked_at("linear", 0.5) - 0.5) <= 0.02);
  CHECK(fs::exists(dir / "linear" / "frame_100.csv"));

  const std::string args = "checkerboard --set seed=2 --set source=uniform --set samples=5000"
                           " --set budget=8 --set scale_mode=cumulative --set frame_format=pgm"
                           " --set output_dir=" + (dir / "uniform").string();
  REQUIRE(run_cli(args, dir / "log") == 0);
  const auto rows = read_csv(dir / "uniform" / "summary.csv");
  CHECK(std::stod(rows.back()[4]) >= 0.75);
  CHECK(slurp(dir / "uniform" / "frame_008.pgm").rfind("P2", 0) == 0);
}

TEST_CASE("train, sample, recover and eval on the checkerboard") {
  const auto dir = scratch("pipeline");
  write(dir / "cfg.json", R"({"version": 1, "seed": 5, "source": "uniform",
    "embed_dim": 4, "hidden_dim": 16, "depth": 1, "cond_dim": 8, "freq_dim": 4,
    "batch_size": 16, "pretrain_steps": 30, "finetune_steps": 3, "samples": 200,
    "budgets": [1, 4], "budget": 4, "checkpoint": "model.bin", "output_dir": "out"})");
  const std::string cfg = " -c " + (dir / "cfg.json").string();
  REQUIRE(run_cli("train" + cfg, dir / "log") == 0);
  CHECK(fs::exists(dir / "model.bin"));
  CHECK(read_csv(dir / "out" / "pretrain_loss.csv").size() == 31);

  REQUIRE(run_cli("finetune" + cfg + " --set init_checkpoint=model.bin --set checkpoint=ft.bin",
                  dir / "log") == 0);
  CHECK(fs::exists(dir / "ft.bin"));

  REQUIRE(run_cli("sample" + cfg, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("NFE=4") != std::string::npos);
  CHECK(slurp(dir / "out" / "sample_log.json").find("\"nfe\": 4") != std::string::npos);
  CHECK(fs::exists(dir / "out" / "timeline.html"));
  CHECK(read_csv(dir / "out" / "trajectory.csv").size() == 1 + 5 * 2);

  REQUIRE(run_cli("recover" + cfg, dir / "log") == 0);
  CHECK(read_csv(dir / "out" / "recover.csv").size() == 2);

  REQUIRE(run_cli("eval" + cfg, dir / "log") == 0);
  const auto first = slurp(dir / "out" / "metrics.csv");
  CHECK(read_csv(dir / "out" / "metrics.csv").size() == 3);
  REQUIRE(run_cli("eval" + cfg, dir / "log") == 0);
  CHECK(slurp(dir / "out" / "metrics.csv") == first);

  CHECK(run_cli("eval" + cfg + " --set corruption_fraction=0", dir / "log") == kExitValidation);
  CHECK(slurp(dir / "log").find("empty changed set") != std::string::npos);
}

TEST_CASE("text task end to end") {
  const auto dir = scratch("text");
  write(dir / "corpus.txt", "the cat sat on the mat\nthe dog sat on the log\na cat and a dog\n");
  write(dir / "cfg.json", R"({"version": 1, "task": "text", "corpus": "corpus.txt",
    "length": 8, "embed_dim": 4, "hidden_dim": 16, "depth": 1, "cond_dim": 8, "freq_dim": 4,
    "batch_size": 8, "pretrain_steps": 5, "samples": 20, "budgets": [2], "budget": 8,
    "output_dir": "out"})");
  const std::string cfg = " -c " + (dir / "cfg.json").string();
  REQUIRE(run_cli("train" + cfg, dir / "log") == 0);
  REQUIRE(run_cli("sample" + cfg, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("NFE=8") != std::string::npos);
  REQUIRE(run_cli("eval" + cfg, dir / "log") == 0);
  CHECK(read_csv(dir / "out" / "metrics.csv").size() == 2);
}
