#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cgp/cli.hpp"
#include "cgp/concept_bank.hpp"
#include "cgp/errors.hpp"
#include "support/oracles.hpp"

using namespace cgp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "cgp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

nlohmann::ordered_json small_config() {
  auto c = cli::quickstart_config();
  cli::apply_override(c, "protocol.shots=[2]");
  cli::apply_override(c, "protocol.seeds=[1]");
  cli::apply_override(c, "train.epochs=6");
  cli::apply_override(c, "train.M=4");
  return c;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help exits zero on every command") {
    const std::vector<std::vector<std::string>> commands{
        {"--help"},
        {"bank", "build", "--help"},
        {"bank", "review", "--help"},
        {"bank", "freeze", "--help"},
        {"bank", "show", "--help"},
        {"data", "validate", "--help"},
        {"data", "episode", "--help"},
        {"data", "split-base-novel", "--help"},
        {"data", "synth", "--help"},
        {"stage1", "train", "--help"},
        {"stage1", "infer", "--help"},
        {"stage2", "fit", "--help"},
        {"stage2", "predict", "--help"},
        {"eval", "few-shot", "--help"},
        {"eval", "base-novel", "--help"},
        {"eval", "ablate", "--help"},
        {"interpret", "report", "--help"},
        {"interpret", "sankey", "--help"},
        {"pipeline", "run", "--help"}};
    for (const auto& cmd : commands) {
      const auto r = run(cmd);
      INFO(cmd[0]);
      CHECK(r.code == 0);
      CHECK_FALSE(r.out.empty());
    }
    CHECK(run({"bank", "build", "--help"}).out.find("--disease") != std::string::npos);
  }

  TEST_CASE("usage errors exit two") {
    auto r = run({"bank", "show", "--no-such-flag"});
    CHECK(r.code == 2);
    CHECK(r.err.find("error:") != std::string::npos);
    CHECK(run({}).code == 2);
    CHECK(run({"bank"}).code == 2);
    CHECK(run({"eval", "few-shot", "--seeds"}).code == 2);
  }

  TEST_CASE("module failures exit one and name the cause") {
    const auto r = run({"bank", "show", "--bank", "/nonexistent/bank.json"});
    CHECK(r.code == 1);
    CHECK(r.err.find("/nonexistent/bank.json") != std::string::npos);
    CHECK(r.err.find("\"kind\":\"io_error\"") != std::string::npos);
  }

  TEST_CASE("bank build, review and freeze through the command line") {
    oracle::TempDir dir("cli-bank");
    const auto bank = (dir / "bank.json").string();
    REQUIRE(run({"bank", "build", "--disease", "Asteroid Hyalosis", "--fixture", "builtin", "--out", bank}).code == 0);
    auto b = load_bank(bank);
    CHECK(b.concepts().size() == 3);
    CHECK(run({"bank", "review", "--bank", bank, "--all-pending", "--decision", "validated", "--reviewer", "dr a",
               "--timestamp", "2024-01-01T00:00:00Z"})
              .code == 0);
    CHECK(run({"bank", "review", "--bank", bank, "--concept", "shadowing", "--decision", "rejected", "--reviewer",
               "dr a"})
              .code == 1);
    CHECK(run({"bank", "freeze", "--bank", bank}).code == 0);
    b = load_bank(bank);
    CHECK(b.frozen());
    CHECK(b.validated_count() == 3);
    const auto shown = run({"bank", "show", "--bank", bank});
    CHECK(shown.code == 0);
    CHECK(shown.out.find("asteroid bodies") != std::string::npos);
  }

  TEST_CASE("config merging is strict") {
    auto c = cli::default_config();
    CHECK_THROWS_AS(cli::merge_config(c, nlohmann::json{{"train", {{"epoch", 3}}}}), ConfigError);
    try {
      cli::merge_config(c, nlohmann::json{{"protocol", {{"shotz", 3}}}});
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("protocol.shotz") != std::string::npos);
    }
    CHECK_THROWS_AS(cli::merge_config(c, nlohmann::json{{"train", {{"epochs", "many"}}}}), ConfigError);
    cli::merge_config(c, nlohmann::json{{"train", {{"epochs", 7}}}});
    CHECK(c["train"]["epochs"] == 7);
  }

  TEST_CASE("overrides parse JSON values and fall back to strings") {
    auto c = cli::default_config();
    cli::apply_override(c, "train.lr=0.01");
    cli::apply_override(c, "stage2.kind=svm");
    cli::apply_override(c, "protocol.shots=[1,2]");
    CHECK(c["train"]["lr"] == 0.01);
    CHECK(c["stage2"]["kind"] == "svm");
    CHECK(c["protocol"]["shots"] == nlohmann::json::array({1, 2}));
    CHECK_THROWS_AS(cli::apply_override(c, "no-equals-sign"), ConfigError);
  }

  TEST_CASE("config digest ignores key order and tracks values") {
    auto a = cli::default_config();
    nlohmann::ordered_json b;
    for (auto it = a.rbegin(); it != a.rend(); ++it) b[it.key()] = it.value();
    CHECK(cli::config_digest(a) == cli::config_digest(b));
    CHECK(cli::config_digest(a).size() == 64);
    cli::apply_override(b, "train.epochs=3");
    CHECK(cli::config_digest(a) != cli::config_digest(b));
  }

  TEST_CASE("config files resolve data paths against their directory") {
    oracle::TempDir dir("cli-config");
    {
      std::ofstream out(dir / "run.json");
      out << R"({"data": {"bank": "bank.json", "manifest": "sub/manifest.csv"}})";
    }
    const auto c = cli::load_config((dir / "run.json").string());
    CHECK(c["data"]["bank"] == (dir / "bank.json").string());
    CHECK(c["data"]["manifest"] == (dir / "sub" / "manifest.csv").string());
    CHECK_THROWS(cli::load_config((dir / "missing.json").string()));
  }

  TEST_CASE("pipeline runs are reproducible byte for byte") {
    oracle::TempDir dir("cli-pipeline");
    std::ostringstream log;
    const auto a = cli::run_pipeline(small_config(), dir / "a", log);
    const auto b = cli::run_pipeline(small_config(), dir / "b", log);
    REQUIRE(a.complete);
    REQUIRE(b.complete);
    CHECK(a.digest == b.digest);
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(a.run_dir)) {
      const auto name = entry.path().filename();
      REQUIRE(fs::exists(b.run_dir / name));
      CHECK(slurp(entry.path()) == slurp(b.run_dir / name));
      ++files;
    }
    CHECK(files >= 10);
    for (const char* name : {"report.json", "summary.json", "sankey.json", "contributions.json", "context.ckpt"})
      CHECK(fs::exists(a.run_dir / name));
    CHECK(a.run_dir.filename().string().find(a.digest.substr(0, 12)) != std::string::npos);

    // A second run into the same root gets its own directory.
    const auto c = cli::run_pipeline(small_config(), dir / "a", log);
    CHECK(c.run_dir != a.run_dir);
  }
}
