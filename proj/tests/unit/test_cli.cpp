#include "cli.hpp"
#include "run_config.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

using namespace bq2;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path smoke_config() { return std::filesystem::path(BQ2_SOURCE_DIR) / "configs" / "smoke.json"; }

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help exits cleanly") {
    const auto r = run({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("pipeline") != std::string::npos);
    CHECK(r.out.find("dissociate") != std::string::npos);
  }

  TEST_CASE("usage errors exit with 2") {
    const auto unknown = run({"frobnicate"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("Usage") != std::string::npos);
    CHECK(run({}).code == 2);
    CHECK(run({"report", "--workers", "many"}).code == 2);
  }

  TEST_CASE("configuration errors exit with 2") {
    test::TempDir dir("cli-config");
    write_file(dir.path() / "bad.json", R"({"model": {"d_model": 30, "n_heads": 4}})");
    CHECK(run({"train-toy", "--config", (dir.path() / "bad.json").string()}).code == 2);
    write_file(dir.path() / "broken.json", "{");
    CHECK(run({"train-toy", "--config", (dir.path() / "broken.json").string()}).code == 2);
    write_file(dir.path() / "variant.json", R"({"methods": [{"id": "x", "variant": "Z-none"}]})");
    CHECK(run({"train-toy", "--config", (dir.path() / "variant.json").string()}).code == 2);
    CHECK(run({"train-toy", "--config", (dir.path() / "missing.json").string()}).code == 2);
  }

  TEST_CASE("a stage without its inputs names the missing artifact") {
    test::TempDir dir("cli-missing");
    const auto r = run({"quantize", "--config", smoke_config().string(), "--out", (dir.path() / "run").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("checkpoint") != std::string::npos);
  }

  TEST_CASE("run configuration round trip and seed derivation") {
    const auto cfg = cli::load_run_config(smoke_config());
    const auto back = cli::run_config_from_json(cli::run_config_to_json(cfg));
    CHECK(cli::run_config_to_json(back) == cli::run_config_to_json(cfg));
    CHECK(cli::config_hash(back) == cli::config_hash(cfg));
    auto other = cfg;
    other.out = "elsewhere";
    other.workers = 3;
    CHECK(cli::config_hash(other) == cli::config_hash(cfg));
    other.seed = 8;
    other.derive_seeds();
    CHECK(cli::config_hash(other) != cli::config_hash(cfg));
    CHECK(other.task_seed() != cfg.task_seed());
    CHECK(cfg.methods.size() == 3);
  }

  TEST_CASE("smoke pipeline is deterministic and matches the staged run") {
    test::TempDir dir("cli-smoke");
    const auto a = dir.path() / "a";
    const auto b = dir.path() / "b";
    const auto staged = dir.path() / "staged";
    REQUIRE(run({"pipeline", "--config", smoke_config().string(), "--out", a.string(), "--workers", "1"}).code == 0);
    REQUIRE(run({"pipeline", "--config", smoke_config().string(), "--out", b.string(), "--workers", "2"}).code == 0);
    for (const char* stage : {"train-toy", "calibrate", "quantize", "distill", "decompress", "eval-mc", "eval-gen", "eval-ppl", "dissociate", "report"}) {
      REQUIRE(run({stage, "--config", smoke_config().string(), "--out", staged.string()}).code == 0);
    }
    for (const std::string rel : {"quantized/rtn/manifest.json", "quantized/A-quip/manifest.json", "quantized/D-tcq/manifest.json",
                            "quantized/D-tcq/payload.bin", "report/report.csv", "report/summary.csv", "report/report.json"}) {
      CAPTURE(rel);
      REQUIRE(std::filesystem::exists(a / rel));
      CHECK(slurp(a / rel) == slurp(b / rel));
      CHECK(slurp(a / rel) == slurp(staged / rel));
    }
    const auto dis = run({"dissociate", "--config", smoke_config().string(), "--out", a.string(), "--method", "A-quip", "--flags", "r3=off,r4=off"});
    CHECK(dis.code == 0);
    CHECK(dis.out.find("r3=off r4=off") != std::string::npos);
    CHECK(run({"dissociate", "--config", smoke_config().string(), "--out", a.string(), "--method", "rtn"}).code == 2);
  }
}
