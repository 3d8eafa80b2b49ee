#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "doctest.h"

#include "cemb/data.hpp"
#include "cemb/io.hpp"

using namespace cemb;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("CEMB_CLI");
  return p ? p : "";
}

// Runs the CLI inside `dir`, returning its exit status.
int run(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + cli() + "' " + args + " > cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_log(const fs::path& dir) {
  const auto b = io::read_file(dir / "cli.log");
  return {b.begin(), b.end()};
}

fs::path fresh_dir(const char* name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// A corpus and model small enough to train in a second or two.
void write_small_config(const fs::path& dir) {
  const nlohmann::json cfg = {
      {"data", {{"n_docs", 12}, {"doc_len", 16}, {"query_len", 4}, {"vocab_size", 32}, {"n_topics", 4}}},
      {"model",
       {{"vocab_size", 32}, {"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"d_emb", 8}, {"max_context", 48},
        {"n_q", 3}, {"n_d", 8}}},
      {"train", {{"batch_size", 4}}}};
  io::write_json(dir / "c.json", cfg);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("pipeline: gen-data, train, embed, prune, search, eval, sweep, heatmap") {
  if (cli().empty()) {
    MESSAGE("CEMB_CLI not set; skipping");
    return;
  }
  const auto dir = fresh_dir("cemb_test_cli_pipeline");
  write_small_config(dir);
  REQUIRE(run(dir, "-c c.json gen-data") == 0);
  CHECK(fs::exists(dir / "out/gen-data/corpus.json"));
  const auto manifest = io::read_json(dir / "out/gen-data/manifest.json");
  for (const char* k : {"subcommand", "inputs", "config_hash", "git_describe", "wall_time_s"})
    CHECK(manifest.contains(k));

  REQUIRE(run(dir, "-c c.json train") == 0);
  CHECK(fs::exists(dir / "out/train/checkpoint.ckpt"));
  CHECK(fs::exists(dir / "out/train/loss_log.jsonl"));

  REQUIRE(run(dir, "-c c.json eval --method causal --budget 8") == 0);
  const auto reports = read_reports(dir / "out/eval/report.json");
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].method == "causal");
  CHECK(reports[0].budget == 8);

  REQUIRE(run(dir, "-c c.json embed --method forward_full") == 0);
  CHECK(read_store(dir / "out/embed/store.cemb").records.size() == 12);
  REQUIRE(run(dir, "-c c.json prune --method pool1d --budget 4") == 0);
  REQUIRE(run(dir, "-c c.json search --query-id 0 --method forward_full") == 0);
  CHECK(fs::exists(dir / "out/search/results.json"));

  REQUIRE(run(dir, "-c c.json sweep --budgets 1,2,4,8") == 0);
  CHECK(read_reports(dir / "out/sweep/sweep.json").size() == 4);
  REQUIRE(run(dir, "-c c.json heatmap --query-id 0") == 0);
  for (const char* f : {"qq.csv", "dd.csv", "qd.csv"}) CHECK(fs::exists(dir / "out/heatmap" / f));

  // Rerunning train reproduces the checkpoint byte for byte.
  const auto first = io::read_file(dir / "out/train/checkpoint.ckpt");
  REQUIRE(run(dir, "-c c.json train") == 0);
  CHECK(io::read_file(dir / "out/train/checkpoint.ckpt") == first);
  fs::remove_all(dir);
}

TEST_CASE("theorem1 and gradcheck") {
  if (cli().empty()) return;
  const auto dir = fresh_dir("cemb_test_cli_math");
  REQUIRE(run(dir, "theorem1 --nt 16 --nv 1024 --nq 16 --nd 32 --trials 100000") == 0);
  const auto log = read_log(dir);
  CHECK(log.find("PASS") != std::string::npos);
  CHECK(log.find("8192") != std::string::npos);
  CHECK(log.find("16632") != std::string::npos);
  CHECK(run(dir, "gradcheck --target loss_total --tol 1e-3 --seeds 1") == 0);
  CHECK(read_log(dir).find("PASS") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  if (cli().empty()) return;
  const auto dir = fresh_dir("cemb_test_cli_errors");
  // Missing input file: I/O error.
  CHECK(run(dir, "eval --checkpoint missing.ckpt") == 2);
  CHECK(read_log(dir).find("missing.ckpt") != std::string::npos);
  // Unknown config key: contract error.
  io::write_json(dir / "bad.json", {{"train", {{"lr", 1.0}}}});
  CHECK(run(dir, "-c bad.json gen-data") == 1);
  CHECK(read_log(dir).find("lr") != std::string::npos);
  // Bad flag value.
  CHECK(run(dir, "gradcheck --target loss_x") == 1);
  // Unknown subcommand or flag.
  CHECK(run(dir, "frobnicate") != 0);
  CHECK(run(dir, "--help") == 0);
  fs::remove_all(dir);
}

}  // TEST_SUITE
