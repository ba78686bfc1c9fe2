#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "loretta/container.hpp"
#include "test_support.hpp"

namespace loretta {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run_lab(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string(LORETTA_LAB_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_file(e.path());
  return out;
}

// Small dataset and model so the pipeline runs in seconds.
const char* kSmallConfig = R"({
  "data": {"split": {"pair_ab": 60, "pair_bc": 60, "uni_a": 0, "uni_b": 20, "uni_c": 0, "test": 30, "probe": 40}},
  "model": {"d_model": 32},
  "train": {"batch_size": 2, "accumulation": 2, "log_every": 2},
  "eval": {"cycle_samples": 4, "bootstrap_resamples": 50, "probe": {"n_per_class": 3, "epochs": 5, "trials": 1}}
})";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testing_support::temp_dir("cli");
    write_file(dir_ / "small.json", kSmallConfig);
    const auto cfg = " --config " + (dir_ / "small.json").string();
    ASSERT_EQ(run_lab("gen-data --seed 7 --out " + (dir_ / "data").string() + cfg, dir_).code, 0);
    ASSERT_EQ(run_lab("pretrain --strategy c2m3 --seed 1 --steps 6 --data " + (dir_ / "data").string() + " --out " +
                          (dir_ / "c2m3").string() + cfg,
                      dir_)
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string cfg() { return " --config " + (dir_ / "small.json").string(); }
  static std::string data() { return " --data " + (dir_ / "data").string(); }
  static std::string ckpt() { return " --ckpt " + (dir_ / "c2m3" / "final.bin").string(); }

  static inline fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_lab("", dir_).code, 1);
  EXPECT_EQ(run_lab("no-such-command", dir_).code, 1);
  EXPECT_EQ(run_lab("gen-data --out " + (dir_ / "x").string(), dir_).code, 1);
  EXPECT_EQ(run_lab("eval-ppl --combo A,Q" + data() + ckpt(), dir_).code, 1);
  EXPECT_EQ(run_lab("eval-ppl --combo A,A" + data() + ckpt(), dir_).code, 1);
  EXPECT_EQ(run_lab("config", dir_).code, 1);
}

TEST_F(Cli, LorettaWithoutWarmStartNamesRequirement) {
  const auto r = run_lab("pretrain --strategy loretta --seed 1" + data() + " --out " + (dir_ / "l").string(), dir_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("warm start"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("--init-from"), std::string::npos) << r.err;
}

TEST_F(Cli, ConfigRejectsUnknownKeysAndDumpsDefaults) {
  const auto d = run_lab("config --dump-defaults", dir_);
  ASSERT_EQ(d.code, 0);
  const auto j = nlohmann::json::parse(d.out);
  for (const char* k : {"model", "train", "data", "eval"}) EXPECT_TRUE(j.contains(k)) << k;
  write_file(dir_ / "bad.json", R"({"train": {"batch_sise": 4}})");
  const auto r = run_lab("config --check " + (dir_ / "bad.json").string(), dir_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("batch_sise"), std::string::npos) << r.err;
  write_file(dir_ / "typed.json", R"({"train": {"batch_size": "four"}})");
  EXPECT_EQ(run_lab("config --check " + (dir_ / "typed.json").string(), dir_).code, 1);
}

TEST_F(Cli, DataAndFormatErrorsExitTwo) {
  EXPECT_EQ(run_lab("eval-ppl --combo A" + data() + " --ckpt /nonexistent.bin", dir_).code, 2);
  auto bytes = read_file(dir_ / "c2m3" / "final.bin");
  bytes.resize(bytes.size() / 2);
  write_file(dir_ / "truncated.bin", bytes);
  EXPECT_EQ(run_lab("eval-ppl --combo A" + data() + " --ckpt " + (dir_ / "truncated.bin").string(), dir_).code, 2);
}

TEST_F(Cli, GenDataIsByteReproducible) {
  ASSERT_EQ(run_lab("gen-data --seed 7 --out " + (dir_ / "data2").string() + cfg(), dir_).code, 0);
  EXPECT_TRUE(directory_bytes(dir_ / "data") == directory_bytes(dir_ / "data2"));
  ASSERT_EQ(run_lab("gen-data --seed 8 --out " + (dir_ / "data3").string() + cfg(), dir_).code, 0);
  EXPECT_FALSE(directory_bytes(dir_ / "data") == directory_bytes(dir_ / "data3"));
}

TEST_F(Cli, PretrainIsByteReproducible) {
  ASSERT_EQ(run_lab("pretrain --strategy c2m3 --seed 1 --steps 6" + data() + " --out " + (dir_ / "again").string() +
                        cfg(),
                    dir_)
                .code,
            0);
  EXPECT_TRUE(read_file(dir_ / "c2m3" / "final.bin") == read_file(dir_ / "again" / "final.bin"));
  // Metrics agree once the wall-clock field is removed.
  auto strip = [](const fs::path& p) {
    std::vector<nlohmann::json> lines;
    std::istringstream in(read_file(p));
    for (std::string l; std::getline(in, l);) {
      auto j = nlohmann::json::parse(l);
      j.erase("wall_ms");
      lines.push_back(j);
    }
    return lines;
  };
  const auto a = strip(dir_ / "c2m3" / "metrics.jsonl");
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a, strip(dir_ / "again" / "metrics.jsonl"));
}

TEST_F(Cli, LorettaWarmStartRuns) {
  const auto r = run_lab("pretrain --strategy loretta --seed 2 --steps 2 --init-from " +
                             (dir_ / "c2m3" / "final.bin").string() + data() + " --out " + (dir_ / "lo").string() +
                             cfg(),
                         dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "lo" / "final.bin"));
}

TEST_F(Cli, EvalSubcommandsAreByteReproducible) {
  const std::vector<std::string> cmds = {
      "eval-ppl --combo A,C --combo B" + data() + ckpt() + cfg(),
      "probe --seed 3 --combo A,C" + data() + ckpt() + cfg(),
      "membership --combo A" + data() + ckpt() + cfg(),
      "sample --seed 4 --combo B --target A -n 2" + data() + ckpt() + cfg(),
      "cycle-error --seed 5 --link B --obs A" + data() + ckpt() + cfg(),
  };
  for (const auto& c : cmds) {
    const auto a = run_lab(c, dir_);
    const auto b = run_lab(c, dir_);
    ASSERT_EQ(a.code, 0) << c << "\n" << a.err;
    EXPECT_FALSE(a.out.empty()) << c;
    EXPECT_EQ(a.out, b.out) << c;
    for (std::istringstream in(a.out); !in.eof();) {
      std::string line;
      std::getline(in, line);
      if (!line.empty()) EXPECT_NO_THROW((void)nlohmann::json::parse(line)) << line;
    }
  }
  EXPECT_EQ(run_lab("probe --combo A,C" + data() + ckpt() + cfg(), dir_).code, 1);  // no --seed
}

TEST_F(Cli, EvalPplWritesReportAndTable) {
  const auto rep = dir_ / "ppl.jsonl", tab = dir_ / "ppl.csv";
  ASSERT_EQ(run_lab("eval-ppl --combo A,C" + data() + ckpt() + cfg() + " --out " + rep.string() + " --table " +
                        tab.string(),
                    dir_)
                .code,
            0);
  const auto j = nlohmann::json::parse(read_file(rep));
  EXPECT_EQ(j.at("kind"), "ppl");
  EXPECT_NEAR(j.at("value").get<double>(), std::exp(j.at("mean_nll").get<double>()), 1e-9);
  EXPECT_EQ(read_file(tab).rfind("combo,ppl,mean_nll,n_tokens\nA+C,", 0), 0u);
}

}  // namespace
}  // namespace loretta
