#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  const fs::path p = fs::temp_directory_path() / ("fontctl_cli_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " '" FONTCTL_CLI "' " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

nlohmann::json effective(const fs::path& dir) {
  return nlohmann::json::parse(std::ifstream(dir / "effective_config.json"))["options"];
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_EQ(run("train --out " + (scratch() / "x").string()), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, MakeBenchmarkIsIdempotent) {
  const fs::path out = scratch() / "bench";
  ASSERT_EQ(run("make-benchmark --out " + out.string() + " --count 3 --canvas 64 --max-lines 3 --max-char-px 17 --seed 4"), 0);
  std::ifstream a(out / "manifest.jsonl");
  const std::string first((std::istreambuf_iterator<char>(a)), {});
  ASSERT_EQ(run("make-benchmark --out " + out.string() + " --count 3 --canvas 64 --max-lines 3 --max-char-px 17 --seed 4"), 0);
  std::ifstream b(out / "manifest.jsonl");
  EXPECT_EQ(first, std::string((std::istreambuf_iterator<char>(b)), {}));
  EXPECT_TRUE(fs::exists(out / "img_00002.png"));
}

TEST(Cli, PrecedenceFlagOverEnvOverFile) {
  const fs::path dir = scratch();
  std::ofstream(dir / "cfg") << "count = 2\ncanvas = 64\nmax_lines = 3\nmax_char_px = 17\nseed = 11\n";
  const std::string base = "make-benchmark --config " + (dir / "cfg").string() + " --out ";
  ASSERT_EQ(run(base + (dir / "a").string()), 0);
  EXPECT_EQ(effective(dir / "a")["seed"], "11");
  ASSERT_EQ(run(base + (dir / "b").string(), "FONTCTL_SEED=12"), 0);
  EXPECT_EQ(effective(dir / "b")["seed"], "12");
  ASSERT_EQ(run(base + (dir / "c").string() + " --seed 13", "FONTCTL_SEED=12"), 0);
  EXPECT_EQ(effective(dir / "c")["seed"], "13");
  std::ofstream(dir / "bad") << "no_such_key = 1\n";
  EXPECT_EQ(run("make-benchmark --config " + (dir / "bad").string() + " --out " + (dir / "d").string()), 1);
}
