#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "avw2/checkpoint.h"
#include "avw2/cli.h"
#include "avw2/data_synth.h"
#include "support/tmpdir.h"

using namespace avw2;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = runCli(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      files[fs::relative(e.path(), root).string()] = check::slurp(e.path());
    }
  }
  return files;
}

// Narrow model so the pipeline runs in seconds.
void writeTinyConfig(const fs::path& path, int steps) {
  std::string layers = "[";
  const int spec[8][2] = {{10, 5}, {3, 2}, {3, 2}, {3, 2}, {3, 2}, {2, 2}, {2, 2}, {2, 2}};
  for (int i = 0; i < 8; ++i) {
    layers += (i ? "," : "") + std::string("{\"kernel\":") + std::to_string(spec[i][0]) +
              ",\"stride\":" + std::to_string(spec[i][1]) + ",\"channels\":16}";
  }
  layers += "]";
  std::ofstream(path) << "{\"steps\": " << steps << ", \"batch_size\": 2, \"augment\": {\"dynamic_noise\": false},"
                      << " \"model\": {\"audio\": {\"layers\": " << layers << ", \"output_dim\": 16},"
                      << " \"visual\": {\"output_dim\": 16},"
                      << " \"transformer\": {\"layers\": 1, \"model_dim\": 16, \"heads\": 2, \"ffn_dim\": 32}}}";
}

std::vector<std::string> genArgs(const fs::path& out, int clips, int channels) {
  return {"gen-data", "--out", out.string(), "--seed", "7", "--clips", std::to_string(clips), "--channels",
          std::to_string(channels), "--duration", "1.0", "--set", "min_tokens=2", "--set", "max_tokens=3"};
}

} // namespace

TEST(Cli, GenDataIsReproducible) {
  check::TempDir dir;
  ASSERT_EQ(cli(genArgs(dir / "a", 3, 2)).code, kExitOk);
  ASSERT_EQ(cli(genArgs(dir / "b", 3, 2)).code, kExitOk);
  const auto a = tree(dir / "a");
  EXPECT_TRUE(a.count("manifest.jsonl"));
  EXPECT_TRUE(a.count("config.json"));
  EXPECT_TRUE(a == tree(dir / "b"));
}

TEST(Cli, PretrainThenInspect) {
  check::TempDir dir;
  ASSERT_EQ(cli(genArgs(dir / "data", 2, 2)).code, kExitOk);
  writeTinyConfig(dir / "tiny.json", 10);
  const auto r = cli({"pretrain", "--corpus", (dir / "data").string(), "--out", (dir / "pre").string(),
                      "--config", (dir / "tiny.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("step=10"), std::string::npos) << r.out;
  for (const char* f : {"checkpoint.avw2", "metrics.jsonl", "summary.csv", "config.json"}) {
    EXPECT_TRUE(fs::exists(dir / "pre" / f)) << f;
  }
  const auto ckpt = loadCheckpoint(dir / "pre/checkpoint.avw2");
  const auto info = cli({"inspect-checkpoint", (dir / "pre/checkpoint.avw2").string()});
  ASSERT_EQ(info.code, kExitOk) << info.err;
  EXPECT_NE(info.out.find("step=10\n"), std::string::npos) << info.out;
  EXPECT_NE(info.out.find("kind=pretrain\n"), std::string::npos) << info.out;
  EXPECT_NE(info.out.find("parameters=" + std::to_string(ckpt.parameterCount()) + "\n"), std::string::npos);
  std::ifstream metrics(dir / "pre/metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    ++lines;
  }
  EXPECT_EQ(lines, 10);
}

TEST(Cli, StopAndResumeMatchesUninterrupted) {
  check::TempDir dir;
  ASSERT_EQ(cli(genArgs(dir / "data", 2, 2)).code, kExitOk);
  writeTinyConfig(dir / "tiny.json", 8);
  const auto data = (dir / "data").string();
  const auto cfg = (dir / "tiny.json").string();
  ASSERT_EQ(cli({"pretrain", "--corpus", data, "--out", (dir / "full").string(), "--config", cfg}).code, kExitOk);
  ASSERT_EQ(cli({"pretrain", "--corpus", data, "--out", (dir / "part").string(), "--config", cfg,
                 "--stop-after", "3"})
                .code,
            kExitOk);
  ASSERT_EQ(cli({"pretrain", "--corpus", data, "--out", (dir / "part").string(), "--resume",
                 (dir / "part/checkpoint.avw2").string()})
                .code,
            kExitOk);
  EXPECT_TRUE(check::slurp(dir / "full/checkpoint.avw2") == check::slurp(dir / "part/checkpoint.avw2"));
}

TEST(Cli, ExitCodes) {
  check::TempDir dir;
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data"}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--out", (dir / "x").string(), "--bogus"}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--out", (dir / "x").string(), "--set", "nope=1"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);

  check::spit(dir / "junk.avw2", "not a checkpoint");
  const auto bad = cli({"inspect-checkpoint", (dir / "junk.avw2").string()});
  EXPECT_EQ(bad.code, kExitData);
  EXPECT_NE(bad.err.find("offset"), std::string::npos) << bad.err;
  EXPECT_EQ(cli({"pretrain", "--corpus", (dir / "missing").string(), "--out", (dir / "p").string()}).code,
            kExitData);

  ASSERT_EQ(cli(genArgs(dir / "data", 2, 2)).code, kExitOk);
  writeTinyConfig(dir / "tiny.json", 5);
  const auto blowup = cli({"pretrain", "--corpus", (dir / "data").string(), "--out", (dir / "nan").string(),
                           "--config", (dir / "tiny.json").string(), "--lr", "1e30", "--set",
                           "warmup_fraction=0.0"});
  EXPECT_EQ(blowup.code, kExitNumeric) << blowup.err;
  EXPECT_NE(blowup.err.find("pretrain step"), std::string::npos) << blowup.err;

  ASSERT_EQ(cli({"pretrain", "--corpus", (dir / "data").string(), "--out", (dir / "ok").string(), "--config",
                 (dir / "tiny.json").string()})
                .code,
            kExitOk);
  EXPECT_EQ(cli({"pretrain", "--corpus", (dir / "data").string(), "--out", (dir / "ok").string(), "--resume",
                 (dir / "ok/checkpoint.avw2").string(), "--steps", "9"})
                .code,
            kExitUsage);
}

TEST(Cli, ReducedPipelineReachesZeroTrainingCer) {
  check::TempDir dir;
  const auto data = (dir / "data").string();
  ASSERT_EQ(cli(genArgs(dir / "data", 4, 2)).code, kExitOk);
  ASSERT_EQ(cli({"beamform", "--corpus", data, "--out", (dir / "mono").string()}).code, kExitOk);
  EXPECT_EQ(readCorpus(dir / "mono").front().numChannels(), 1);
  writeTinyConfig(dir / "tiny.json", 20);
  ASSERT_EQ(cli({"pretrain", "--corpus", data, "--out", (dir / "pre").string(), "--config",
                 (dir / "tiny.json").string()})
                .code,
            kExitOk);
  const auto ft = cli({"finetune", "--corpus", data, "--init", (dir / "pre/checkpoint.avw2").string(), "--out",
                       (dir / "ft").string(), "--steps", "400", "--eval-every", "100", "--set", "batch_size=2"});
  ASSERT_EQ(ft.code, kExitOk) << ft.err;
  EXPECT_NE(ft.out.find("train_cer=0\n"), std::string::npos) << ft.out;
  const auto ev = cli({"eval-asr", "--checkpoint", (dir / "ft/checkpoint.avw2").string(), "--corpus", data,
                       "--beamformed", (dir / "mono").string(), "--out", (dir / "eval").string()});
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  EXPECT_NE(ev.out.find("multichannel,0\n"), std::string::npos) << ev.out;
  EXPECT_NE(ev.out.find("beamformed,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "eval/summary.csv"));
  const auto ex = cli({"extract-features", "--checkpoint", (dir / "pre/checkpoint.avw2").string(), "--corpus",
                       data, "--out", (dir / "feat").string()});
  ASSERT_EQ(ex.code, kExitOk) << ex.err;
  EXPECT_TRUE(fs::exists(dir / "feat/features.jsonl"));
}
