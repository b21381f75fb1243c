#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "embsteal/cli.hpp"

using namespace embsteal;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("embsteal_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(dir / name) << text;
    return path(name);
  }

  std::string tiny_config(const std::string& extra = "") const {
    return write("tiny.json", R"({
  "world": {"topics": 4, "train_passages": 40, "train_queries": 10, "eval_passages": 16, "eval_queries": 4, "sigma": 0.0},
  "split": {"dev_passages": 5, "dev_queries": 2},
  "student": {"dim": 8, "layers": 1, "heads": 2, "vocab_size": 256, "max_len": 24},
  "training": {"epochs": 3, "batch_size": 8, "dev_eval_every": 4, "patience": 0}
  )" + extra + "}");
  }

  nlohmann::json read_json(const std::string& p) const { return nlohmann::json::parse(std::ifstream(p)); }

  fs::path dir;
};

std::string read_all(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_F(CliTest, CostLinesForOneMillionTokens) {
  auto r = run({"cost", "--tokens", "1000000"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("openai: 1000000 tokens at $0.13/1M -> $0.13"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("cohere: 1000000 tokens at $0.10/1M -> $0.10"), std::string::npos) << r.out;
  auto one = run({"cost", "--teacher", "openai", "--tokens", "1000000"});
  EXPECT_EQ(one.out, "openai: 1000000 tokens at $0.13/1M -> $0.13\n");
}

TEST_F(CliTest, CostCountsConfiguredCorpus) {
  auto r = run({"--config", tiny_config(), "cost"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("sim-cohere: ", 0), 0u) << r.out;
}

TEST_F(CliTest, DedupSmokeAndIdempotence) {
  const auto in = write("p.tsv", "1\tthe quick brown fox\n2\tthe quick\n3\tbrown fox\n");
  auto r = run({"dedup", "--in", in, "--out", path("d1.tsv")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_all(dir / "d1.tsv"), "1\tthe quick brown fox\n");
  EXPECT_NE(r.out.find("removed 2 (prefix 1, suffix 1, exact 0), kept 1"), std::string::npos) << r.out;
  auto again = run({"dedup", "--in", path("d1.tsv"), "--out", path("d2.tsv")});
  EXPECT_NE(again.out.find("removed 0"), std::string::npos);
  auto m = read_json(path("d1.tsv.manifest.json"));
  EXPECT_EQ(m["survivors"], 1);
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 64u);
}

TEST_F(CliTest, DedupManifestMatchesQuadraticOracle) {
  Rng rng(77);
  std::vector<std::string> texts;
  std::string tsv;
  for (int i = 0; i < 400; ++i) {
    std::string t;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t k = 0; k < n; ++k) t += (k ? " " : "") + std::string(1, static_cast<char>('a' + rng.below(3)));
    texts.push_back(t);
    tsv += std::to_string(i) + "\t" + t + "\n";
  }
  const auto in = write("big.tsv", tsv);
  ASSERT_EQ(run({"dedup", "--in", in, "--out", path("big_out.tsv")}).code, 0);
  // Survivors per the any-containment rule: drop text i if another text strictly
  // longer contains it as prefix/suffix, or an equal text has a smaller id.
  std::size_t kept = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    bool drop = false;
    for (std::size_t j = 0; j < texts.size() && !drop; ++j) {
      if (i == j) continue;
      const auto& a = texts[i];
      const auto& b = texts[j];
      if (a == b) drop = j < i;
      else if (b.size() > a.size() && (b.compare(0, a.size(), a) == 0 || b.compare(b.size() - a.size(), a.size(), a) == 0))
        drop = true;
    }
    kept += !drop;
  }
  EXPECT_EQ(read_json(path("big_out.tsv.manifest.json"))["survivors"], kept);
}

TEST_F(CliTest, DedupDuplicateIdIsDataError) {
  const auto in = write("dup.tsv", "1\ta\n1\tb\n");
  auto r = run({"dedup", "--in", in, "--out", path("x.tsv")});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("lines 1 and 2"), std::string::npos) << r.err;
}

TEST_F(CliTest, SimulatedHarvestAndRerun) {
  const auto cfg = write("h.json", R"({"world": {"train_passages": 6, "train_queries": 2, "eval_passages": 1, "eval_queries": 1}})");
  const auto out = path("o");
  auto r = run({"--config", cfg, "--out-dir", out, "harvest"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("10 new"), std::string::npos) << r.out;
  EXPECT_EQ(EmbeddingCache::load(dir / "o" / "caches" / "sim-cohere.embc").size(), 10u);
  auto again = run({"--config", cfg, "--out-dir", out, "harvest"});
  EXPECT_NE(again.out.find("0 new"), std::string::npos) << again.out;
  auto m = read_json((dir / "o" / "caches" / "sim-cohere.manifest.json").string());
  EXPECT_EQ(m["already_cached"], 10);
  EXPECT_FALSE(m["config_hash"].get<std::string>().empty());
  // A different world under the same out-dir is refused.
  auto other = run({"--config", cfg, "--out-dir", out, "--seed", "9", "harvest"});
  EXPECT_EQ(other.code, kExitConfig);
}

TEST_F(CliTest, LiveHarvestNeedsConfirmation) {
  const auto cfg = write("live.json", R"({"world": {"train_passages": 3, "train_queries": 1, "eval_passages": 1, "eval_queries": 1},
    "teachers": [{"name": "openai", "source": {"type": "live", "endpoint": "http://127.0.0.1:9", "api_key_env": "EMBSTEAL_TEST_NO_KEY"}}]})");
  auto r = run({"--config", cfg, "--out-dir", path("o"), "harvest"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("--confirm-spend"), std::string::npos) << r.err;
  EXPECT_NE(r.out.find("projected $"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "o" / "caches" / "openai.embc"));
}

TEST_F(CliTest, CredentialsInConfigAreRejected) {
  const auto cfg = write("key.json", R"({"teachers": [{"name": "openai", "source": {"type": "live", "api_key": "sk-123"}}]})");
  auto r = run({"--config", cfg, "cost"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("api_key_env"), std::string::npos);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  EXPECT_EQ(run({"--config", write("bad.json", R"({"trainig": {}})"), "cost"}).code, kExitConfig);
  EXPECT_EQ(run({"--config", write("bad2.json", "{not json"), "cost"}).code, kExitConfig);
  EXPECT_EQ(run({"--config", path("missing.json"), "cost"}).code, kExitConfig);
  EXPECT_EQ(run({"--config", write("bad3.json", R"({"corpus": {"passages": "/nonexistent.tsv"}})"), "train"}).code, kExitConfig);
  EXPECT_EQ(run({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(run({"ablate", "--study", "nonsense"}).code, kExitConfig);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, ZeroLearningRateGivesFlatCurve) {
  const auto out = path("o");
  auto r = run({"--config", tiny_config(), "--out-dir", out, "train", "--lr", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(read_all(dir / "o" / "student" / "curve.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "step,train_loss,dev_loss");
  std::set<std::string> dev;
  while (std::getline(csv, line)) {
    const auto last = line.substr(line.rfind(',') + 1);
    if (!last.empty()) dev.insert(last);
  }
  EXPECT_EQ(dev.size(), 1u);
}

TEST_F(CliTest, TrainRefusesMismatchedCheckpoint) {
  const auto cfg = tiny_config();
  const auto out = path("o");
  ASSERT_EQ(run({"--config", cfg, "--out-dir", out, "train"}).code, 0);
  auto same = run({"--config", cfg, "--out-dir", out, "train"});
  EXPECT_EQ(same.code, 0);
  EXPECT_NE(same.out.find("up to date"), std::string::npos);
  auto changed = run({"--config", cfg, "--out-dir", out, "train", "--lr", "0.002"});
  EXPECT_EQ(changed.code, kExitConfig);
  EXPECT_NE(changed.err.find("refusing"), std::string::npos);
  EXPECT_EQ(run({"--config", cfg, "--out-dir", out, "train", "--lr", "0.002", "--force"}).code, 0);
  auto m = load_manifest(dir / "o" / "student" / "model");
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 64u);
}

TEST_F(CliTest, NumericAbortExitsFour) {
  auto r = run({"--config", tiny_config(), "--out-dir", path("o"), "train", "--lr", "1e300", "--dropout", "0"});
  EXPECT_EQ(r.code, kExitNumeric) << r.err;
  EXPECT_TRUE(fs::exists(dir / "o" / "student" / "model.bin"));
}

TEST_F(CliTest, EvalNoiselessTeacherAndReports) {
  const auto cfg = tiny_config();
  const auto out = path("o");
  auto r = run({"--config", cfg, "--out-dir", out, "eval", "--pairing", "teacher", "--run-file"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rep = read_json((dir / "o" / "reports" / "teacher.json").string());
  EXPECT_EQ(rep["ndcg@10"]["mean"], 1.0);
  for (const char* key : {"dataset", "pairing", "dim", "num_queries", "num_passages", "seed", "config_hash", "ndcg@10",
                          "recall@100(rel>=1)", "recall@100(rel>=2)", "wall_time_ms"})
    EXPECT_TRUE(rep.contains(key)) << key;
  EXPECT_TRUE(fs::exists(dir / "o" / "reports" / "teacher.run"));
  EXPECT_TRUE(fs::exists(dir / "o" / "reports" / "summary.csv"));
  // Student pairings need a checkpoint first.
  EXPECT_EQ(run({"--config", cfg, "--out-dir", out, "eval", "--pairing", "q&p"}).code, kExitData);
}

TEST_F(CliTest, EvalRejectsInvalidPairing) {
  const auto cfg = tiny_config();
  const auto out = path("o");
  ASSERT_EQ(run({"--config", cfg, "--out-dir", out, "train"}).code, 0);
  auto r = run({"--config", cfg, "--out-dir", out, "eval", "--pairing", "student-bottleneck/teacher"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("bottleneck"), std::string::npos) << r.err;
}

TEST_F(CliTest, EvalIsReproducibleAcrossRuns) {
  const auto cfg = tiny_config();
  std::vector<std::string> reports, curves;
  for (const char* sub : {"a", "b"}) {
    const auto out = path(sub);
    ASSERT_EQ(run({"--config", cfg, "--out-dir", out, "train"}).code, 0);
    ASSERT_EQ(run({"--config", cfg, "--out-dir", out, "eval"}).code, 0);
    auto j = read_json((dir / sub / "reports" / "q-and-p.json").string());
    j.erase("wall_time_ms");
    reports.push_back(j.dump());
    curves.push_back(read_all(dir / sub / "student" / "curve.csv"));
    EXPECT_EQ(read_all(dir / sub / "student" / "model.bin").size(), fs::file_size(dir / sub / "student" / "model.bin"));
  }
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(curves[0], curves[1]);
  EXPECT_EQ(read_all(dir / "a" / "student" / "model.bin"), read_all(dir / "b" / "student" / "model.bin"));
}

TEST_F(CliTest, AblationTablesHaveTheExpectedShape) {
  const auto cfg = tiny_config(R"(, "ablate": {"data_sizes": [10, 20, 40], "seeds": [1], "train_sample": 20, "max_steps": 3,
      "world": {"topics": 4, "eval_passages": 16, "eval_queries": 4}})");
  auto r = run({"--config", cfg, "--out-dir", path("o"), "ablate", "--study", "data-size", "--study", "loss",
                "--study", "bottleneck"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = read_all(dir / "o" / "ablate" / "data-size_summary.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 4);
  EXPECT_NE(summary.find("\n10,"), std::string::npos);
  EXPECT_NE(summary.find("\n40,"), std::string::npos);
  const auto loss = read_all(dir / "o" / "ablate" / "loss_summary.csv");
  EXPECT_NE(loss.find("contrastive(tau=0.01)"), std::string::npos);
  EXPECT_NE(loss.find("contrastive(tau=0.05)"), std::string::npos);
  const auto cells = read_all(dir / "o" / "ablate" / "loss.csv");
  EXPECT_NE(cells.find("cell_hash"), std::string::npos);
  const auto bottleneck = read_all(dir / "o" / "ablate" / "bottleneck_summary.csv");
  EXPECT_NE(bottleneck.find("abs_diff"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "o" / "ablate" / "data-size.txt"));
  auto j = read_json((dir / "o" / "ablate" / "loss.json").string());
  EXPECT_EQ(j["series"].size(), 3u);
}

TEST_F(CliTest, FileCorpusRoundTrip) {
  const auto world = tiny_config();
  ASSERT_EQ(run({"--config", world, "synth", "--dir", path("corpus")}).code, 0);
  const auto c = (dir / "corpus").string();
  const auto cfg = write("files.json", R"({
    "corpus": {"passages": ")" + c + R"(/passages.tsv", "queries": ")" + c + R"(/queries.tsv",
               "eval_queries": ")" + c + R"(/eval_queries.tsv", "eval_passages": ")" + c + R"(/eval_passages.tsv",
               "qrels": ")" + c + R"(/eval_qrels.txt"}})");
  auto r = run({"--config", cfg, "--out-dir", path("o"), "harvest"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("synthetic world"), std::string::npos) << r.err;
  auto cost = run({"--config", cfg, "cost", "--teacher", "cohere"});
  EXPECT_EQ(cost.code, 0) << cost.err;
}
