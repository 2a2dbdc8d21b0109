// End-to-end tests of the f2 command-line tool: each test spawns the real
// binary and inspects exit codes and artifact bytes. A tiny world and a tiny
// pretrained base checkpoint are built once per suite.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "f2/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + F2_CLI_PATH + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed for: " + cmd);
  CmdResult result;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) result.output.append(buf, n);
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

std::string slurp(const fs::path& p) { return f2::read_text_file(p); }

class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root;
  static std::string world;  // world directory
  static std::string base;   // pretrained base checkpoint directory

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("f2_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    world = (root / "world").string();
    const auto gen = run_cli("gen-world --seed 44 --n-entities 24 --n-facts 24 --out " + world);
    ASSERT_EQ(gen.exit_code, 0) << gen.output;
    const auto pre = run_cli("pretrain --world " + world + " --out " + (root / "runs").string() +
                             " --epochs 8 --d-model 16 --n-layers 2 --n-heads 2"
                             " --context-len 96 --batch-size 16");
    ASSERT_EQ(pre.exit_code, 0) << pre.output;
    for (const auto& entry : fs::recursive_directory_iterator(root / "runs"))
      if (entry.path().filename() == "base") base = entry.path().string();
    ASSERT_FALSE(base.empty());
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  // Flags shared by the fast fine-tuning invocations.
  static std::string train_flags() {
    return " --world " + world + " --base " + base +
           " --epochs 1 --batch-size 4 --micro-batch 4 --eval-step 2 --k 4";
  }
};

fs::path CliPipeline::root;
std::string CliPipeline::world;
std::string CliPipeline::base;

}  // namespace

TEST(CliBasics, UnknownSubcommandPrintsUsageAndFailsValidation) {
  const auto r = run_cli("frobnicate");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
  EXPECT_NE(r.output.find("gen-world"), std::string::npos);
}

TEST(CliBasics, UnknownFlagFailsValidation) {
  const auto r = run_cli("gen-world --does-not-exist 3");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
}

TEST(CliBasics, HelpExitsCleanly) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("observe"), std::string::npos);
}

TEST_F(CliPipeline, GenWorldSameSeedSameDigests) {
  const auto a = run_cli("gen-world --seed 44 --n-entities 24 --n-facts 24 --out " +
                         (root / "wa").string());
  const auto b = run_cli("gen-world --seed 44 --n-entities 24 --n-facts 24 --out " +
                         (root / "wb").string());
  ASSERT_EQ(a.exit_code, 0) << a.output;
  ASSERT_EQ(b.exit_code, 0) << b.output;
  const auto ja = nlohmann::json::parse(slurp(root / "wa" / "world.json"));
  const auto jb = nlohmann::json::parse(slurp(root / "wb" / "world.json"));
  EXPECT_EQ(ja.at("file_digests"), jb.at("file_digests"));
  EXPECT_EQ(ja.at("config_hash"), jb.at("config_hash"));
  EXPECT_EQ(slurp(root / "wa" / "corpus.txt"), slurp(root / "wb" / "corpus.txt"));

  const auto c = run_cli("gen-world --seed 45 --n-entities 24 --n-facts 24 --out " +
                         (root / "wc").string());
  ASSERT_EQ(c.exit_code, 0) << c.output;
  const auto jc = nlohmann::json::parse(slurp(root / "wc" / "world.json"));
  EXPECT_NE(ja.at("file_digests"), jc.at("file_digests"));
}

TEST_F(CliPipeline, EnvSeedOverridesConfigFileButNotFlags) {
  f2::write_json_file(root / "seed9.json", nlohmann::json{{"world", {{"seed", 9}}}});
  const std::string sizes = " --n-entities 24 --n-facts 24 ";
  auto digests = [&](const std::string& dir) {
    return nlohmann::json::parse(slurp(root / dir / "world.json")).at("file_digests");
  };
  ASSERT_EQ(run_cli("gen-world --seed 7" + sizes + "--out " + (root / "w7").string()).exit_code, 0);
  ASSERT_EQ(run_cli("gen-world --config " + (root / "seed9.json").string() + sizes + "--out " +
                        (root / "wenv").string(),
                    "F2_SEED=7")
                .exit_code,
            0);
  EXPECT_EQ(digests("wenv"), digests("w7"));  // env beat the config file

  ASSERT_EQ(run_cli("gen-world --seed 7" + sizes + "--out " + (root / "wflag").string(),
                    "F2_SEED=9")
                .exit_code,
            0);
  EXPECT_EQ(digests("wflag"), digests("w7"));  // explicit flag beat the env
}

TEST_F(CliPipeline, ZeroStepFinetuneReportsBaseMetrics) {
  const std::string runs = (root / "runs_zero").string();
  const auto ft = run_cli("finetune" + train_flags() + " --variant qa --steps 0 --out " + runs);
  ASSERT_EQ(ft.exit_code, 0) << ft.output;
  const auto ev = run_cli("eval-mc --world " + world + " --base " + base + " --out " + runs);
  ASSERT_EQ(ev.exit_code, 0) << ev.output;

  nlohmann::json run_doc, eval_doc;
  for (const auto& entry : fs::directory_iterator(runs)) {
    if (fs::exists(entry.path() / "run.json"))
      run_doc = nlohmann::json::parse(slurp(entry.path() / "run.json"));
    if (fs::exists(entry.path() / "eval.json"))
      eval_doc = nlohmann::json::parse(slurp(entry.path() / "eval.json"));
  }
  ASSERT_FALSE(run_doc.is_null());
  ASSERT_FALSE(eval_doc.is_null());
  ASSERT_EQ(run_doc.at("points").size(), 1u);
  const auto& point = run_doc.at("points")[0];
  EXPECT_EQ(point.at("step").get<int>(), 0);
  EXPECT_EQ(point.at("mc1"), eval_doc.at("scores").at("mc1"));
  EXPECT_EQ(point.at("mc2"), eval_doc.at("scores").at("mc2"));
  EXPECT_EQ(point.at("mc3"), eval_doc.at("scores").at("mc3"));
}

TEST_F(CliPipeline, RerunsReproduceByteIdenticalReports) {
  const std::string runs = (root / "runs_repro").string();
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"finetune" + train_flags() + " --variant f2 --out " + runs, "run.json"},
      {"eval-mc --world " + world + " --base " + base + " --out " + runs, "eval.json"},
      {"eval-factor --world " + world + " --base " + base + " --out " + runs, "eval.json"},
      {"observe --world " + world + " --base " + base + " --n 6 --split all --k 3 --out " + runs,
       "observe.json"},
      {"probe --world " + world + " --base " + base + " --epochs 40 --out " + runs,
       "ranking.json"},
  };
  for (const auto& [args, artifact] : cases) {
    const auto first = run_cli(args);
    ASSERT_EQ(first.exit_code, 0) << args << "\n" << first.output;
    std::map<std::string, std::string> before;
    for (const auto& entry : fs::directory_iterator(runs))
      if (fs::exists(entry.path() / artifact))
        before[entry.path().string()] = slurp(entry.path() / artifact);
    ASSERT_FALSE(before.empty()) << args;
    const auto second = run_cli(args);
    ASSERT_EQ(second.exit_code, 0) << args << "\n" << second.output;
    for (const auto& [dir, bytes] : before)
      EXPECT_EQ(slurp(fs::path(dir) / artifact), bytes) << args;
  }
}

TEST_F(CliPipeline, AblateRunsMatchIndividuallyLaunchedVariants) {
  const std::string runs = (root / "runs_ablate").string();
  const auto ab =
      run_cli("ablate" + train_flags() + " --variants qa,qa+fqa --out " + runs);
  ASSERT_EQ(ab.exit_code, 0) << ab.output;
  EXPECT_NE(ab.output.find("best_mc1"), std::string::npos);

  // Relaunch each variant standalone into the same runs root: the per-variant
  // run.json files must already exist with identical bytes.
  for (const std::string variant : {"qa", "qa+fqa"}) {
    nlohmann::json run_before;
    std::string run_path;
    for (const auto& entry : fs::directory_iterator(runs)) {
      if (!fs::exists(entry.path() / "run.json")) continue;
      const auto doc = nlohmann::json::parse(slurp(entry.path() / "run.json"));
      if (doc.at("config").at("train").at("variant") == variant &&
          doc.at("command") == "finetune") {
        run_path = (entry.path() / "run.json").string();
        run_before = doc;
      }
    }
    ASSERT_FALSE(run_path.empty()) << variant;
    const std::string bytes_before = slurp(run_path);
    const auto solo =
        run_cli("finetune" + train_flags() + " --variant " + variant + " --out " + runs);
    ASSERT_EQ(solo.exit_code, 0) << solo.output;
    EXPECT_EQ(slurp(run_path), bytes_before) << variant;
  }

  nlohmann::json table;
  for (const auto& entry : fs::directory_iterator(runs))
    if (fs::exists(entry.path() / "ablate.json"))
      table = nlohmann::json::parse(slurp(entry.path() / "ablate.json"));
  ASSERT_FALSE(table.is_null());
  EXPECT_EQ(table.at("runs").size(), 2u);
}

TEST_F(CliPipeline, ProbeSelectionFlowsIntoFinetune) {
  const std::string runs = (root / "runs_ranked").string();
  const auto probe = run_cli("probe --world " + world + " --base " + base +
                             " --epochs 40 --n-select 2 --out " + runs);
  ASSERT_EQ(probe.exit_code, 0) << probe.output;
  std::string ranking_path;
  for (const auto& entry : fs::directory_iterator(runs))
    if (fs::exists(entry.path() / "ranking.json"))
      ranking_path = (entry.path() / "ranking.json").string();
  ASSERT_FALSE(ranking_path.empty());
  const auto ranking = nlohmann::json::parse(slurp(ranking_path));
  const auto selected = ranking.at("selected_top_n").get<std::vector<std::string>>();
  ASSERT_EQ(selected.size(), 2u);

  const auto ft = run_cli("finetune" + train_flags() + " --variant qa --steps 1 --ranking " +
                          ranking_path + " --out " + runs);
  ASSERT_EQ(ft.exit_code, 0) << ft.output;
  nlohmann::json run_doc;
  for (const auto& entry : fs::directory_iterator(runs))
    if (fs::exists(entry.path() / "run.json"))
      run_doc = nlohmann::json::parse(slurp(entry.path() / "run.json"));
  ASSERT_FALSE(run_doc.is_null());
  EXPECT_EQ(run_doc.at("config").at("train").at("selected_modules")
                .get<std::vector<std::string>>(),
            selected);

  // The persisted adapters cover exactly the selected modules.
  fs::path final_ckpt;
  for (const auto& entry : fs::recursive_directory_iterator(runs))
    if (entry.path().filename() == "final") final_ckpt = entry.path();
  ASSERT_FALSE(final_ckpt.empty());
  const f2::Checkpoint ckpt = f2::load_checkpoint(final_ckpt);
  std::vector<std::string> adapter_modules;
  for (const auto& [name, tensor] : ckpt.tensors)
    if (name.rfind("lora.", 0) == 0 && name.size() > 7 && name.substr(name.size() - 2) == ".a")
      adapter_modules.push_back(name.substr(5, name.size() - 7));
  std::vector<std::string> expected = selected;
  std::sort(expected.begin(), expected.end());
  std::sort(adapter_modules.begin(), adapter_modules.end());
  EXPECT_EQ(adapter_modules, expected);
}

TEST_F(CliPipeline, NumericAbortExitsTwoAndRecordsAbort) {
  const std::string runs = (root / "runs_abort").string();
  const auto r = run_cli("finetune" + train_flags() +
                         " --variant qa --epochs 2 --lr 1e30 --warmup 0 --eval-step 500 --out " +
                         runs);
  EXPECT_EQ(r.exit_code, 2) << r.output;
  nlohmann::json run_doc;
  for (const auto& entry : fs::directory_iterator(runs))
    if (fs::exists(entry.path() / "run.json"))
      run_doc = nlohmann::json::parse(slurp(entry.path() / "run.json"));
  ASSERT_FALSE(run_doc.is_null());
  ASSERT_TRUE(run_doc.contains("abort"));
  EXPECT_GE(run_doc.at("abort").at("step").get<int>(), 1);
}

TEST_F(CliPipeline, ValidationFailuresExitOne) {
  EXPECT_EQ(run_cli("finetune" + train_flags() + " --variant nonsense --steps 0").exit_code, 1);
  EXPECT_EQ(run_cli("finetune --world " + world + " --variant qa --steps 0").exit_code, 1);
  EXPECT_EQ(run_cli("eval-mc --world " + world + " --base " + (root / "missing").string())
                .exit_code,
            1);
  f2::write_json_file(root / "bad_key.json", nlohmann::json{{"train", {{"leraning_rate", 1}}}});
  EXPECT_EQ(run_cli("eval-mc --world " + world + " --base " + base + " --config " +
                    (root / "bad_key.json").string())
                .exit_code,
            1);
}

TEST_F(CliPipeline, ArtifactsEmbedVersionHashSeedAndConfig) {
  const std::string runs = (root / "runs_header").string();
  const auto r = run_cli("eval-mc --world " + world + " --base " + base + " --seed 31 --out " +
                         runs);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  for (const auto& entry : fs::directory_iterator(runs)) {
    const auto doc = nlohmann::json::parse(slurp(entry.path() / "eval.json"));
    EXPECT_EQ(doc.at("tool_version").get<std::string>(), std::string(f2::kToolVersion));
    EXPECT_EQ(doc.at("config_hash").get<std::string>(), entry.path().filename().string());
    EXPECT_EQ(doc.at("seed").get<std::uint64_t>(), 31u);
    EXPECT_TRUE(doc.contains("config"));
    EXPECT_TRUE(doc.contains("checkpoint_digest"));
    EXPECT_EQ(doc.at("command").get<std::string>(), "eval-mc");
  }
}
