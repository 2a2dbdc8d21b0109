// Acceptance gate, part 2 of 3: reproducibility.
//
// Criterion 10: every CLI subcommand, rerun with an identical command line
// (same config, same seed, same output root), must reproduce every artifact
// byte for byte. Artifacts carry no timestamps, so the comparison is strict.
//
// Protocol per subcommand: run once, stash the produced tree, delete it, run
// the identical command again, then compare the fresh tree against the stash
// file by file. The process prints one [PASS]/[FAIL] line and exits nonzero
// on failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int g_commands_run = 0;

[[noreturn]] void die(const std::string& msg) {
  std::printf("[FAIL] criterion 10 reproducibility: %s\n", msg.c_str());
  std::exit(1);
}

void run(const std::string& args) {
  const std::string cmd = std::string(F2_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  ++g_commands_run;
  if (status != 0) die("command exited with status " + std::to_string(status) + ": " + args);
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  if (!fs::exists(root)) die("expected output tree missing: " + root.string());
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    files.emplace(fs::relative(entry.path(), root).string(), buf.str());
  }
  if (files.empty()) die("no artifacts under " + root.string());
  return files;
}

int g_files_compared = 0;

// Runs the command twice against the same root and requires byte equality.
void check_rerun(const std::string& args, const fs::path& root) {
  run(args);
  const auto first = snapshot_tree(root);
  fs::remove_all(root);
  run(args);
  const auto second = snapshot_tree(root);
  if (first.size() != second.size())
    die("file count changed on rerun of '" + args + "': " + std::to_string(first.size()) +
        " vs " + std::to_string(second.size()));
  for (const auto& [rel, bytes] : first) {
    const auto it = second.find(rel);
    if (it == second.end()) die("file " + rel + " missing on rerun of '" + args + "'");
    if (it->second != bytes)
      die("byte mismatch in " + rel + " on rerun of '" + args + "'");
    ++g_files_compared;
  }
}

}  // namespace

int main() {
#ifdef _WIN32
  _putenv("F2_SEED=");
#else
  unsetenv("F2_SEED");  // the env override must not leak into the protocol
#endif
  const fs::path scratch = fs::temp_directory_path() / "f2_acceptance_repro";
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  const std::string world = (scratch / "world").string();

  check_rerun("gen-world --seed 11 --n-entities 12 --n-facts 16 --out " + world,
              scratch / "world");
  // Later stages consume the world, so regenerate it once more after the
  // delete-and-rerun cycle above.
  const std::string model_flags =
      " --d-model 32 --n-layers 2 --n-heads 2 --context-len 64";

  const fs::path pre_root = scratch / "pre";
  check_rerun("pretrain --world " + world + " --out " + pre_root.string() +
                  " --seed 7 --epochs 2 --batch-size 8 --lr 2e-3 --warmup 4" + model_flags,
              pre_root);

  fs::path base;
  for (const auto& entry : fs::directory_iterator(pre_root))
    if (entry.is_directory()) base = entry.path() / "checkpoints" / "base";
  if (base.empty() || !fs::exists(base)) die("pretrain produced no base checkpoint");
  const std::string base_flags = " --world " + world + " --base " + base.string();

  const fs::path probe_root = scratch / "probe";
  check_rerun("probe" + base_flags + " --out " + probe_root.string() +
                  " --seed 13 --n-select 2",
              probe_root);

  const fs::path ft_root = scratch / "ft";
  check_rerun("finetune" + base_flags + " --out " + ft_root.string() +
                  " --variant f2 --seed 21 --epochs 1 --batch-size 4 --micro-batch 2"
                  " --eval-step 5 --k 3 --lr 1e-3 --warmup 2 --max-items 8",
              ft_root);

  const fs::path ab_root = scratch / "ablate";
  check_rerun("ablate" + base_flags + " --out " + ab_root.string() +
                  " --variants qa,f2 --seed 21 --epochs 1 --batch-size 4 --micro-batch 2"
                  " --eval-step 5 --k 3 --lr 1e-3 --warmup 2 --max-items 6",
              ab_root);

  const fs::path mc_root = scratch / "mc";
  check_rerun("eval-mc" + base_flags + " --out " + mc_root.string() +
                  " --seed 3 --max-items 10",
              mc_root);

  const fs::path factor_root = scratch / "factor";
  check_rerun("eval-factor" + base_flags + " --out " + factor_root.string() +
                  " --seed 3 --max-items 10",
              factor_root);

  const fs::path ob_root = scratch / "observe";
  check_rerun("observe" + base_flags + " --out " + ob_root.string() +
                  " --seed 5 --n 6 --split all --k 2 --alpha 2",
              ob_root);

  std::printf(
      "[PASS] criterion 10 reproducibility: 8 subcommands rerun byte-identical "
      "(%d invocations, %d files compared)\n",
      g_commands_run, g_files_compared);
  fs::remove_all(scratch);
  return 0;
}
