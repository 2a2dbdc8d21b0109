// f2 — operator surface for the decomposed-objective fine-tuning pipeline.
//
// Subcommands: gen-world, pretrain, probe, finetune, eval-mc, eval-factor,
// observe, ablate. Configuration precedence, lowest to highest: built-in
// defaults, --config JSON file, the F2_SEED environment variable (applied to
// the subcommand's operative seed), explicit command-line flags. Every
// artifact embeds the tool version, the canonical config hash, and the
// operative seed, and contains no timestamps, so identical configuration and
// seed reproduce identical bytes. Exit codes: 0 success, 1 validation error,
// 2 numeric abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "f2/eval.hpp"
#include "f2/experiment.hpp"
#include "f2/probing.hpp"
#include "f2/training.hpp"

namespace fs = std::filesystem;

namespace {

std::uint64_t parse_seed(const std::string& text) {
  std::size_t used = 0;
  std::uint64_t value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw f2::ValidationError("invalid seed value '" + text + "'");
  }
  if (used != text.size()) throw f2::ValidationError("invalid seed value '" + text + "'");
  return value;
}

void set_operative_seed(f2::ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.command == "gen-world")
    cfg.world.seed = seed;
  else if (cfg.command == "pretrain")
    cfg.pretrain.seed = seed;
  else if (cfg.command == "probe")
    cfg.probe.seed = seed;
  else if (cfg.command == "finetune" || cfg.command == "ablate")
    cfg.train.seed = seed;
  else
    cfg.eval.seed = seed;
}

f2::World load_world_checked(const f2::ExperimentConfig& cfg) {
  if (cfg.paths.world_dir.empty())
    throw f2::ValidationError("--world directory is required");
  return f2::load_world(cfg.paths.world_dir);
}

f2::Model load_base_model(const f2::ExperimentConfig& cfg, const f2::Tokenizer& tok) {
  if (cfg.paths.base_checkpoint.empty())
    throw f2::ValidationError("--base checkpoint directory is required");
  const f2::Checkpoint ckpt = f2::load_checkpoint(cfg.paths.base_checkpoint);
  if (ckpt.extra.contains("tokenizer_digest") &&
      ckpt.extra.at("tokenizer_digest").get<std::string>() != f2::tokenizer_digest(tok))
    throw f2::ValidationError("checkpoint at " + cfg.paths.base_checkpoint +
                              " was built against a different world (tokenizer digest mismatch)");
  return f2::Model::from_checkpoint(ckpt);
}

std::vector<f2::McItem> capped_mc_items(const f2::World& world, int max_items) {
  std::vector<f2::McItem> items = world.mc_items;
  if (max_items > 0 && static_cast<int>(items.size()) > max_items)
    items.resize(static_cast<std::size_t>(max_items));
  return items;
}

void save_run_checkpoint(const fs::path& dir, f2::Checkpoint ckpt,
                         const f2::ExperimentConfig& cfg, const std::string& tok_digest) {
  ckpt.seed = f2::operative_seed(cfg);
  ckpt.config_hash = cfg.hash();
  ckpt.extra["tokenizer_digest"] = tok_digest;
  f2::save_checkpoint(dir, ckpt);
}

int run_gen_world(f2::ExperimentConfig cfg) {
  const f2::World world = f2::generate_world(cfg.world.seed, cfg.world.n_entities,
                                             cfg.world.n_facts, cfg.world.options);
  f2::save_world(cfg.paths.world_dir, world, cfg);
  std::cout << "world " << cfg.hash() << " written to " << cfg.paths.world_dir << ": "
            << world.facts.size() << " facts, " << world.train_samples.size() << " train / "
            << world.eval_samples.size() << " eval samples, " << world.mc_items.size()
            << " mc items, " << world.factor_items.size() << " factor items\n";
  return 0;
}

int run_pretrain(f2::ExperimentConfig cfg) {
  const f2::World world = load_world_checked(cfg);
  const f2::Tokenizer tok = f2::world_tokenizer(world);
  f2::ModelConfig mc = cfg.model;
  mc.vocab_size = tok.vocab_size();
  f2::Model model = f2::Model::init(mc);

  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  fs::create_directories(run_dir);
  std::ofstream log(run_dir / "log.jsonl", std::ios::trunc);
  const f2::PretrainRecord record = f2::pretrain(model, tok, world.corpus_text, cfg.pretrain, &log);

  nlohmann::json report = f2::artifact_header(cfg);
  report["steps"] = record.steps;
  report["final_loss"] = record.final_loss;
  if (record.aborted_numeric) {
    report["abort"] = {{"reason", record.abort_reason}};
  } else {
    std::vector<std::string> sentences;
    for (const auto& fact : world.facts) sentences.push_back(fact.sentence);
    report["fact_next_token_accuracy"] = f2::next_token_accuracy(model, tok, sentences);
  }
  f2::Checkpoint ckpt = model.to_checkpoint();
  report["checkpoint_digest"] = f2::checkpoint_digest(ckpt);
  save_run_checkpoint(run_dir / "checkpoints" / "base", std::move(ckpt), cfg,
                      f2::tokenizer_digest(tok));
  f2::write_json_file(run_dir / "run.json", report);
  std::cout << "pretrain " << cfg.hash() << ": " << record.steps << " steps, final loss "
            << record.final_loss << "; base checkpoint at "
            << (run_dir / "checkpoints" / "base").string() << "\n";
  return record.aborted_numeric ? 2 : 0;
}

int run_probe(f2::ExperimentConfig cfg) {
  const f2::World world = load_world_checked(cfg);
  const f2::Tokenizer tok = f2::world_tokenizer(world);
  const f2::Model model = load_base_model(cfg, tok);

  const f2::ModuleProbeReport report = f2::probe_modules(model, tok, world.train_samples, cfg.probe);
  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  nlohmann::json doc = f2::artifact_header(cfg);
  doc["checkpoint_digest"] = f2::checkpoint_digest(f2::load_checkpoint(cfg.paths.base_checkpoint));
  doc.update(report.to_json());
  f2::write_json_file(run_dir / "ranking.json", doc);
  std::cout << "probe " << cfg.hash() << ": ranked " << report.ranking.size()
            << " modules; selected";
  for (const auto& id : report.selected_top_n) std::cout << " " << id;
  std::cout << "; report at " << (run_dir / "ranking.json").string() << "\n";
  return 0;
}

// Shared by `finetune` and `ablate` so per-variant runs are bytewise
// indistinguishable from individually launched ones.
int run_finetune(f2::ExperimentConfig cfg, nlohmann::json* summary_out = nullptr) {
  if (!cfg.paths.ranking.empty()) {
    const nlohmann::json ranking = f2::read_json_file(cfg.paths.ranking);
    cfg.train.selected_modules =
        ranking.at("selected_top_n").get<std::vector<std::string>>();
    if (cfg.train.selected_modules.empty())
      throw f2::ValidationError("ranking file " + cfg.paths.ranking + " selects no modules");
  }
  const f2::World world = load_world_checked(cfg);
  const f2::Tokenizer tok = f2::world_tokenizer(world);
  f2::Model model = load_base_model(cfg, tok);
  const std::vector<f2::McItem> items = capped_mc_items(world, cfg.eval.max_items);

  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  fs::create_directories(run_dir);
  std::ofstream log(run_dir / "log.jsonl", std::ios::trunc);
  const f2::RunRecord record =
      f2::finetune(model, tok, world.train_samples, items, cfg.train, &log);

  const std::string tok_digest = f2::tokenizer_digest(tok);
  save_run_checkpoint(run_dir / "checkpoints" / "final", model.to_checkpoint(), cfg, tok_digest);
  if (record.best_mc1.step >= 0)
    save_run_checkpoint(run_dir / "checkpoints" / "best_mc1", record.best_mc1.checkpoint, cfg,
                        tok_digest);
  if (record.best_mc2.step >= 0)
    save_run_checkpoint(run_dir / "checkpoints" / "best_mc2", record.best_mc2.checkpoint, cfg,
                        tok_digest);

  nlohmann::json report = f2::artifact_header(cfg);
  report.update(record.to_json());
  report["eval_items"] = items.size();
  report["final_checkpoint_digest"] = f2::checkpoint_digest(model.to_checkpoint());
  f2::write_json_file(run_dir / "run.json", report);

  if (summary_out)
    *summary_out = {{"variant", cfg.train.variant},
                    {"config_hash", cfg.hash()},
                    {"run", (run_dir / "run.json").string()},
                    {"best_mc1", record.best_mc1.mc1},
                    {"best_mc2", record.best_mc2.mc2},
                    {"aborted", record.aborted_numeric}};
  std::cout << "finetune " << cfg.hash() << " (" << cfg.train.variant << "): best MC1 "
            << record.best_mc1.mc1 << " @ step " << record.best_mc1.step << ", best MC2 "
            << record.best_mc2.mc2 << " @ step " << record.best_mc2.step;
  if (record.aborted_numeric)
    std::cout << "; numeric abort at step " << record.abort_step;
  std::cout << "; artifacts in " << run_dir.string() << "\n";
  return record.aborted_numeric ? 2 : 0;
}

int run_eval(f2::ExperimentConfig cfg) {
  const f2::World world = load_world_checked(cfg);
  const f2::Tokenizer tok = f2::world_tokenizer(world);
  const f2::Model model = load_base_model(cfg, tok);

  nlohmann::json report = f2::artifact_header(cfg);
  report["checkpoint_digest"] = f2::checkpoint_digest(model.to_checkpoint());
  if (cfg.command == "eval-mc") {
    const std::vector<f2::McItem> items = capped_mc_items(world, cfg.eval.max_items);
    const f2::McScores scores = f2::mc_eval(model, tok, items);
    report["metric"] = "mc";
    report["n_items"] = items.size();
    report["scores"] = scores.to_json();
    std::cout << "eval-mc " << cfg.hash() << ": MC1 " << scores.mc1 << " MC2 " << scores.mc2
              << " MC3 " << scores.mc3 << " over " << items.size() << " items\n";
  } else {
    std::vector<f2::FactorItem> items = world.factor_items;
    if (cfg.eval.max_items > 0 && static_cast<int>(items.size()) > cfg.eval.max_items)
      items.resize(static_cast<std::size_t>(cfg.eval.max_items));
    nlohmann::json per_item = nlohmann::json::array();
    for (const auto& item : items)
      per_item.push_back(f2::factor_accuracy(model, tok, {item}) == 1.0);
    const double accuracy = f2::factor_accuracy(model, tok, items);
    report["metric"] = "factor";
    report["n_items"] = items.size();
    report["accuracy"] = accuracy;
    report["per_item"] = per_item;
    std::cout << "eval-factor " << cfg.hash() << ": accuracy " << accuracy << " over "
              << items.size() << " items\n";
  }
  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  f2::write_json_file(run_dir / "eval.json", report);
  return 0;
}

int run_observe(f2::ExperimentConfig cfg) {
  const f2::World world = load_world_checked(cfg);
  const f2::Tokenizer tok = f2::world_tokenizer(world);
  const f2::Model model = load_base_model(cfg, tok);

  std::vector<f2::FqaSample> pool;
  if (cfg.eval.split == "train" || cfg.eval.split == "all")
    pool.insert(pool.end(), world.train_samples.begin(), world.train_samples.end());
  if (cfg.eval.split == "eval" || cfg.eval.split == "all")
    pool.insert(pool.end(), world.eval_samples.begin(), world.eval_samples.end());

  const f2::ObservationReport report = f2::observation_experiment(
      model, tok, pool, cfg.eval.n, cfg.eval.seed, cfg.eval.alpha, cfg.eval.k);
  nlohmann::json doc = f2::artifact_header(cfg);
  doc["checkpoint_digest"] = f2::checkpoint_digest(model.to_checkpoint());
  doc.update(report.to_json());
  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  f2::write_json_file(run_dir / "observe.json", doc);
  std::cout << "observe " << cfg.hash() << ": n=" << cfg.eval.n << " rho(avg_h) "
            << report.avg.rho << ", rho(avg_E_h) " << report.avg_e.rho << ", rho(avg_AE_h) "
            << report.avg_ae.rho << "; report at " << (run_dir / "observe.json").string() << "\n";
  return 0;
}

int run_ablate(f2::ExperimentConfig cfg) {
  for (const auto& v : cfg.ablate.variants) f2::parse_variant(v);
  nlohmann::json rows = nlohmann::json::array();
  int exit_code = 0;
  for (const auto& variant : cfg.ablate.variants) {
    f2::ExperimentConfig sub = cfg;
    sub.command = "finetune";
    sub.train.variant = variant;
    sub.ablate = f2::AblateConfig{};  // per-variant config matches a standalone finetune
    nlohmann::json summary;
    exit_code = std::max(exit_code, run_finetune(std::move(sub), &summary));
    rows.push_back(std::move(summary));
  }
  nlohmann::json doc = f2::artifact_header(cfg);
  doc["runs"] = rows;
  const fs::path run_dir = fs::path(cfg.paths.runs_root) / cfg.hash();
  f2::write_json_file(run_dir / "ablate.json", doc);

  std::cout << "\n" << std::left << std::setw(14) << "variant" << std::right << std::setw(10)
            << "best_mc1" << std::setw(10) << "best_mc2" << "  run\n";
  for (const auto& row : rows)
    std::cout << std::left << std::setw(14) << row.at("variant").get<std::string>() << std::right
              << std::setw(10) << std::fixed << std::setprecision(4)
              << row.at("best_mc1").get<double>() << std::setw(10)
              << row.at("best_mc2").get<double>() << "  " << row.at("run").get<std::string>()
              << "\n";
  std::cout << "comparison at " << (run_dir / "ablate.json").string() << "\n";
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decomposed-objective fine-tuning and truthfulness evaluation for a tiny"
               " autoregressive language model"};
  app.require_subcommand(1);

  f2::ExperimentConfig stage;  // flag values land here; applied over file/env below
  std::string config_path;
  std::vector<std::pair<CLI::Option*, std::function<void(f2::ExperimentConfig&)>>> appliers;

  // Registers a flag that stages into `field` and, if given, later overwrites
  // the corresponding field of the effective config via `setter`.
  const auto opt_set = [&appliers](CLI::App* sub, const std::string& name, auto& field,
                                   const std::string& desc, auto setter) -> CLI::Option* {
    CLI::Option* o = sub->add_option(name, field, desc);
    o->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);  // repeated flags: last wins
    appliers.emplace_back(o, [&field, setter](f2::ExperimentConfig& cfg) { setter(cfg, field); });
    return o;
  };

  const auto add_config_flag = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file; flags override its values")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  const auto add_world_flag = [&](CLI::App* sub) {
    opt_set(sub, "--world", stage.paths.world_dir, "world directory from gen-world",
            [](f2::ExperimentConfig& c, const std::string& v) { c.paths.world_dir = v; });
  };
  const auto add_base_flag = [&](CLI::App* sub) {
    opt_set(sub, "--base", stage.paths.base_checkpoint, "model checkpoint directory",
            [](f2::ExperimentConfig& c, const std::string& v) { c.paths.base_checkpoint = v; });
  };
  const auto add_runs_flag = [&](CLI::App* sub) {
    opt_set(sub, "--out", stage.paths.runs_root, "root directory for run artifacts",
            [](f2::ExperimentConfig& c, const std::string& v) { c.paths.runs_root = v; });
  };

  // ---- gen-world ----
  CLI::App* gen = app.add_subcommand("gen-world", "generate a synthetic fact world");
  add_config_flag(gen);
  opt_set(gen, "--seed", stage.world.seed, "world generation seed",
          [](f2::ExperimentConfig& c, std::uint64_t v) { c.world.seed = v; });
  opt_set(gen, "--n-entities", stage.world.n_entities, "number of entities",
          [](f2::ExperimentConfig& c, int v) { c.world.n_entities = v; });
  opt_set(gen, "--n-facts", stage.world.n_facts, "number of facts",
          [](f2::ExperimentConfig& c, int v) { c.world.n_facts = v; });
  opt_set(gen, "--train-fraction", stage.world.options.train_fraction,
          "fraction of facts held for fine-tuning",
          [](f2::ExperimentConfig& c, double v) { c.world.options.train_fraction = v; });
  opt_set(gen, "--corpus-render-fraction", stage.world.options.corpus_render_fraction,
          "fraction of train facts whose QA renders join the pretraining corpus",
          [](f2::ExperimentConfig& c, double v) { c.world.options.corpus_render_fraction = v; });
  opt_set(gen, "--few-shot", stage.world.options.n_few_shot, "few-shot exemplar count",
          [](f2::ExperimentConfig& c, int v) { c.world.options.n_few_shot = v; });
  opt_set(gen, "--mc-false", stage.world.options.mc_false_count,
          "false answers per multiple-choice item",
          [](f2::ExperimentConfig& c, int v) { c.world.options.mc_false_count = v; });
  opt_set(gen, "--out", stage.paths.world_dir, "output world directory",
          [](f2::ExperimentConfig& c, const std::string& v) { c.paths.world_dir = v; });

  // ---- pretrain ----
  CLI::App* pre = app.add_subcommand("pretrain", "train a base model on the world corpus");
  add_config_flag(pre);
  add_world_flag(pre);
  add_runs_flag(pre);
  opt_set(pre, "--seed", stage.pretrain.seed, "training seed",
          [](f2::ExperimentConfig& c, std::uint64_t v) { c.pretrain.seed = v; });
  opt_set(pre, "--epochs", stage.pretrain.epochs, "training epochs",
          [](f2::ExperimentConfig& c, int v) { c.pretrain.epochs = v; });
  opt_set(pre, "--batch-size", stage.pretrain.batch_size, "batch size",
          [](f2::ExperimentConfig& c, int v) { c.pretrain.batch_size = v; });
  opt_set(pre, "--lr", stage.pretrain.lr, "peak learning rate",
          [](f2::ExperimentConfig& c, double v) { c.pretrain.lr = v; });
  opt_set(pre, "--warmup", stage.pretrain.warmup_steps, "linear warmup steps",
          [](f2::ExperimentConfig& c, int v) { c.pretrain.warmup_steps = v; });
  opt_set(pre, "--cutoff", stage.pretrain.cutoff_len, "max tokens per corpus line",
          [](f2::ExperimentConfig& c, int v) { c.pretrain.cutoff_len = v; });
  opt_set(pre, "--d-model", stage.model.d_model, "model width",
          [](f2::ExperimentConfig& c, int v) { c.model.d_model = v; });
  opt_set(pre, "--n-layers", stage.model.n_layers, "transformer layers",
          [](f2::ExperimentConfig& c, int v) { c.model.n_layers = v; });
  opt_set(pre, "--n-heads", stage.model.n_heads, "attention heads",
          [](f2::ExperimentConfig& c, int v) { c.model.n_heads = v; });
  opt_set(pre, "--context-len", stage.model.context_len, "maximum context length",
          [](f2::ExperimentConfig& c, int v) { c.model.context_len = v; });
  opt_set(pre, "--model-seed", stage.model.seed, "weight initialization seed",
          [](f2::ExperimentConfig& c, std::uint64_t v) { c.model.seed = v; });

  // ---- probe ----
  CLI::App* prb = app.add_subcommand(
      "probe", "rank modules by truthful/hallucinated separability of their hidden states");
  add_config_flag(prb);
  add_world_flag(prb);
  add_base_flag(prb);
  add_runs_flag(prb);
  opt_set(prb, "--seed", stage.probe.seed, "probe split/init seed",
          [](f2::ExperimentConfig& c, std::uint64_t v) { c.probe.seed = v; });
  opt_set(prb, "--n-select", stage.probe.n_select, "modules to select",
          [](f2::ExperimentConfig& c, int v) { c.probe.n_select = v; });
  opt_set(prb, "--l2", stage.probe.l2, "probe L2 penalty",
          [](f2::ExperimentConfig& c, double v) { c.probe.l2 = v; });
  opt_set(prb, "--epochs", stage.probe.epochs, "probe training epochs",
          [](f2::ExperimentConfig& c, int v) { c.probe.epochs = v; });
  opt_set(prb, "--lr", stage.probe.lr, "probe learning rate",
          [](f2::ExperimentConfig& c, double v) { c.probe.lr = v; });
  opt_set(prb, "--train-fraction", stage.probe.train_fraction, "probe train split fraction",
          [](f2::ExperimentConfig& c, double v) { c.probe.train_fraction = v; });

  // ---- finetune / ablate (shared flag set) ----
  const auto add_train_flags = [&](CLI::App* sub) {
    add_config_flag(sub);
    add_world_flag(sub);
    add_base_flag(sub);
    add_runs_flag(sub);
    opt_set(sub, "--ranking", stage.paths.ranking,
            "ranking.json whose selection picks adapter targets (overrides --selected)",
            [](f2::ExperimentConfig& c, const std::string& v) { c.paths.ranking = v; });
    opt_set(sub, "--seed", stage.train.seed, "fine-tuning seed",
            [](f2::ExperimentConfig& c, std::uint64_t v) { c.train.seed = v; });
    opt_set(sub, "--alpha", stage.train.alpha, "span weight strength",
            [](f2::ExperimentConfig& c, double v) { c.train.alpha = v; });
    opt_set(sub, "--k", stage.train.k, "attention-span size",
            [](f2::ExperimentConfig& c, int v) { c.train.k = v; });
    sub->add_option("--selected", stage.train.selected_modules,
                    "adapter target module ids (comma separated; default all)")
        ->delimiter(',')
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    appliers.emplace_back(sub->get_option("--selected"),
                          [&stage](f2::ExperimentConfig& c) {
                            c.train.selected_modules = stage.train.selected_modules;
                          });
    opt_set(sub, "--batch-size", stage.train.batch_size, "macro batch size",
            [](f2::ExperimentConfig& c, int v) { c.train.batch_size = v; });
    opt_set(sub, "--micro-batch", stage.train.micro_batch, "micro batch size",
            [](f2::ExperimentConfig& c, int v) { c.train.micro_batch = v; });
    opt_set(sub, "--epochs", stage.train.epochs, "fine-tuning epochs",
            [](f2::ExperimentConfig& c, int v) { c.train.epochs = v; });
    opt_set(sub, "--steps", stage.train.max_steps,
            "cap on optimizer steps (-1 = no cap, 0 = evaluate only)",
            [](f2::ExperimentConfig& c, int v) { c.train.max_steps = v; });
    opt_set(sub, "--lr", stage.train.lr, "peak learning rate",
            [](f2::ExperimentConfig& c, double v) { c.train.lr = v; });
    opt_set(sub, "--warmup", stage.train.warmup_steps, "linear warmup steps",
            [](f2::ExperimentConfig& c, int v) { c.train.warmup_steps = v; });
    opt_set(sub, "--eval-step", stage.train.eval_step, "evaluate every N steps",
            [](f2::ExperimentConfig& c, int v) { c.train.eval_step = v; });
    opt_set(sub, "--cutoff", stage.train.cutoff_len, "max tokens per render",
            [](f2::ExperimentConfig& c, int v) { c.train.cutoff_len = v; });
    opt_set(sub, "--lora-rank", stage.train.lora.rank, "adapter rank",
            [](f2::ExperimentConfig& c, int v) { c.train.lora.rank = v; });
    opt_set(sub, "--lora-alpha", stage.train.lora.alpha, "adapter scale numerator",
            [](f2::ExperimentConfig& c, double v) { c.train.lora.alpha = v; });
    opt_set(sub, "--lora-dropout", stage.train.lora.dropout, "adapter dropout",
            [](f2::ExperimentConfig& c, double v) { c.train.lora.dropout = v; });
    opt_set(sub, "--max-items", stage.eval.max_items,
            "cap on evaluation items during training (0 = all)",
            [](f2::ExperimentConfig& c, int v) { c.eval.max_items = v; });
  };

  CLI::App* fin = app.add_subcommand("finetune", "fine-tune adapters with a loss variant");
  add_train_flags(fin);
  opt_set(fin, "--variant", stage.train.variant,
          "loss variant: qa, qa+fqa, qa+fqa+r, qa+fqa+e, tag+qa+fqa+e, f2",
          [](f2::ExperimentConfig& c, const std::string& v) { c.train.variant = v; });

  CLI::App* abl = app.add_subcommand("ablate", "run several loss variants and compare");
  add_train_flags(abl);
  abl->add_option("--variants", stage.ablate.variants, "comma-separated variant list")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  appliers.emplace_back(abl->get_option("--variants"), [&stage](f2::ExperimentConfig& c) {
    c.ablate.variants = stage.ablate.variants;
  });

  // ---- eval-mc / eval-factor ----
  const auto add_eval_flags = [&](CLI::App* sub) {
    add_config_flag(sub);
    add_world_flag(sub);
    add_base_flag(sub);
    add_runs_flag(sub);
    opt_set(sub, "--seed", stage.eval.seed, "recorded evaluation seed",
            [](f2::ExperimentConfig& c, std::uint64_t v) { c.eval.seed = v; });
    opt_set(sub, "--max-items", stage.eval.max_items, "cap on items (0 = all)",
            [](f2::ExperimentConfig& c, int v) { c.eval.max_items = v; });
  };
  CLI::App* emc = app.add_subcommand("eval-mc", "multiple-choice truthfulness metrics");
  add_eval_flags(emc);
  CLI::App* efa = app.add_subcommand("eval-factor", "factual-completion accuracy");
  add_eval_flags(efa);

  // ---- observe ----
  CLI::App* obs = app.add_subcommand(
      "observe", "entropy-indicator correlation study against hallucination labels");
  add_config_flag(obs);
  add_world_flag(obs);
  add_base_flag(obs);
  add_runs_flag(obs);
  opt_set(obs, "--seed", stage.eval.seed, "case sampling seed",
          [](f2::ExperimentConfig& c, std::uint64_t v) { c.eval.seed = v; });
  opt_set(obs, "--n", stage.eval.n, "number of cases",
          [](f2::ExperimentConfig& c, int v) { c.eval.n = v; });
  opt_set(obs, "--alpha", stage.eval.alpha, "span weight strength",
          [](f2::ExperimentConfig& c, double v) { c.eval.alpha = v; });
  opt_set(obs, "--k", stage.eval.k, "attention-span size",
          [](f2::ExperimentConfig& c, int v) { c.eval.k = v; });
  obs->add_option("--split", stage.eval.split, "sample pool: train, eval, or all")
      ->check(CLI::IsMember({"train", "eval", "all"}))
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  appliers.emplace_back(obs->get_option("--split"), [&stage](f2::ExperimentConfig& c) {
    c.eval.split = stage.eval.split;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    f2::ExperimentConfig cfg;
    cfg.command = app.get_subcommands().front()->get_name();
    if (!config_path.empty()) {
      nlohmann::json doc = cfg.to_json();
      doc.merge_patch(f2::read_json_file(config_path));
      cfg = f2::ExperimentConfig::from_json(doc);
      cfg.command = app.get_subcommands().front()->get_name();
    }
    if (const char* env_seed = std::getenv("F2_SEED"))
      set_operative_seed(cfg, parse_seed(env_seed));
    for (const auto& [option, apply] : appliers)
      if (option->count() > 0) apply(cfg);

    if (cfg.command == "gen-world") return run_gen_world(std::move(cfg));
    if (cfg.command == "pretrain") return run_pretrain(std::move(cfg));
    if (cfg.command == "probe") return run_probe(std::move(cfg));
    if (cfg.command == "finetune") return run_finetune(std::move(cfg));
    if (cfg.command == "eval-mc" || cfg.command == "eval-factor") return run_eval(std::move(cfg));
    if (cfg.command == "observe") return run_observe(std::move(cfg));
    if (cfg.command == "ablate") return run_ablate(std::move(cfg));
    std::cerr << "error: unknown subcommand '" << cfg.command << "'\n\n" << app.help();
    return 1;
  } catch (const f2::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 2;
  } catch (const f2::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
