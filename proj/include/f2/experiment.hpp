#pragma once

// Experiment plumbing shared by the command-line tool and its tests:
// canonical configuration hashing, typed config sections with strict key
// checking, world-directory (de)serialization, and self-describing JSON
// artifacts. No artifact carries a timestamp, so identical configuration and
// seed reproduce identical bytes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2/checkpoint.hpp"
#include "f2/common.hpp"
#include "f2/data.hpp"
#include "f2/model.hpp"
#include "f2/probing.hpp"
#include "f2/tokenizer.hpp"
#include "f2/training.hpp"

namespace f2 {

// nlohmann::json objects keep keys sorted, so dump() of a parsed document is
// canonical: two files with the same content in different key order hash the
// same.
inline std::string config_hash(const nlohmann::json& config) {
  return fnv1a64_hex(config.dump());
}

// ---------------------------------------------------------------------------
// JSON round-trips for corpus record types (found by nlohmann via ADL).
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const EntitySpan& s) {
  j = {{"char_start", s.char_start}, {"char_end", s.char_end}, {"type", s.type}};
}
inline void from_json(const nlohmann::json& j, EntitySpan& s) {
  j.at("char_start").get_to(s.char_start);
  j.at("char_end").get_to(s.char_end);
  j.at("type").get_to(s.type);
}

inline void to_json(nlohmann::json& j, const FqaSample& s) {
  j = {{"knowledge", s.knowledge},
       {"question", s.question},
       {"answer", s.answer},
       {"hallucinated_answer",
        s.hallucinated_answer ? nlohmann::json(*s.hallucinated_answer) : nlohmann::json()},
       {"entities", s.entities}};
}
inline void from_json(const nlohmann::json& j, FqaSample& s) {
  j.at("knowledge").get_to(s.knowledge);
  j.at("question").get_to(s.question);
  j.at("answer").get_to(s.answer);
  const auto& h = j.at("hallucinated_answer");
  s.hallucinated_answer =
      h.is_null() ? std::nullopt : std::optional<std::string>(h.get<std::string>());
  j.at("entities").get_to(s.entities);
}

inline void to_json(nlohmann::json& j, const McItem& it) {
  j = {{"question", it.question},
       {"true_answers", it.true_answers},
       {"false_answers", it.false_answers},
       {"best_index", it.best_index}};
}
inline void from_json(const nlohmann::json& j, McItem& it) {
  j.at("question").get_to(it.question);
  j.at("true_answers").get_to(it.true_answers);
  j.at("false_answers").get_to(it.false_answers);
  j.at("best_index").get_to(it.best_index);
}

inline void to_json(nlohmann::json& j, const FactorItem& it) {
  j = {{"prefix", it.prefix},
       {"factual_completion", it.factual_completion},
       {"nonfactual_completions", it.nonfactual_completions}};
}
inline void from_json(const nlohmann::json& j, FactorItem& it) {
  j.at("prefix").get_to(it.prefix);
  j.at("factual_completion").get_to(it.factual_completion);
  j.at("nonfactual_completions").get_to(it.nonfactual_completions);
}

inline void to_json(nlohmann::json& j, const WorldEntity& e) {
  j = {{"surface", e.surface}, {"type", e.type}};
}
inline void from_json(const nlohmann::json& j, WorldEntity& e) {
  j.at("surface").get_to(e.surface);
  j.at("type").get_to(e.type);
}

inline void to_json(nlohmann::json& j, const WorldFact& f) {
  j = {{"subject", f.subject},   {"object", f.object},     {"relation", f.relation},
       {"sentence", f.sentence}, {"question", f.question}, {"answer", f.answer}};
}
inline void from_json(const nlohmann::json& j, WorldFact& f) {
  j.at("subject").get_to(f.subject);
  j.at("object").get_to(f.object);
  j.at("relation").get_to(f.relation);
  j.at("sentence").get_to(f.sentence);
  j.at("question").get_to(f.question);
  j.at("answer").get_to(f.answer);
}

// ---------------------------------------------------------------------------
// Configuration sections
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
  if (j.is_null()) return;
  if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ValidationError("unknown config key '" + where + "." + key + "'");
  }
}

}  // namespace detail

struct WorldGenConfig {
  std::uint64_t seed = 44;
  int n_entities = 200;
  int n_facts = 200;
  WorldOptions options;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"n_entities", n_entities},
            {"n_facts", n_facts},
            {"train_fraction", options.train_fraction},
            {"corpus_render_fraction", options.corpus_render_fraction},
            {"n_few_shot", options.n_few_shot},
            {"mc_false_count", options.mc_false_count}};
  }
  static WorldGenConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"seed", "n_entities", "n_facts", "train_fraction",
                        "corpus_render_fraction", "n_few_shot", "mc_false_count"},
                       "world");
    WorldGenConfig c;
    c.seed = j.value("seed", c.seed);
    c.n_entities = j.value("n_entities", c.n_entities);
    c.n_facts = j.value("n_facts", c.n_facts);
    c.options.train_fraction = j.value("train_fraction", c.options.train_fraction);
    c.options.corpus_render_fraction =
        j.value("corpus_render_fraction", c.options.corpus_render_fraction);
    c.options.n_few_shot = j.value("n_few_shot", c.options.n_few_shot);
    c.options.mc_false_count = j.value("mc_false_count", c.options.mc_false_count);
    return c;
  }
};

struct EvalConfig {
  int n = 300;                 // observation-study sample size
  double alpha = 1.1;          // span weighting strength for the indicators
  int k = 30;                  // attention-span size for the indicators
  std::uint64_t seed = 44;     // observation sampling seed
  int max_items = 0;           // cap on MC/FACTOR items; 0 = use all
  std::string split = "eval";  // observation pool: train | eval | all

  nlohmann::json to_json() const {
    return {{"n", n},       {"alpha", alpha},         {"k", k},
            {"seed", seed}, {"max_items", max_items}, {"split", split}};
  }
  static EvalConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"n", "alpha", "k", "seed", "max_items", "split"}, "eval");
    EvalConfig c;
    c.n = j.value("n", c.n);
    c.alpha = j.value("alpha", c.alpha);
    c.k = j.value("k", c.k);
    c.seed = j.value("seed", c.seed);
    c.max_items = j.value("max_items", c.max_items);
    c.split = j.value("split", c.split);
    if (c.split != "train" && c.split != "eval" && c.split != "all")
      throw ValidationError("eval.split must be train, eval, or all, got '" + c.split + "'");
    if (c.max_items < 0) throw ValidationError("eval.max_items must be >= 0");
    return c;
  }
};

struct PathsConfig {
  std::string world_dir = "world";
  std::string base_checkpoint;  // checkpoint directory for model-consuming commands
  std::string runs_root = "runs";
  std::string ranking;  // optional ranking.json whose selection picks adapter targets

  nlohmann::json to_json() const {
    return {{"world_dir", world_dir},
            {"base_checkpoint", base_checkpoint},
            {"runs_root", runs_root},
            {"ranking", ranking}};
  }
  static PathsConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"world_dir", "base_checkpoint", "runs_root", "ranking"}, "paths");
    PathsConfig c;
    c.world_dir = j.value("world_dir", c.world_dir);
    c.base_checkpoint = j.value("base_checkpoint", c.base_checkpoint);
    c.runs_root = j.value("runs_root", c.runs_root);
    c.ranking = j.value("ranking", c.ranking);
    return c;
  }
};

struct AblateConfig {
  std::vector<std::string> variants = {"qa", "qa+fqa", "qa+fqa+r", "qa+fqa+e", "f2"};

  nlohmann::json to_json() const { return {{"variants", variants}}; }
  static AblateConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"variants"}, "ablate");
    AblateConfig c;
    c.variants = j.value("variants", c.variants);
    if (c.variants.empty()) throw ValidationError("ablate.variants must not be empty");
    for (const auto& v : c.variants) parse_variant(v);
    return c;
  }
};

struct ExperimentConfig {
  std::string command;
  WorldGenConfig world;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  ProbeOptions probe;
  EvalConfig eval;
  AblateConfig ablate;
  PathsConfig paths;

  nlohmann::json to_json() const {
    return {{"command", command},   {"world", world.to_json()}, {"model", model.to_json()},
            {"pretrain", pretrain.to_json()}, {"train", train.to_json()},
            {"probe", probe.to_json()},       {"eval", eval.to_json()},
            {"ablate", ablate.to_json()},     {"paths", paths.to_json()}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"command", "world", "model", "pretrain", "train", "probe", "eval",
                        "ablate", "paths"},
                       "<root>");
    ExperimentConfig c;
    c.command = j.value("command", c.command);
    if (j.contains("world")) c.world = WorldGenConfig::from_json(j.at("world"));
    if (j.contains("model")) {
      detail::check_keys(j.at("model"),
                         {"vocab_size", "d_model", "n_layers", "n_heads", "context_len", "seed"},
                         "model");
      c.model = ModelConfig::from_json(j.at("model"));
    }
    if (j.contains("pretrain")) {
      detail::check_keys(j.at("pretrain"),
                         {"epochs", "batch_size", "lr", "warmup_steps", "seed", "cutoff_len"},
                         "pretrain");
      c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    }
    if (j.contains("train")) {
      detail::check_keys(j.at("train"),
                         {"variant", "alpha", "k", "lora", "selected_modules", "batch_size",
                          "micro_batch", "epochs", "lr", "warmup_steps", "eval_step", "max_steps",
                          "seed", "cutoff_len"},
                         "train");
      if (j.at("train").contains("lora"))
        detail::check_keys(j.at("train").at("lora"),
                           {"rank", "alpha", "dropout", "target_module_ids"}, "train.lora");
      c.train = TrainConfig::from_json(j.at("train"));
    }
    if (j.contains("probe")) {
      detail::check_keys(j.at("probe"),
                         {"n_select", "l2", "epochs", "lr", "train_fraction", "seed"}, "probe");
      c.probe = ProbeOptions::from_json(j.at("probe"));
    }
    if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
    if (j.contains("ablate")) c.ablate = AblateConfig::from_json(j.at("ablate"));
    if (j.contains("paths")) c.paths = PathsConfig::from_json(j.at("paths"));
    return c;
  }

  // Identity of the experiment: every section except `paths`, which only says
  // where inputs and artifacts live. Relocating directories keeps the hash;
  // the artifacts named by it embed the full config, paths included, and the
  // digests of the actual inputs used.
  std::string hash() const {
    nlohmann::json j = to_json();
    j.erase("paths");
    return config_hash(j);
  }
};

// The seed that governs the randomness of a given subcommand; recorded in
// every artifact header.
inline std::uint64_t operative_seed(const ExperimentConfig& cfg) {
  if (cfg.command == "gen-world") return cfg.world.seed;
  if (cfg.command == "pretrain") return cfg.pretrain.seed;
  if (cfg.command == "probe") return cfg.probe.seed;
  if (cfg.command == "finetune" || cfg.command == "ablate") return cfg.train.seed;
  if (cfg.command == "eval-mc" || cfg.command == "eval-factor" || cfg.command == "observe")
    return cfg.eval.seed;
  throw ValidationError("operative_seed: unknown command '" + cfg.command + "'");
}

inline nlohmann::json artifact_header(const ExperimentConfig& cfg) {
  return {{"tool_version", kToolVersion},
          {"command", cfg.command},
          {"config_hash", cfg.hash()},
          {"seed", operative_seed(cfg)},
          {"config", cfg.to_json()}};
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  return nlohmann::json::parse(read_text_file(path));
}

template <class T>
std::string jsonl_dump(const std::vector<T>& rows) {
  std::string out;
  for (const auto& row : rows) out += nlohmann::json(row).dump() + "\n";
  return out;
}

template <class T>
std::vector<T> jsonl_parse(const std::string& content) {
  std::vector<T> rows;
  std::istringstream in(content);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(nlohmann::json::parse(line).get<T>());
  }
  return rows;
}

// Digest over a checkpoint's tensor names, shapes, and raw float bytes.
inline std::string checkpoint_digest(const Checkpoint& ckpt) {
  std::uint64_t h = fnv1a64("checkpoint");
  for (const auto& [name, t] : ckpt.tensors) {
    h = mix64(h, fnv1a64(name));
    h = mix64(h, fnv1a64(nlohmann::json(t.shape()).dump()));
    const auto* bytes = reinterpret_cast<const char*>(t.values().data());
    h = mix64(h, fnv1a64(std::string_view(bytes, t.numel() * sizeof(float))));
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

// The tokenizer every consumer of a world must use: rebuilt deterministically
// from the world's corpus and gazetteer tag inventory.
inline Tokenizer world_tokenizer(const World& w) {
  return Tokenizer::build(w.corpus_text, tag_tokens(w.gazetteer));
}

inline std::string tokenizer_digest(const Tokenizer& tok) {
  return fnv1a64_hex(tok.to_json().dump());
}

// ---------------------------------------------------------------------------
// World directory format: one JSONL file per record collection, the raw
// corpus text, and a manifest with counts and per-file digests.
// ---------------------------------------------------------------------------

inline void save_world(const std::filesystem::path& dir, const World& w,
                       const ExperimentConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> files;
  files["corpus.txt"] = w.corpus_text;
  files["entities.jsonl"] = jsonl_dump(w.entities);
  files["facts.jsonl"] = jsonl_dump(w.facts);
  files["samples_train.jsonl"] = jsonl_dump(w.train_samples);
  files["samples_eval.jsonl"] = jsonl_dump(w.eval_samples);
  files["few_shot.jsonl"] = jsonl_dump(w.few_shot_exemplars);
  files["mc_items.jsonl"] = jsonl_dump(w.mc_items);
  files["factor_items.jsonl"] = jsonl_dump(w.factor_items);
  std::vector<nlohmann::json> gaz_rows;
  for (const auto& [surface, type] : w.gazetteer)
    gaz_rows.push_back({{"surface", surface}, {"type", type}});
  files["gazetteer.jsonl"] = jsonl_dump(gaz_rows);

  nlohmann::json digests;
  for (const auto& [name, content] : files) {
    write_text_file(dir / name, content);
    digests[name] = fnv1a64_hex(content);
  }
  nlohmann::json manifest = artifact_header(cfg);
  manifest["train_fact_ids"] = w.train_fact_ids;
  manifest["eval_fact_ids"] = w.eval_fact_ids;
  manifest["counts"] = {{"entities", w.entities.size()},
                        {"facts", w.facts.size()},
                        {"train_samples", w.train_samples.size()},
                        {"eval_samples", w.eval_samples.size()},
                        {"mc_items", w.mc_items.size()},
                        {"factor_items", w.factor_items.size()}};
  manifest["file_digests"] = digests;
  write_json_file(dir / "world.json", manifest);
}

inline World load_world(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_json_file(dir / "world.json");
  const auto& digests = manifest.at("file_digests");
  std::map<std::string, std::string> files;
  for (const auto& [name, digest] : digests.items()) {
    files[name] = read_text_file(dir / name);
    const std::string actual = fnv1a64_hex(files[name]);
    if (actual != digest.get<std::string>())
      throw ValidationError("world file " + name + " does not match its manifest digest (" +
                            actual + " vs " + digest.get<std::string>() +
                            "); regenerate the world directory");
  }
  World w;
  w.corpus_text = files.at("corpus.txt");
  w.entities = jsonl_parse<WorldEntity>(files.at("entities.jsonl"));
  w.facts = jsonl_parse<WorldFact>(files.at("facts.jsonl"));
  w.train_samples = jsonl_parse<FqaSample>(files.at("samples_train.jsonl"));
  w.eval_samples = jsonl_parse<FqaSample>(files.at("samples_eval.jsonl"));
  w.few_shot_exemplars = jsonl_parse<FqaSample>(files.at("few_shot.jsonl"));
  w.mc_items = jsonl_parse<McItem>(files.at("mc_items.jsonl"));
  w.factor_items = jsonl_parse<FactorItem>(files.at("factor_items.jsonl"));
  for (const auto& row : jsonl_parse<nlohmann::json>(files.at("gazetteer.jsonl")))
    w.gazetteer[row.at("surface").get<std::string>()] = row.at("type").get<std::string>();
  manifest.at("train_fact_ids").get_to(w.train_fact_ids);
  manifest.at("eval_fact_ids").get_to(w.eval_fact_ids);
  const auto& counts = manifest.at("counts");
  if (counts.at("entities").get<std::size_t>() != w.entities.size() ||
      counts.at("facts").get<std::size_t>() != w.facts.size() ||
      counts.at("train_samples").get<std::size_t>() != w.train_samples.size() ||
      counts.at("eval_samples").get<std::size_t>() != w.eval_samples.size() ||
      counts.at("mc_items").get<std::size_t>() != w.mc_items.size() ||
      counts.at("factor_items").get<std::size_t>() != w.factor_items.size())
    throw ValidationError("world manifest counts do not match file contents in " + dir.string());
  return w;
}

}  // namespace f2
