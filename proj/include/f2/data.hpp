#pragma once

// Synthetic fact world: typed entities, templated single-object facts, QA /
// retrieval / FQA prompt rendering, gazetteer NER with tag insertion, and
// JSON-lines ingestion of externally produced records.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "f2/common.hpp"
#include "f2/tokenizer.hpp"
#include "json.hpp"

namespace f2 {

struct EntitySpan {
  int char_start = 0;  // [char_start, char_end) into the knowledge text
  int char_end = 0;
  std::string type;

  bool operator==(const EntitySpan&) const = default;
};

struct FqaSample {
  std::string knowledge;
  std::string question;
  std::string answer;
  std::optional<std::string> hallucinated_answer;
  std::vector<EntitySpan> entities;  // within knowledge, non-overlapping
};

struct McItem {
  std::string question;
  std::vector<std::string> true_answers;
  std::vector<std::string> false_answers;
  int best_index = 0;  // into true_answers
};

struct FactorItem {
  std::string prefix;
  std::string factual_completion;
  std::vector<std::string> nonfactual_completions;
};

// Surface form -> entity type.
using Gazetteer = std::map<std::string, std::string>;

// ---------------------------------------------------------------------------
// Gazetteer NER and tag insertion
// ---------------------------------------------------------------------------

// Longest-match, left-to-right, non-overlapping gazetteer tagging over word
// boundaries. Multi-word surfaces match a consecutive word-token sequence.
inline std::vector<EntitySpan> ner_tag(const std::string& text, const Gazetteer& gazetteer) {
  if (gazetteer.empty()) throw ValidationError("ner_tag: empty gazetteer");
  // Index surfaces by their first word; longest (most words, then most chars)
  // candidates are tried first.
  struct Candidate {
    std::vector<std::string> words;
    std::string surface;
    std::string type;
  };
  std::map<std::string, std::vector<Candidate>> by_first;
  for (const auto& [surface, type] : gazetteer) {
    Candidate c;
    for (const auto& t : split_text(surface)) c.words.push_back(t.text);
    if (c.words.empty()) continue;
    c.surface = surface;
    c.type = type;
    by_first[c.words[0]].push_back(std::move(c));
  }
  for (auto& [first, cands] : by_first)
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.words.size() != b.words.size()) return a.words.size() > b.words.size();
      return a.surface.size() > b.surface.size();
    });

  const std::vector<RawToken> tokens = split_text(text);
  std::vector<EntitySpan> spans;
  std::size_t i = 0;
  while (i < tokens.size()) {
    auto it = by_first.find(tokens[i].text);
    bool matched = false;
    if (it != by_first.end()) {
      for (const auto& cand : it->second) {
        if (i + cand.words.size() > tokens.size()) continue;
        bool ok = true;
        for (std::size_t w = 0; w < cand.words.size(); ++w)
          if (tokens[i + w].text != cand.words[w]) {
            ok = false;
            break;
          }
        if (ok) {
          spans.push_back({tokens[i].char_start, tokens[i + cand.words.size() - 1].char_end,
                           cand.type});
          i += cand.words.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) ++i;
  }
  return spans;
}

namespace detail {

inline void require_sorted_disjoint(const std::vector<EntitySpan>& spans, const std::string& op) {
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].char_start >= spans[i].char_end)
      throw ValidationError(op + ": empty entity span [" + std::to_string(spans[i].char_start) +
                            "," + std::to_string(spans[i].char_end) + ")");
    if (i > 0 && spans[i].char_start < spans[i - 1].char_end)
      throw ValidationError(op + ": overlapping entity spans at [" +
                            std::to_string(spans[i - 1].char_start) + "," +
                            std::to_string(spans[i - 1].char_end) + ") and [" +
                            std::to_string(spans[i].char_start) + "," +
                            std::to_string(spans[i].char_end) + ")");
  }
}

inline bool contains_tag_marker(const std::string& text) {
  for (const auto& t : split_text(text))
    if (t.text.size() > 2 && t.text.front() == '[' && t.text.back() == ']') return true;
  return false;
}

}  // namespace detail

// Inserts a literal "[TYPE] " marker immediately before each annotated entity
// in the knowledge text and shifts the entity char spans accordingly.
// Question and answer are untouched. Tagging an already-tagged sample is
// rejected rather than double-tagged.
inline FqaSample insert_tags(const FqaSample& sample) {
  if (detail::contains_tag_marker(sample.knowledge))
    throw ValidationError("insert_tags: knowledge already carries tag markers");
  std::vector<EntitySpan> spans = sample.entities;
  std::sort(spans.begin(), spans.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.char_start < b.char_start; });
  detail::require_sorted_disjoint(spans, "insert_tags");

  FqaSample tagged = sample;
  tagged.entities.clear();
  std::string out;
  int cursor = 0;
  for (const auto& span : spans) {
    if (span.char_end > static_cast<int>(sample.knowledge.size()))
      throw ValidationError("insert_tags: entity span [" + std::to_string(span.char_start) + "," +
                            std::to_string(span.char_end) + ") exceeds knowledge length " +
                            std::to_string(sample.knowledge.size()));
    out += sample.knowledge.substr(static_cast<std::size_t>(cursor),
                                   static_cast<std::size_t>(span.char_start - cursor));
    const std::string marker = "[" + span.type + "] ";
    const int new_start = static_cast<int>(out.size() + marker.size());
    out += marker;
    out += sample.knowledge.substr(static_cast<std::size_t>(span.char_start),
                                   static_cast<std::size_t>(span.char_end - span.char_start));
    tagged.entities.push_back({new_start, new_start + (span.char_end - span.char_start), span.type});
    cursor = span.char_end;
  }
  out += sample.knowledge.substr(static_cast<std::size_t>(cursor));
  tagged.knowledge = out;
  return tagged;
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

enum class RenderKind { qa, retrieval, fqa };

inline const char* render_kind_name(RenderKind k) {
  switch (k) {
    case RenderKind::qa: return "qa";
    case RenderKind::retrieval: return "retrieval";
    case RenderKind::fqa: return "fqa";
  }
  return "?";
}

struct Render {
  std::string text;
  std::vector<int> tokens;
  std::vector<RawToken> raw;  // offsets aligned with tokens
  int target_start = 0;       // [target_start, target_end) token indices of the
  int target_end = 0;         // loss-bearing segment
  int target_char_start = 0;  // same segment in characters
  int target_char_end = 0;

  int target_len() const { return target_end - target_start; }
};

// Renders one sample into prompt text plus a target-region descriptor. The
// target excludes all scaffolding: qa/fqa target the answer, retrieval
// targets the knowledge. few_shot prefixes the (qa) prompt with exemplar
// question/answer pairs.
inline Render render_prompt(const Tokenizer& tok, RenderKind kind, const FqaSample& sample,
                            bool few_shot = false,
                            const std::vector<FqaSample>& exemplars = {}) {
  if (sample.question.empty()) throw ValidationError("render_prompt: empty question");
  if (sample.answer.empty() && kind != RenderKind::retrieval)
    throw ValidationError("render_prompt: empty answer");
  if (sample.knowledge.empty() && kind != RenderKind::qa)
    throw ValidationError(std::string("render_prompt: missing knowledge for ") +
                          render_kind_name(kind) + " render");

  std::string text;
  if (few_shot && kind == RenderKind::qa)
    for (const auto& ex : exemplars) text += "Q: " + ex.question + " A: " + ex.answer + " ";

  std::string target;
  switch (kind) {
    case RenderKind::qa:
      text += "Q: " + sample.question + " A: ";
      target = sample.answer;
      break;
    case RenderKind::retrieval:
      text += "Q: " + sample.question + " Knowledge: ";
      target = sample.knowledge;
      break;
    case RenderKind::fqa:
      text += "Q: " + sample.question + " Knowledge: " + sample.knowledge + " A: ";
      target = sample.answer;
      break;
  }

  Render r;
  r.target_char_start = static_cast<int>(text.size());
  text += target;
  r.target_char_end = static_cast<int>(text.size());
  r.text = std::move(text);

  auto enc = tok.encode_with_offsets(r.text);
  r.tokens = std::move(enc.ids);
  r.raw = std::move(enc.raw);
  r.target_start = -1;
  for (std::size_t i = 0; i < r.raw.size(); ++i) {
    const bool inside = r.raw[i].char_start >= r.target_char_start &&
                        r.raw[i].char_end <= r.target_char_end;
    if (inside) {
      if (r.target_start < 0) r.target_start = static_cast<int>(i);
      r.target_end = static_cast<int>(i) + 1;
    } else if (r.target_start >= 0 && static_cast<int>(i) < r.target_end) {
      throw ValidationError("render_prompt: non-contiguous target region");
    }
  }
  if (r.target_start < 0) throw ValidationError("render_prompt: empty target region");
  if (r.target_start == 0)
    throw ValidationError("render_prompt: target region has no preceding context");
  return r;
}

// The bundle the training loop consumes: all three renders of one sample and
// the hotspot token-index sets (absolute indices into the retrieval render,
// within its target region; filled by the span-extraction pass).
struct TokenizedSample {
  FqaSample source;
  Render qa;
  Render retrieval;
  Render fqa;
  std::vector<int> span_ent;
  std::vector<int> span_attn;
};

inline TokenizedSample tokenize_sample(const Tokenizer& tok, const FqaSample& sample,
                                       bool few_shot = false,
                                       const std::vector<FqaSample>& exemplars = {}) {
  TokenizedSample ts;
  ts.source = sample;
  ts.qa = render_prompt(tok, RenderKind::qa, sample, few_shot, exemplars);
  ts.retrieval = render_prompt(tok, RenderKind::retrieval, sample);
  ts.fqa = render_prompt(tok, RenderKind::fqa, sample);
  return ts;
}

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

struct WorldEntity {
  std::string surface;
  std::string type;  // PERSON | CITY | YEAR | ORG
};

struct WorldFact {
  int subject = 0;   // index into entities
  int object = 0;    // index into entities
  int relation = 0;  // index into the template table
  std::string sentence;
  std::string question;
  std::string answer;  // object surface
};

struct WorldOptions {
  double train_fraction = 0.5;          // facts kept for fine-tuning samples
  double corpus_render_fraction = 0.5;  // train facts whose renders join the corpus
  int n_few_shot = 2;
  int mc_false_count = 3;
};

struct World {
  std::string corpus_text;
  std::vector<WorldEntity> entities;
  std::vector<WorldFact> facts;
  std::vector<int> train_fact_ids;
  std::vector<int> eval_fact_ids;
  std::vector<FqaSample> train_samples;
  std::vector<FqaSample> eval_samples;
  std::vector<FqaSample> few_shot_exemplars;
  std::vector<McItem> mc_items;
  std::vector<FactorItem> factor_items;
  Gazetteer gazetteer;
};

namespace detail {

struct RelationTemplate {
  const char* subject_type;
  const char* object_type;
  const char* sentence;  // with {S} and {O} placeholders
  const char* question;  // with {S}
  const char* alt_answer;  // secondary true form with {O}
};

// Sentences sharing a subject diverge at the first token after the subject
// ("was"/"works"/"came", "was"/"has"), so a subject with several facts costs
// exactly one ambiguous continuation per extra fact. Together with unique
// subject first tokens this keeps the fact corpus memorizable: a next-token
// predictor that has seen every sentence can place all but ~2% of tokens.
inline const std::vector<RelationTemplate>& relation_templates() {
  static const std::vector<RelationTemplate> kTemplates = {
      {"PERSON", "CITY", "{S} was born in the city of {O}.", "In which city was {S} born?",
       "In {O}"},
      {"PERSON", "ORG", "{S} works for the large company {O}.", "Which company does {S} work for?",
       "At {O}"},
      {"PERSON", "YEAR", "{S} came into the world in the year {O}.",
       "In which year was {S} born?", "In {O}"},
      {"ORG", "YEAR", "{S} was founded in the year {O}.", "In which year was {S} founded?",
       "In {O}"},
      {"ORG", "CITY", "{S} has its main office in the city of {O}.",
       "In which city is {S} based?", "In {O}"},
  };
  return kTemplates;
}

inline std::string fill(const char* tmpl, const std::string& subject, const std::string& object) {
  std::string out = tmpl;
  auto replace = [&out](const std::string& key, const std::string& val) {
    const auto pos = out.find(key);
    if (pos != std::string::npos) out.replace(pos, key.size(), val);
  };
  replace("{S}", subject);
  replace("{O}", object);
  return out;
}

// Deterministic unique surface pools. Syllable sets are disjoint across types
// so no surface of one type is a word of another. Subject types (PERSON, ORG)
// additionally get a unique first token per entity — the first token is the
// only context a language model has when continuing a fact sentence, so
// sharing it across subjects would make the corpus unlearnable.
inline std::vector<std::string> make_surfaces(Rng& rng, const std::string& type, int count) {
  std::vector<std::string> pool;
  if (type == "PERSON") {
    static const std::vector<std::string> stems = {
        "Ald",  "Bram", "Cor",  "Dex",  "Eli",  "Fenn", "Gil",  "Hann",
        "Ivo",  "Jar",  "Kell", "Len",  "Mil",  "Ness", "Orin", "Petr",
        "Quin", "Rolf", "Sel",  "Tob",  "Ull",  "Vanc", "Wren", "Xim"};
    static const std::vector<std::string> endings = {
        "a",  "ard", "as",  "eth", "ia",  "ic", "ys",  "il",  "ina", "ine", "is",
        "o",  "on",  "ora", "os",  "ra",  "ric", "un",  "us",  "win", "ya",  "yn"};
    static const std::vector<std::string> lasts = {
        "Ashford", "Birchall", "Calloway", "Dunmore",  "Eastvale", "Farrow",
        "Grantley", "Holloway", "Ironside", "Jessop",   "Kincaid",  "Lockhart",
        "Marchant", "Northcote", "Oakhurst", "Pemberton", "Quarry",  "Redfern",
        "Stanhope", "Thorne",   "Underhill", "Vickers",  "Walcott",  "Yardley"};
    std::vector<std::string> firsts;
    std::set<std::string> seen;
    for (const auto& s : stems)
      for (const auto& e : endings)
        if (seen.insert(s + e).second) firsts.push_back(s + e);
    for (const auto& f : firsts) pool.push_back(f + " " + lasts[rng.next_below(lasts.size())]);
  } else if (type == "CITY") {
    static const std::vector<std::string> pre = {
        "Kar",  "Brim", "Vel",  "Nor",  "Ost",  "Quil", "Tarn",
        "Wyn",  "Lum",  "Hesk", "Dorv", "Silb", "Crag", "Fald",
        "Grim", "Pell", "Strath", "Bex", "Colm", "Durn", "Yarl"};
    static const std::vector<std::string> suf = {
        "vale", "holt",    "mora",  "wick",  "stad",  "bury",
        "minster", "haven", "ford",  "gate",  "mere",  "cliff",
        "field", "moor",   "port",  "stead", "combe", "garth"};
    for (const auto& p : pre)
      for (const auto& s : suf) pool.push_back(p + s);
  } else if (type == "ORG") {
    static const std::vector<std::string> pre = {
        "Nova", "Zen",    "Astra", "Hexa", "Omni", "Plex", "Cindra", "Virel",
        "Jun",  "Kobal",  "Myr",   "Tessel", "Ryn", "Galv", "Ebor",  "Quen",
        "Solv", "Brax",   "Ferro", "Lyt",  "Vanta", "Drome", "Skarn", "Ulm"};
    static const std::vector<std::string> suf = {
        "tek",  "dyne", "corp", "sys",  "werks", "labs", "tron", "ix",
        "onics", "max", "ara",  "eon",  "ware",  "forge", "grid", "core",
        "flux", "nex",  "path", "zoom", "cast",  "dock"};
    for (const auto& p : pre)
      for (const auto& s : suf) pool.push_back(p + s);
  } else if (type == "YEAR") {
    for (int y = 1700; y <= 2020; ++y) pool.push_back(std::to_string(y));
  } else {
    throw ValidationError("unknown entity type: " + type);
  }
  if (count > static_cast<int>(pool.size()))
    throw ValidationError("not enough distinct " + type + " surfaces: need " +
                          std::to_string(count) + ", pool has " + std::to_string(pool.size()));
  rng.shuffle(pool);
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

}  // namespace detail

// Generates the synthetic world: typed entities, (subject, relation)-unique
// facts, an out-of-domain split (fine-tuning facts disjoint from evaluation
// facts), QA/MC/FACTOR records, a gazetteer, and the pretraining corpus.
//
// The corpus carries every fact sentence (plain and tagged) so a pretrained
// model can know eval facts it was never fine-tuned on, plus QA/retrieval/FQA
// renders for a seeded fraction of the fine-tuning facts so prompt formats
// are familiar while headroom for faithfulness training remains.
inline World generate_world(std::uint64_t seed, int n_entities, int n_facts,
                            const WorldOptions& opt = {}) {
  if (n_entities < 10)
    throw ValidationError("generate_world: n_entities must be >= 10, got " +
                          std::to_string(n_entities));
  if (n_facts < n_entities)
    throw ValidationError("generate_world: n_facts must be >= n_entities, got " +
                          std::to_string(n_facts) + " < " + std::to_string(n_entities));
  Rng rng(seed);

  World w;
  // Subject-heavy type allocation: facts branch only at their subject, so the
  // more entities serve as subjects (PERSON, ORG), the fewer subjects must
  // carry several facts, and the more predictable the corpus stays. CITY and
  // YEAR entities only ever appear as objects; a small pool suffices for
  // distractor sampling. Every type keeps at least 2 members (same-type
  // distractors must exist); rounding drift lands on PERSON.
  static const std::vector<std::pair<std::string, double>> kShares = {
      {"PERSON", 0.45}, {"ORG", 0.35}, {"CITY", 0.12}, {"YEAR", 0.08}};
  std::map<std::string, int> alloc;
  int assigned = 0;
  for (const auto& [type, share] : kShares) {
    alloc[type] = std::max(2, static_cast<int>(std::floor(share * n_entities)));
    assigned += alloc[type];
  }
  alloc["PERSON"] += n_entities - assigned;
  if (alloc["PERSON"] < 2)
    throw ValidationError("generate_world: n_entities " + std::to_string(n_entities) +
                          " leaves fewer than 2 PERSON entities");
  std::map<std::string, std::vector<int>> by_type;
  for (const auto& [type, share] : kShares) {
    for (const auto& s : detail::make_surfaces(rng, type, alloc[type])) {
      by_type[type].push_back(static_cast<int>(w.entities.size()));
      w.entities.push_back({s, type});
    }
  }
  for (const auto& e : w.entities) w.gazetteer[e.surface] = e.type;

  // Facts are (subject, relation)-unique. Subjects are consumed round-robin:
  // every subject receives one fact before any subject receives a second, so
  // repeat subjects (the only ambiguous continuations in the corpus) appear
  // only once n_facts exceeds the subject count.
  const auto& templates = detail::relation_templates();
  std::vector<int> subjects;
  for (const int s : by_type["PERSON"]) subjects.push_back(s);
  for (const int s : by_type["ORG"]) subjects.push_back(s);
  rng.shuffle(subjects);
  std::vector<std::vector<int>> menu;  // per subject: relation ids, seeded order
  std::size_t n_pairs = 0;
  for (const int s : subjects) {
    std::vector<int> rel;
    for (std::size_t r = 0; r < templates.size(); ++r)
      if (templates[r].subject_type == w.entities[static_cast<std::size_t>(s)].type)
        rel.push_back(static_cast<int>(r));
    rng.shuffle(rel);
    n_pairs += rel.size();
    menu.push_back(std::move(rel));
  }
  if (n_facts > static_cast<int>(n_pairs))
    throw ValidationError("generate_world: only " + std::to_string(n_pairs) +
                          " (subject, relation) pairs available for " + std::to_string(n_facts) +
                          " facts; add entities");
  std::vector<std::pair<int, int>> pairs;  // (subject entity id, relation id)
  for (std::size_t pass = 0; static_cast<int>(pairs.size()) < n_facts; ++pass)
    for (std::size_t i = 0; i < subjects.size(); ++i)
      if (pass < menu[i].size() && static_cast<int>(pairs.size()) < n_facts)
        pairs.emplace_back(subjects[i], menu[i][pass]);

  // Heavy-tailed object popularity: the i-th entity of a type's pool gets
  // weight 1/(i+1), so a few objects are very common and most are rare —
  // like real entity mentions. Distractors are drawn from the same skewed
  // distribution, which is what makes a wrong answer *plausible*: popular
  // entities carry prior mass that competes with the stored fact. A world
  // with uniform objects has no plausible falsehoods, and truthfulness
  // metrics on it measure only prompt-format fit.
  auto popularity_draw = [&](const std::vector<int>& pool, auto&& admit) -> int {
    double total = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (admit(pool[i])) total += 1.0 / static_cast<double>(i + 1);
    if (total == 0.0)
      throw ValidationError("generate_world: no distractor available in a pool of " +
                            std::to_string(pool.size()));
    double r = rng.next_double() * total;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!admit(pool[i])) continue;
      r -= 1.0 / static_cast<double>(i + 1);
      if (r <= 0.0) return pool[i];
    }
    for (std::size_t i = pool.size(); i-- > 0;)  // guard against rounding drift
      if (admit(pool[i])) return pool[i];
    throw ValidationError("generate_world: empty candidate pool");
  };

  for (const auto& [subject, relation] : pairs) {
    const auto& tmpl = templates[static_cast<std::size_t>(relation)];
    const auto& objects = by_type[tmpl.object_type];
    const int object = popularity_draw(objects, [](int) { return true; });
    WorldFact f;
    f.subject = subject;
    f.object = object;
    f.relation = relation;
    f.sentence = detail::fill(tmpl.sentence, w.entities[static_cast<std::size_t>(subject)].surface,
                              w.entities[static_cast<std::size_t>(object)].surface);
    f.question = detail::fill(tmpl.question, w.entities[static_cast<std::size_t>(subject)].surface,
                              "");
    f.answer = w.entities[static_cast<std::size_t>(object)].surface;
    w.facts.push_back(std::move(f));
  }

  // Out-of-domain split: evaluation facts never feed fine-tuning samples.
  std::vector<int> order(w.facts.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const int n_train = std::max(1, static_cast<int>(std::llround(
                                      opt.train_fraction * static_cast<double>(n_facts))));
  w.train_fact_ids.assign(order.begin(), order.begin() + n_train);
  w.eval_fact_ids.assign(order.begin() + n_train, order.end());
  if (w.eval_fact_ids.empty())
    throw ValidationError("generate_world: no facts left for evaluation; lower train_fraction");

  // Distractors are popularity-weighted too: a hallucinated answer is a
  // *plausible* same-type entity, not an arbitrary one.
  auto same_type_distractor = [&](int object) {
    const auto& peers = by_type[w.entities[static_cast<std::size_t>(object)].type];
    if (peers.size() < 2)
      throw ValidationError("generate_world: no distractor available for type " +
                            w.entities[static_cast<std::size_t>(object)].type);
    return popularity_draw(peers, [&](int id) { return id != object; });
  };

  auto to_sample = [&](const WorldFact& f) {
    FqaSample s;
    s.knowledge = f.sentence;
    s.question = f.question;
    s.answer = f.answer;
    s.hallucinated_answer =
        w.entities[static_cast<std::size_t>(same_type_distractor(f.object))].surface;
    s.entities = ner_tag(s.knowledge, w.gazetteer);
    return s;
  };

  for (const int id : w.train_fact_ids)
    w.train_samples.push_back(to_sample(w.facts[static_cast<std::size_t>(id)]));
  for (const int id : w.eval_fact_ids)
    w.eval_samples.push_back(to_sample(w.facts[static_cast<std::size_t>(id)]));
  const int n_shots =
      std::min<int>(opt.n_few_shot, static_cast<int>(w.train_samples.size()));
  w.few_shot_exemplars.assign(w.train_samples.begin(), w.train_samples.begin() + n_shots);

  // MC and FACTOR items from evaluation facts only.
  for (const int id : w.eval_fact_ids) {
    const auto& f = w.facts[static_cast<std::size_t>(id)];
    const auto& tmpl = templates[static_cast<std::size_t>(f.relation)];
    const auto& peers = by_type[tmpl.object_type];
    // Popularity-ordered sampling without replacement.
    std::vector<int> distractors;
    while (static_cast<int>(distractors.size()) <
           std::min<int>(opt.mc_false_count, static_cast<int>(peers.size()) - 1)) {
      distractors.push_back(popularity_draw(peers, [&](int p) {
        return p != f.object &&
               std::find(distractors.begin(), distractors.end(), p) == distractors.end();
      }));
    }
    const int n_false = static_cast<int>(distractors.size());
    if (n_false < 1)
      throw ValidationError("generate_world: no distractor available for type " +
                            std::string(tmpl.object_type));

    McItem mc;
    mc.question = f.question;
    mc.true_answers = {f.answer, detail::fill(tmpl.alt_answer, "", f.answer)};
    for (int i = 0; i < n_false; ++i) {
      const std::string& surface =
          w.entities[static_cast<std::size_t>(distractors[static_cast<std::size_t>(i)])].surface;
      mc.false_answers.push_back(i == 0 ? detail::fill(tmpl.alt_answer, "", surface) : surface);
    }
    mc.best_index = 0;
    w.mc_items.push_back(std::move(mc));

    // Completion split at the answer: prefix is the sentence up to the object
    // surface, completions are object candidates plus the final period.
    const auto cut = f.sentence.rfind(f.answer);
    FactorItem fi;
    fi.prefix = f.sentence.substr(0, cut);
    while (!fi.prefix.empty() && fi.prefix.back() == ' ') fi.prefix.pop_back();
    fi.factual_completion = f.sentence.substr(cut);
    for (int i = 0; i < n_false; ++i)
      fi.nonfactual_completions.push_back(
          w.entities[static_cast<std::size_t>(distractors[static_cast<std::size_t>(i)])].surface +
          ".");
    w.factor_items.push_back(std::move(fi));
  }

  // Pretraining corpus.
  std::vector<std::string> lines;
  for (const auto& f : w.facts) lines.push_back(f.sentence);
  for (const auto& f : w.facts) {
    FqaSample s;
    s.knowledge = f.sentence;
    s.entities = ner_tag(f.sentence, w.gazetteer);
    lines.push_back(insert_tags(s).knowledge);
  }
  std::vector<int> train_order(w.train_samples.size());
  std::iota(train_order.begin(), train_order.end(), 0);
  rng.shuffle(train_order);
  const int n_render =
      static_cast<int>(std::llround(opt.corpus_render_fraction *
                                    static_cast<double>(w.train_samples.size())));
  for (int i = 0; i < n_render; ++i) {
    const auto& s = w.train_samples[static_cast<std::size_t>(train_order[static_cast<std::size_t>(i)])];
    lines.push_back("Q: " + s.question + " A: " + s.answer);
    lines.push_back("Q: " + s.question + " Knowledge: " + s.knowledge);
    lines.push_back("Q: " + s.question + " Knowledge: " + s.knowledge + " A: " + s.answer);
    // Judged QA pairs give truthfulness behavioral consequences inside the
    // toy distribution (as verification and correction text does in natural
    // corpora): predicting the verdict token after the answer forces the
    // answer-position hidden state to encode question/answer consistency,
    // which is what hidden-state probes later read out.
    lines.push_back("Q: " + s.question + " A: " + s.answer + " Yes.");
    lines.push_back("Q: " + s.question + " A: " + *s.hallucinated_answer + " No.");
  }
  rng.shuffle(lines);
  std::string corpus;
  for (const auto& l : lines) {
    corpus += l;
    corpus += '\n';
  }
  w.corpus_text = std::move(corpus);
  return w;
}

// All "[TYPE]" marker tokens the tagged renders can produce.
inline std::vector<std::string> tag_tokens(const Gazetteer& gazetteer) {
  std::set<std::string> types;
  for (const auto& [surface, type] : gazetteer) types.insert(type);
  std::vector<std::string> out;
  for (const auto& t : types) out.push_back("[" + t + "]");
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines ingestion and artifact writing
// ---------------------------------------------------------------------------

template <class T>
struct IngestResult {
  std::vector<T> records;
  std::vector<std::pair<int, std::string>> rejects;  // (1-based line, reason)
};

namespace detail {

inline std::vector<EntitySpan> entities_from_json(const nlohmann::json& j) {
  std::vector<EntitySpan> out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3) throw ValidationError("entity must be [start, end, type]");
    out.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<std::string>()});
  }
  return out;
}

inline nlohmann::json entities_to_json(const std::vector<EntitySpan>& spans) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : spans) arr.push_back({s.char_start, s.char_end, s.type});
  return arr;
}

template <class T, class Parse>
IngestResult<T> ingest_lines(const std::filesystem::path& path, Parse parse) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read file: " + path.string());
  IngestResult<T> result;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      result.records.push_back(parse(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      result.rejects.emplace_back(lineno, e.what());
    }
  }
  return result;
}

}  // namespace detail

inline IngestResult<FqaSample> ingest_fqa(const std::filesystem::path& path) {
  return detail::ingest_lines<FqaSample>(path, [](const nlohmann::json& j) {
    FqaSample s;
    s.knowledge = j.at("knowledge").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("right_answer").get<std::string>();
    if (j.contains("hallucinated_answer"))
      s.hallucinated_answer = j.at("hallucinated_answer").get<std::string>();
    if (s.hallucinated_answer && *s.hallucinated_answer == s.answer)
      throw ValidationError("hallucinated_answer equals right_answer");
    if (j.contains("entities")) s.entities = detail::entities_from_json(j.at("entities"));
    for (const auto& e : s.entities)
      if (e.char_start < 0 || e.char_end > static_cast<int>(s.knowledge.size()) ||
          e.char_start >= e.char_end)
        throw ValidationError("entity span [" + std::to_string(e.char_start) + "," +
                              std::to_string(e.char_end) + ") outside knowledge");
    return s;
  });
}

inline IngestResult<McItem> ingest_mc(const std::filesystem::path& path) {
  return detail::ingest_lines<McItem>(path, [](const nlohmann::json& j) {
    McItem m;
    m.question = j.at("question").get<std::string>();
    m.true_answers = j.at("true_answers").get<std::vector<std::string>>();
    m.false_answers = j.at("false_answers").get<std::vector<std::string>>();
    m.best_index = j.value("best_index", 0);
    if (m.true_answers.empty()) throw ValidationError("true_answers empty");
    if (m.false_answers.empty()) throw ValidationError("false_answers empty");
    if (m.best_index < 0 || m.best_index >= static_cast<int>(m.true_answers.size()))
      throw ValidationError("best_index " + std::to_string(m.best_index) + " out of range");
    for (const auto& t : m.true_answers)
      for (const auto& fa : m.false_answers)
        if (t == fa) throw ValidationError("candidate lists not disjoint: " + t);
    return m;
  });
}

inline IngestResult<FactorItem> ingest_factor(const std::filesystem::path& path) {
  return detail::ingest_lines<FactorItem>(path, [](const nlohmann::json& j) {
    FactorItem f;
    f.prefix = j.at("prefix").get<std::string>();
    f.factual_completion = j.at("factual_completion").get<std::string>();
    f.nonfactual_completions = j.at("nonfactual_completions").get<std::vector<std::string>>();
    if (f.nonfactual_completions.empty()) throw ValidationError("nonfactual_completions empty");
    std::set<std::string> all(f.nonfactual_completions.begin(), f.nonfactual_completions.end());
    all.insert(f.factual_completion);
    if (all.size() != f.nonfactual_completions.size() + 1)
      throw ValidationError("completions not pairwise distinct");
    return f;
  });
}

inline void write_world_artifacts(const std::filesystem::path& dir, const World& w) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "corpus.txt");
    f << w.corpus_text;
  }
  {
    std::ofstream f(dir / "fqa.jsonl");
    for (const auto& s : w.train_samples) {
      nlohmann::json j = {{"knowledge", s.knowledge},
                          {"question", s.question},
                          {"right_answer", s.answer},
                          {"entities", detail::entities_to_json(s.entities)}};
      if (s.hallucinated_answer) j["hallucinated_answer"] = *s.hallucinated_answer;
      f << j.dump() << "\n";
    }
  }
  {
    std::ofstream f(dir / "mc.jsonl");
    for (const auto& m : w.mc_items)
      f << nlohmann::json{{"question", m.question},
                          {"true_answers", m.true_answers},
                          {"false_answers", m.false_answers},
                          {"best_index", m.best_index}}
               .dump()
        << "\n";
  }
  {
    std::ofstream f(dir / "factor.jsonl");
    for (const auto& fi : w.factor_items)
      f << nlohmann::json{{"prefix", fi.prefix},
                          {"factual_completion", fi.factual_completion},
                          {"nonfactual_completions", fi.nonfactual_completions}}
               .dump()
        << "\n";
  }
  {
    std::ofstream f(dir / "gazetteer.json");
    f << nlohmann::json(w.gazetteer).dump(2) << "\n";
  }
}

}  // namespace f2
