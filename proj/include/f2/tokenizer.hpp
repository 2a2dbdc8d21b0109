#pragma once

// Word-level tokenizer over whitespace-plus-punctuation text. Bracketed
// uppercase markers like "[PERSON]" are kept as single tokens so inserted
// entity-type tags act as one-token in-context cues. Character offsets are
// tracked so char-level entity annotations can be projected onto token
// indices.

#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "f2/common.hpp"
#include "json.hpp"

namespace f2 {

struct RawToken {
  std::string text;
  int char_start = 0;  // [char_start, char_end) into the source text
  int char_end = 0;
};

// Splits text into words ([A-Za-z0-9']+ runs), bracketed uppercase tags
// ("[TYPE]"), and single punctuation characters. Whitespace only separates.
inline std::vector<RawToken> split_text(const std::string& text) {
  std::vector<RawToken> out;
  const int n = static_cast<int>(text.size());
  auto is_word = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '\'';
  };
  int i = 0;
  while (i < n) {
    if (std::isspace(static_cast<unsigned char>(text[static_cast<std::size_t>(i)]))) {
      ++i;
      continue;
    }
    const int start = i;
    if (text[static_cast<std::size_t>(i)] == '[') {
      int j = i + 1;
      while (j < n && std::isupper(static_cast<unsigned char>(text[static_cast<std::size_t>(j)]))) ++j;
      if (j > i + 1 && j < n && text[static_cast<std::size_t>(j)] == ']') {
        out.push_back({text.substr(static_cast<std::size_t>(start),
                                   static_cast<std::size_t>(j + 1 - start)),
                       start, j + 1});
        i = j + 1;
        continue;
      }
    }
    if (is_word(text[static_cast<std::size_t>(i)])) {
      int j = i;
      while (j < n && is_word(text[static_cast<std::size_t>(j)])) ++j;
      out.push_back({text.substr(static_cast<std::size_t>(start),
                                 static_cast<std::size_t>(j - start)),
                     start, j});
      i = j;
    } else {
      out.push_back({std::string(1, text[static_cast<std::size_t>(i)]), i, i + 1});
      ++i;
    }
  }
  return out;
}

class Tokenizer {
 public:
  static constexpr int kUnkId = 0;
  static constexpr int kBosId = 1;

  Tokenizer() {
    add("<unk>");
    add("<bos>");
  }

  // Builds the vocabulary from a corpus (tokens in first-appearance order)
  // plus any extra tokens that must exist even if absent from the corpus.
  static Tokenizer build(const std::string& corpus,
                         const std::vector<std::string>& extra_tokens = {}) {
    Tokenizer tok;
    for (const auto& t : split_text(corpus)) tok.add(t.text);
    for (const auto& t : extra_tokens) tok.add(t);
    return tok;
  }

  int vocab_size() const { return static_cast<int>(id_to_str_.size()); }

  int lookup(const std::string& s) const {
    auto it = str_to_id_.find(s);
    return it == str_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& token_text(int id) const {
    if (id < 0 || id >= vocab_size())
      throw ValidationError("token id " + std::to_string(id) + " out of range for vocab of " +
                            std::to_string(vocab_size()));
    return id_to_str_[static_cast<std::size_t>(id)];
  }

  struct Encoded {
    std::vector<int> ids;
    std::vector<RawToken> raw;  // aligned with ids; carries char offsets
  };

  // cutoff < 0 means no truncation.
  Encoded encode_with_offsets(const std::string& text, int cutoff = -1) const {
    Encoded enc;
    enc.raw = split_text(text);
    if (cutoff >= 0 && static_cast<int>(enc.raw.size()) > cutoff)
      enc.raw.resize(static_cast<std::size_t>(cutoff));
    enc.ids.reserve(enc.raw.size());
    for (const auto& t : enc.raw) enc.ids.push_back(lookup(t.text));
    return enc;
  }

  std::vector<int> encode(const std::string& text, int cutoff = -1) const {
    return encode_with_offsets(text, cutoff).ids;
  }

  // Joins token texts with single spaces: equal to the source text after
  // whitespace normalization.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i > 0) out += ' ';
      out += token_text(ids[i]);
    }
    return out;
  }

  nlohmann::json to_json() const {
    return {{"tokens", id_to_str_}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < 2 || tokens[0] != "<unk>" || tokens[1] != "<bos>")
      throw ValidationError("vocab file must start with <unk>, <bos>");
    Tokenizer tok;
    for (std::size_t i = 2; i < tokens.size(); ++i) tok.add(tokens[i]);
    return tok;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ValidationError("cannot write vocab file: " + path);
    f << to_json().dump(2) << "\n";
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot read vocab file: " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
  }

 private:
  void add(const std::string& s) {
    if (str_to_id_.count(s)) return;
    str_to_id_.emplace(s, vocab_size());
    id_to_str_.push_back(s);
  }

  std::map<std::string, int> str_to_id_;
  std::vector<std::string> id_to_str_;
};

// Whitespace normalization used by the round-trip contract: tokens joined by
// single spaces.
inline std::string normalize_whitespace(const std::string& text) {
  std::string out;
  for (const auto& t : split_text(text)) {
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

}  // namespace f2
