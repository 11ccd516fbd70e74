#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metavl/errors.hpp"

namespace metavl {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

namespace tok {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kQuestion = 3;
inline constexpr TokenId kAnswer = 4;
inline constexpr TokenId kNumSpecial = 5;
}  // namespace tok

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{"<pad>", "<eos>", "<sep>", "<q>", "<a>"};
  return s;
}

// Lowercases and collapses whitespace runs to single spaces.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{normalize_text(text)};
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

// Closed word-level vocabulary. Special tokens occupy ids 0..4; the table is
// immutable after construction.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words) {
    const auto& sp = special_tokens();
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (i >= words.size() || words[i] != sp[i]) {
        throw ConfigError("vocabulary must start with the special tokens <pad> <eos> <sep> <q> <a>");
      }
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (words[i].empty() || words[i].find_first_of(" \t\n\r") != std::string::npos) {
        throw ConfigError("invalid vocabulary entry at line " + std::to_string(i + 1));
      }
      if (i >= sp.size() && normalize_text(words[i]) != words[i]) {
        throw ConfigError("vocabulary word '" + words[i] + "' is not lowercase");
      }
      if (!ids_.emplace(words[i], static_cast<TokenId>(i)).second) {
        throw ConfigError("duplicate vocabulary entry '" + words[i] + "'");
      }
    }
    words_ = std::move(words);
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  bool contains(std::string_view w) const { return ids_.count(std::string(w)) > 0; }

  TokenId id(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    if (it == ids_.end()) throw VocabularyError(std::string(w));
    return it->second;
  }

  const std::string& word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw VocabularyError("<id " + std::to_string(id) + ">");
    }
    return words_[static_cast<std::size_t>(id)];
  }

  TokenSequence tokenize(std::string_view text) const {
    TokenSequence ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  std::string detokenize(const TokenSequence& ids) const {
    std::string out;
    for (auto i : ids) {
      if (!out.empty()) out += ' ';
      out += word(i);
    }
    return out;
  }

  // Plain list, one token per line, in id order.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocabulary file " + path.string());
    for (const auto& w : words_) out << w << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read vocabulary file " + path.string());
    std::vector<std::string> words;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) words.push_back(line);
    }
    return Vocabulary(std::move(words));
  }

  std::string fingerprint() const {
    std::string s = "vocab:" + std::to_string(words_.size()) + ":";
    for (const auto& w : words_) s += w + ",";
    return s;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

namespace lexicon {

inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow"};
  return v;
}
inline const std::vector<std::string>& shapes() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}
inline const std::vector<std::string>& shape_plurals() {
  static const std::vector<std::string> v{"circles", "squares", "triangles"};
  return v;
}
inline const std::vector<std::string>& number_words() {
  static const std::vector<std::string> v{"zero", "one", "two", "three", "four",
                                          "five", "six", "seven", "eight", "nine"};
  return v;
}
inline const std::vector<std::string>& digits() {
  static const std::vector<std::string> v{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
  return v;
}
inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> v{"animal", "food", "tool", "place"};
  return v;
}
// Keywords per class, aligned with class_names().
inline const std::vector<std::vector<std::string>>& class_keywords() {
  static const std::vector<std::vector<std::string>> v{
      {"cat", "dog", "bird", "fish", "horse"},
      {"apple", "bread", "rice", "cake", "soup"},
      {"hammer", "saw", "drill", "knife", "rope"},
      {"city", "farm", "beach", "park", "school"}};
  return v;
}
inline const std::vector<std::string>& fillers() {
  static const std::vector<std::string> v{"i", "see", "like", "want", "my", "this",
                                          "here", "there", "we", "have", "it", "was"};
  return v;
}
inline const std::vector<std::pair<std::string, std::string>>& antonyms() {
  static const std::vector<std::pair<std::string, std::string>> v{
      {"big", "small"}, {"hot", "cold"},  {"up", "down"},      {"fast", "slow"},
      {"old", "new"},   {"good", "bad"},  {"open", "closed"},  {"light", "dark"},
      {"happy", "sad"}, {"wet", "dry"}};
  return v;
}
inline const std::vector<std::string>& function_words() {
  static const std::vector<std::string> v{
      ".",     "?",     "a",       "and",   "what",  "color",  "is",    "the",    "how",
      "many",  "left",  "of",      "nothing", "please", "answer", "question", "x", "copy",
      "words", "reverse", "give",  "last",  "word",  "sum",    "digits", "mod",  "count",
      "odd",   "even",  "opposite", "map",  "each",  "to",     "shape", "classify", "keyword", "or"};
  return v;
}

}  // namespace lexicon

inline Vocabulary builtin_vocabulary() {
  std::vector<std::string> words = special_tokens();
  auto add = [&](const std::vector<std::string>& v) {
    for (const auto& w : v)
      if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  };
  add(lexicon::function_words());
  add(lexicon::colors());
  add(lexicon::shapes());
  add(lexicon::shape_plurals());
  add(lexicon::number_words());
  add(lexicon::digits());
  add(lexicon::class_names());
  for (const auto& ks : lexicon::class_keywords()) add(ks);
  add(lexicon::fillers());
  for (const auto& [a, b] : lexicon::antonyms()) add({a, b});
  return Vocabulary(std::move(words));
}

}  // namespace metavl
