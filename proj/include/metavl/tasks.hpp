#pragma once

// Synthetic text task suite and episode serialization for meta-training.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/rng.hpp"
#include "metavl/vocab.hpp"

namespace metavl {

struct TextPair {
  std::string x;
  std::string y;
  bool operator==(const TextPair&) const = default;
};

// A family of (x, y) pairs. generate(episode_key, item_seed) is deterministic;
// families whose mapping is resampled per episode (e.g. color -> shape) derive
// it from episode_key, the rest ignore it. answer_space lists the words y is
// built from.
struct TextTaskFamily {
  std::string id;
  std::string instruction;
  std::vector<std::string> answer_space;
  std::function<TextPair(std::uint64_t episode_key, std::uint64_t item_seed)> generate;
};

struct Episode {
  std::string task_id;
  std::vector<TextPair> supports;
  TextPair query;
  std::size_t k = 0;
};

struct TaskSuite {
  std::vector<TextTaskFamily> families;
  std::vector<std::string> meta_train;
  std::vector<std::string> held_out;

  const TextTaskFamily& family(const std::string& id) const {
    for (const auto& f : families)
      if (f.id == id) return f;
    throw ConfigError("unknown task family '" + id + "'");
  }
};

namespace detail {

template <class V>
const auto& pick(const V& v, Rng& rng) {
  return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(v.size()) - 1))];
}

inline std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

inline std::vector<std::string> content_words() {
  std::vector<std::string> v{"a", "and"};
  for (const auto* list : {&lexicon::colors(), &lexicon::shapes(), &lexicon::fillers()})
    v.insert(v.end(), list->begin(), list->end());
  for (const auto& ks : lexicon::class_keywords()) v.insert(v.end(), ks.begin(), ks.end());
  return v;
}

inline std::vector<std::string> random_words(Rng& rng, const std::vector<std::string>& pool, int lo, int hi) {
  const auto n = uniform_int(rng, lo, hi);
  std::vector<std::string> w;
  for (std::int64_t i = 0; i < n; ++i) w.push_back(pick(pool, rng));
  return w;
}

}  // namespace detail

inline TextPair reverse_pair(const std::string& x) {
  auto w = split_words(x);
  std::reverse(w.begin(), w.end());
  return {x, detail::join(w)};
}

inline std::string parity_label(const std::string& x) {
  return split_words(x).size() % 2 ? "odd" : "even";
}

inline std::string mod_sum_label(const std::string& x, int modulus) {
  int s = 0;
  for (const auto& w : split_words(x)) s += std::stoi(w);
  return std::to_string(s % modulus);
}

// The color -> shape assignment used by an episode of the color_shape family.
inline std::vector<std::string> color_shape_mapping(std::uint64_t episode_key) {
  Rng rng(derive_seed(episode_key, tag("color-shape")));
  std::vector<std::string> m;
  for (std::size_t i = 0; i < lexicon::colors().size(); ++i) m.push_back(detail::pick(lexicon::shapes(), rng));
  return m;
}

inline std::vector<TextTaskFamily> builtin_families() {
  using detail::join;
  using detail::pick;
  std::vector<TextTaskFamily> out;
  const auto pool = detail::content_words();

  out.push_back({"keyword_class", "classify the keyword .", lexicon::class_names(),
                 [](std::uint64_t, std::uint64_t seed) {
                   Rng rng(seed);
                   const auto cls = static_cast<std::size_t>(uniform_int(rng, 0, 3));
                   auto words = detail::random_words(rng, lexicon::fillers(), 1, 3);
                   const auto pos = static_cast<std::size_t>(
                       uniform_int(rng, 0, static_cast<std::int64_t>(words.size())));
                   words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos),
                                pick(lexicon::class_keywords()[cls], rng));
                   return TextPair{join(words), lexicon::class_names()[cls]};
                 }});
  out.push_back({"copy", "copy the words .", pool, [pool](std::uint64_t, std::uint64_t seed) {
                   Rng rng(seed);
                   auto x = join(detail::random_words(rng, pool, 1, 4));
                   return TextPair{x, x};
                 }});
  out.push_back({"reverse", "reverse the words .", pool, [pool](std::uint64_t, std::uint64_t seed) {
                   Rng rng(seed);
                   return reverse_pair(join(detail::random_words(rng, pool, 2, 4)));
                 }});
  out.push_back({"last_word", "give the last word .", pool, [pool](std::uint64_t, std::uint64_t seed) {
                   Rng rng(seed);
                   auto w = detail::random_words(rng, pool, 2, 5);
                   return TextPair{join(w), w.back()};
                 }});
  {
    std::vector<std::string> residues(lexicon::digits().begin(), lexicon::digits().begin() + 5);
    out.push_back({"mod_sum", "sum the digits mod five .", residues, [](std::uint64_t, std::uint64_t seed) {
                     Rng rng(seed);
                     auto x = join(detail::random_words(rng, lexicon::digits(), 2, 3));
                     return TextPair{x, mod_sum_label(x, 5)};
                   }});
  }
  out.push_back({"color_shape", "map each color to a shape .", lexicon::shapes(),
                 [](std::uint64_t key, std::uint64_t seed) {
                   Rng rng(seed);
                   const auto mapping = color_shape_mapping(key);
                   const auto n = uniform_int(rng, 1, 2);
                   std::vector<std::string> xs, ys;
                   for (std::int64_t i = 0; i < n; ++i) {
                     const auto c = static_cast<std::size_t>(uniform_int(rng, 0, 3));
                     xs.push_back(lexicon::colors()[c]);
                     ys.push_back(mapping[c]);
                   }
                   return TextPair{join(xs), join(ys)};
                 }});
  {
    std::vector<std::string> parity_pool = lexicon::fillers();
    parity_pool.push_back("x");
    out.push_back({"parity", "is the word count odd or even .", {"even", "odd"},
                   [parity_pool](std::uint64_t, std::uint64_t seed) {
                     Rng rng(seed);
                     auto x = join(detail::random_words(rng, parity_pool, 1, 6));
                     return TextPair{x, parity_label(x)};
                   }});
  }
  {
    std::vector<std::string> space;
    for (const auto& [a, b] : lexicon::antonyms()) {
      space.push_back(a);
      space.push_back(b);
    }
    out.push_back({"antonym", "give the opposite .", space, [](std::uint64_t, std::uint64_t seed) {
                     Rng rng(seed);
                     const auto& [a, b] = pick(lexicon::antonyms(), rng);
                     return uniform_int(rng, 0, 1) ? TextPair{a, b} : TextPair{b, a};
                   }});
  }
  return out;
}

inline TaskSuite builtin_task_suite() {
  TaskSuite s;
  s.families = builtin_families();
  s.meta_train = {"keyword_class", "copy", "reverse", "last_word", "mod_sum", "color_shape"};
  s.held_out = {"parity", "antonym"};
  return s;
}

// k supports plus one query with pairwise distinct inputs.
inline Episode sample_episode(const TextTaskFamily& family, std::size_t k, Rng& rng) {
  Episode ep;
  ep.task_id = family.id;
  ep.k = k;
  const std::uint64_t key = rng();
  std::vector<TextPair> pairs;
  std::set<std::string> inputs;
  const std::size_t max_attempts = 64 * (k + 1);
  for (std::size_t attempt = 0; attempt < max_attempts && pairs.size() < k + 1; ++attempt) {
    auto p = family.generate(key, rng());
    if (inputs.insert(p.x).second) pairs.push_back(std::move(p));
  }
  if (pairs.size() < k + 1) {
    throw Error("task family '" + family.id + "' could not produce " + std::to_string(k + 1) +
                " distinct inputs");
  }
  ep.query = pairs.back();
  pairs.pop_back();
  ep.supports = std::move(pairs);
  return ep;
}

// Token sequence plus a per-position flag marking supervised target tokens.
struct MaskedSequence {
  TokenSequence tokens;
  std::vector<bool> supervised;
};

// instruction, then "<q> x_i <a> y_i <sep>" per support, then
// "<q> x <a> y <eos>" for the query. Only the query label and EOS are
// supervised.
inline MaskedSequence build_meta_prompt(const Vocabulary& vocab, const Episode& ep,
                                        const std::string& instruction, std::size_t max_len) {
  MaskedSequence out;
  auto append = [&](const TokenSequence& ids, bool sup) {
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
    out.supervised.insert(out.supervised.end(), ids.size(), sup);
  };
  append(vocab.tokenize(instruction), false);
  for (const auto& p : ep.supports) {
    append({tok::kQuestion}, false);
    append(vocab.tokenize(p.x), false);
    append({tok::kAnswer}, false);
    append(vocab.tokenize(p.y), false);
    append({tok::kSep}, false);
  }
  append({tok::kQuestion}, false);
  append(vocab.tokenize(ep.query.x), false);
  append({tok::kAnswer}, false);
  append(vocab.tokenize(ep.query.y), true);
  append({tok::kEos}, true);
  if (out.tokens.size() > max_len) throw OverlengthError(out.tokens.size(), max_len, "meta prompt");
  return out;
}

// Plain "x_1 y_1 x_2 y_2 ... <eos>" with every position supervised.
inline MaskedSequence build_plain_sequence(const Vocabulary& vocab, const Episode& ep, std::size_t max_len) {
  MaskedSequence out;
  auto append = [&](const std::string& s) {
    auto ids = vocab.tokenize(s);
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
  };
  for (const auto& p : ep.supports) {
    append(p.x);
    append(p.y);
  }
  append(ep.query.x);
  append(ep.query.y);
  out.tokens.push_back(tok::kEos);
  if (out.tokens.size() > max_len) throw OverlengthError(out.tokens.size(), max_len, "plain sequence");
  out.supervised.assign(out.tokens.size(), true);
  for (std::size_t i = 0; i < out.tokens.size(); ++i)
    if (out.tokens[i] == tok::kPad) out.supervised[i] = false;
  return out;
}

}  // namespace metavl
