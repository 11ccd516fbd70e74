#pragma once

// k-shot visual question answering: prompt assembly, greedy answers,
// exact-then-cosine answer matching and accuracy over a test pool.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "metavl/decode.hpp"
#include "metavl/errors.hpp"
#include "metavl/prompt.hpp"
#include "metavl/rng.hpp"
#include "metavl/scene.hpp"
#include "metavl/transformer.hpp"
#include "metavl/visual.hpp"

namespace metavl {

inline constexpr std::size_t kMaxAnswerTokens = 6;
inline constexpr TokenId kAnswerStops[] = {tok::kSep, tok::kEos};

struct ICLQuery {
  std::vector<QAItem> shots;
  QAItem query;
  std::string induction = default_induction();
};

// Shot indices into a train pool of size n. A partial Fisher-Yates shuffle
// from a per-item stream, so the first k shots are the same for every
// larger k.
inline std::vector<std::size_t> sample_shot_ids(std::size_t pool_size, std::size_t k, std::uint64_t seed,
                                                QADataset ds, std::size_t item_id) {
  if (k > pool_size) throw ConfigError("k exceeds the train pool size");
  Rng rng = make_rng(seed, tag("shots"), static_cast<std::uint64_t>(ds), item_id);
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = std::size_t(uniform_int(rng, std::int64_t(i), std::int64_t(pool_size) - 1));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Text -> embedding. Must accept "<eos>".
using TextEmbedder = std::function<std::vector<double>(const std::string&)>;

template <class T>
TextEmbedder lm_embedder(const LanguageModel<T>& lm, const Vocabulary& vocab) {
  return [&lm, &vocab](const std::string& text) {
    auto e = lm.embed_text(vocab, text);
    return std::vector<double>(e.begin(), e.end());
  };
}

// Unique answers in lexicographic order with their embeddings. Rebuild it
// whenever the embedder's weights change.
struct CandidateAnswerSet {
  std::vector<std::string> answers;
  std::vector<std::vector<double>> embeddings;

  CandidateAnswerSet() = default;
  CandidateAnswerSet(std::vector<std::string> raw, const TextEmbedder& embed) {
    std::set<std::string> uniq;
    for (auto& a : raw) uniq.insert(normalize_text(a));
    answers.assign(uniq.begin(), uniq.end());
    for (const auto& a : answers) embeddings.push_back(embed(a));
  }
};

struct MatchResult {
  std::string answer;
  bool exact = false;
  double similarity = 1.0;
};

// Exact match on the normalized generation first; otherwise the candidate
// with the highest cosine similarity, ties to the lexicographically smallest.
// An empty generation is embedded as the EOS token.
inline MatchResult match_answer(const std::string& generated, const CandidateAnswerSet& cands,
                                const TextEmbedder& embed) {
  if (cands.answers.empty()) throw ConfigError("candidate answer set is empty");
  const auto g = normalize_text(generated);
  if (std::binary_search(cands.answers.begin(), cands.answers.end(), g)) return {g, true, 1.0};
  const auto e = embed(g.empty() ? std::string("<eos>") : g);
  std::size_t best = 0;
  double best_sim = cosine(e, cands.embeddings[0]);
  for (std::size_t i = 1; i < cands.answers.size(); ++i) {
    const double s = cosine(e, cands.embeddings[i]);
    if (s > best_sim) {
      best = i;
      best_sim = s;
    }
  }
  return {cands.answers[best], false, best_sim};
}

// Anything that can open a decode session for a query.
template <class M>
concept AnswerModel = requires(const M& m, const ICLQuery& q) {
  { m.vocabulary() } -> std::convertible_to<const Vocabulary&>;
  { m.open_session(q) } -> DecodeSession;
};

template <AnswerModel M>
std::string predict_answer(const M& model, const ICLQuery& q) {
  auto session = model.open_session(q);
  const auto ids = greedy_rollout(session, kMaxAnswerTokens, kAnswerStops);
  return normalize_text(model.vocabulary().detokenize(ids));
}

// LM plus visual frontend. Visual prefix rows are cached per scene; call
// warm() before sharing the model across threads.
template <class T>
class VisualLanguageModel {
 public:
  VisualLanguageModel(const LanguageModel<T>& lm, const VisualFrontend<T>& fe, const Vocabulary& vocab)
      : lm_(lm), fe_(fe), vocab_(vocab) {}

  const Vocabulary& vocabulary() const { return vocab_; }
  const LanguageModel<T>& lm() const { return lm_; }

  void warm(const std::vector<QAItem>& items) {
    for (const auto& it : items) visual(it.scene);
  }

  const Tensor<T>& visual(const SceneSpec& scene) const {
    const auto key = scene.key();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    NoGradGuard ng;
    return cache_.emplace(key, fe_(render(scene))).first->second;
  }

  MultimodalPrompt<T> prompt(const ICLQuery& q) const {
    std::vector<VisualQA<T>> shots;
    for (const auto& s : q.shots) shots.push_back({visual(s.scene), s.question, s.answer});
    VisualQA<T> query{visual(q.query.scene), q.query.question, ""};
    return build_icl_prompt(vocab_, q.induction, shots, query, lm_.config().max_seq_len, kMaxAnswerTokens);
  }

  LMSession<T> open_session(const ICLQuery& q) const {
    NoGradGuard ng;
    return LMSession<T>(lm_, prompt(q).assemble(lm_));
  }

 private:
  const LanguageModel<T>& lm_;
  const VisualFrontend<T>& fe_;
  const Vocabulary& vocab_;
  mutable std::map<std::string, Tensor<T>> cache_;
};

struct EvalRecord {
  std::size_t query_id = 0;
  std::size_t k = 0;
  std::vector<std::size_t> shot_ids;
  std::string generation;
  std::string matched;
  std::string gold;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<EvalRecord> records;
};

inline ICLQuery make_icl_query(const QAPools& pools, QADataset ds, std::size_t k, std::size_t test_index,
                               std::uint64_t seed, std::vector<std::size_t>* shot_ids = nullptr) {
  ICLQuery q;
  q.query = pools.test.at(test_index);
  const auto ids = sample_shot_ids(pools.train.size(), k, seed, ds, q.query.id);
  for (auto i : ids) q.shots.push_back(pools.train[i]);
  if (shot_ids) *shot_ids = ids;
  return q;
}

// Items are independent; with threads > 1 they are split into contiguous
// chunks and written to fixed slots, so results do not depend on scheduling.
template <AnswerModel M>
EvalResult evaluate(const M& model, const QAPools& pools, QADataset ds, std::size_t k, std::size_t n_eval,
                    std::uint64_t seed, const CandidateAnswerSet& cands, const TextEmbedder& embed,
                    std::size_t threads = 1) {
  if (n_eval > pools.test.size()) {
    throw ConfigError("n_eval " + std::to_string(n_eval) + " exceeds test pool of " +
                      std::to_string(pools.test.size()));
  }
  EvalResult res;
  res.records.resize(n_eval);
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      auto& rec = res.records[i];
      auto q = make_icl_query(pools, ds, k, i, seed, &rec.shot_ids);
      rec.query_id = q.query.id;
      rec.k = k;
      rec.gold = q.query.answer;
      rec.generation = predict_answer(model, q);
      rec.matched = match_answer(rec.generation, cands, embed).answer;
      rec.correct = rec.matched == rec.gold;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n_eval));
  if (threads == 1) {
    run(0, n_eval);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const auto chunk = (n_eval + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          run(std::min(n_eval, t * chunk), std::min(n_eval, (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::size_t hits = 0;
  for (const auto& r : res.records) hits += r.correct;
  res.accuracy = n_eval ? double(hits) / double(n_eval) : 0.0;
  return res;
}

}  // namespace metavl
