#pragma once

#include <algorithm>
#include <concepts>
#include <optional>
#include <span>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/tensor.hpp"
#include "metavl/transformer.hpp"
#include "metavl/vocab.hpp"

namespace metavl {

// Incremental decoding state: start() consumes the prompt and returns logits
// for the next position; feed() appends one token and returns the next logits.
template <class S>
concept DecodeSession = requires(S s, TokenId t) {
  { s.start() } -> std::convertible_to<std::vector<double>>;
  { s.feed(t) } -> std::convertible_to<std::vector<double>>;
};

inline TokenId argmax_lowest(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("argmax over empty logits");
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Appends the argmax token (ties to the lowest id) until a stop token or
// max_new tokens. Stop tokens are not included in the result.
template <DecodeSession S>
TokenSequence greedy_rollout(S& session, std::size_t max_new, std::span<const TokenId> stops) {
  TokenSequence out;
  if (max_new == 0) return out;
  auto logits = session.start();
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = argmax_lowest(logits);
    if (std::find(stops.begin(), stops.end(), next) != stops.end()) break;
    out.push_back(next);
    if (i + 1 < max_new) logits = session.feed(next);
  }
  return out;
}

// Session over a LanguageModel using a key/value cache.
template <class T>
class LMSession {
 public:
  LMSession(const LanguageModel<T>& model, Tensor<T> prompt_rows)
      : model_(model), prompt_(std::move(prompt_rows)) {}

  std::vector<double> start() {
    NoGradGuard ng;
    cache_ = KVCache<T>{};
    return last_row(model_.forward_embeddings(prompt_, &cache_));
  }

  std::vector<double> feed(TokenId t) {
    NoGradGuard ng;
    return last_row(model_.forward_embeddings(model_.embed_tokens(TokenSequence{t}), &cache_));
  }

 private:
  static std::vector<double> last_row(const Tensor<T>& logits) {
    const auto v = logits.cols();
    const auto* row = logits.data().data() + (logits.rows() - 1) * v;
    return std::vector<double>(row, row + v);
  }

  const LanguageModel<T>& model_;
  Tensor<T> prompt_;
  KVCache<T> cache_;
};

// Input rows for an optional embedding prefix followed by prompt tokens.
template <class T>
Tensor<T> assemble_inputs(const LanguageModel<T>& model, const std::optional<Tensor<T>>& prefix,
                          const TokenSequence& tokens) {
  std::vector<Tensor<T>> parts;
  if (prefix) parts.push_back(prefix->detach());
  if (!tokens.empty()) parts.push_back(model.embed_tokens(tokens));
  if (parts.empty()) throw ShapeError("decode needs a non-empty prompt");
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

template <class T>
TokenSequence greedy_decode(const LanguageModel<T>& model, const std::optional<Tensor<T>>& prefix,
                            const TokenSequence& prompt, std::size_t max_new,
                            std::span<const TokenId> stops = std::span<const TokenId>()) {
  NoGradGuard ng;
  const std::size_t n = (prefix ? prefix->rows() : 0) + prompt.size();
  const auto ctx = model.config().max_seq_len;
  if (n + max_new > ctx) throw OverlengthError(n + max_new, ctx, "prompt plus generation");
  static constexpr TokenId kDefaultStops[] = {tok::kEos};
  if (stops.empty()) stops = kDefaultStops;
  LMSession<T> session(model, assemble_inputs(model, prefix, prompt));
  return greedy_rollout(session, max_new, stops);
}

}  // namespace metavl
