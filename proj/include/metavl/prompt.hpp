#pragma once

// Interleaved visual/text prompts with a per-position loss mask, and the two
// layouts built from them: caption prompts for VL training and k-shot VQA
// prompts for evaluation.

#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/tensor.hpp"
#include "metavl/transformer.hpp"
#include "metavl/vocab.hpp"

namespace metavl {

template <class T>
struct VisualSpan {
  std::size_t offset = 0;
  Tensor<T> rows;  // [n, d_model]
};

// positions[j] is the token at position j or -1 inside a visual span.
// loss_mask[j] marks position j as a supervised target.
template <class T>
struct MultimodalPrompt {
  std::vector<VisualSpan<T>> spans;
  TokenSequence text;
  std::vector<std::int32_t> positions;
  std::vector<bool> loss_mask;

  std::size_t total_length() const { return positions.size(); }
  std::size_t visual_span_count() const { return spans.size(); }

  void add_visual(const Tensor<T>& rows) {
    if (rows.rank() != 2) throw ShapeError("visual span must be a matrix");
    spans.push_back({positions.size(), rows});
    positions.insert(positions.end(), rows.rows(), -1);
    loss_mask.insert(loss_mask.end(), rows.rows(), false);
  }

  void add_text(const TokenSequence& ids, bool supervised = false) {
    text.insert(text.end(), ids.begin(), ids.end());
    positions.insert(positions.end(), ids.begin(), ids.end());
    loss_mask.insert(loss_mask.end(), ids.size(), supervised);
  }

  // Spans and text tile [0, total_length) in order, and no visual position is
  // supervised.
  void validate() const {
    if (loss_mask.size() != positions.size()) throw ShapeError("prompt mask length differs from prompt length");
    std::size_t pos = 0, text_i = 0, span_i = 0;
    while (pos < positions.size()) {
      if (span_i < spans.size() && spans[span_i].offset == pos) {
        const auto n = spans[span_i].rows.rows();
        for (std::size_t j = pos; j < pos + n; ++j) {
          if (j >= positions.size() || positions[j] != -1) throw ShapeError("visual span overlaps text");
          if (loss_mask[j]) throw ShapeError("loss mask set at a visual position");
        }
        pos += n;
        ++span_i;
        continue;
      }
      if (positions[pos] < 0 || text_i >= text.size() || text[text_i] != positions[pos]) {
        throw ShapeError("prompt position " + std::to_string(pos) + " is covered by neither span nor text");
      }
      ++pos;
      ++text_i;
    }
    if (span_i != spans.size() || text_i != text.size()) throw ShapeError("prompt spans or text left over");
  }

  // Input rows [total_length, d_model]: span rows in place, token embeddings
  // elsewhere.
  Tensor<T> assemble(const LanguageModel<T>& lm) const {
    std::vector<Tensor<T>> parts;
    std::size_t pos = 0, span_i = 0;
    while (pos < positions.size()) {
      if (span_i < spans.size() && spans[span_i].offset == pos) {
        parts.push_back(spans[span_i].rows);
        pos += spans[span_i].rows.rows();
        ++span_i;
        continue;
      }
      TokenSequence run;
      while (pos < positions.size() && !(span_i < spans.size() && spans[span_i].offset == pos)) {
        run.push_back(positions[pos++]);
      }
      parts.push_back(lm.embed_tokens(run));
    }
    if (parts.empty()) throw ShapeError("empty prompt");
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
  }

  NextTokenTargets targets() const { return shift_targets(positions, loss_mask); }
};

// [n visual][caption][EOS], caption tokens and EOS supervised.
template <class T>
MultimodalPrompt<T> build_caption_prompt(const Vocabulary& vocab, const Tensor<T>& visual,
                                         const std::string& caption_text, std::size_t max_len) {
  MultimodalPrompt<T> p;
  p.add_visual(visual);
  p.add_text(vocab.tokenize(caption_text), true);
  p.add_text({tok::kEos}, true);
  if (p.total_length() > max_len) throw OverlengthError(p.total_length(), max_len, "caption prompt");
  return p;
}

// Negative log-likelihood of the supervised text given everything before it,
// averaged over supervised tokens.
template <class T>
Tensor<T> prompt_loss(const LanguageModel<T>& lm, const MultimodalPrompt<T>& p) {
  const auto t = p.targets();
  return masked_cross_entropy(lm.forward_embeddings(p.assemble(lm)), t.targets, t.mask);
}

inline const std::string& default_induction() {
  static const std::string s = "please answer the question .";
  return s;
}

template <class T>
struct VisualQA {
  Tensor<T> visual;  // prefix rows of the image
  std::string question;
  std::string answer;  // ignored for the query
};

// Length of the k-shot layout without building it.
inline std::size_t icl_prompt_length(std::size_t induction_tokens, std::size_t n_visual,
                                     const std::vector<std::pair<std::size_t, std::size_t>>& shot_qa_tokens,
                                     std::size_t query_tokens) {
  std::size_t total = induction_tokens;
  for (const auto& [q, a] : shot_qa_tokens) total += n_visual + q + a + 3;
  return total + n_visual + query_tokens + 2;
}

// induction, then per shot [visual][<q> question][<a> answer <sep>], then
// [visual][<q> question][<a>]. No position is supervised. `headroom` tokens
// must remain free for generation; on overflow the error names the largest k
// that fits.
template <class T>
MultimodalPrompt<T> build_icl_prompt(const Vocabulary& vocab, const std::string& induction,
                                     const std::vector<VisualQA<T>>& shots, const VisualQA<T>& query,
                                     std::size_t max_len, std::size_t headroom) {
  const auto ind = vocab.tokenize(induction);
  const auto qtok = vocab.tokenize(query.question);
  std::vector<std::pair<std::size_t, std::size_t>> lens;
  for (const auto& s : shots) lens.emplace_back(vocab.tokenize(s.question).size(), vocab.tokenize(s.answer).size());
  const auto n = query.visual.rows();
  const auto need = icl_prompt_length(ind.size(), n, lens, qtok.size()) + headroom;
  if (need > max_len) {
    std::size_t feasible = 0;
    for (std::size_t k = 0; k <= lens.size(); ++k) {
      std::vector<std::pair<std::size_t, std::size_t>> head(lens.begin(), lens.begin() + std::ptrdiff_t(k));
      if (icl_prompt_length(ind.size(), n, head, qtok.size()) + headroom <= max_len) feasible = k;
    }
    throw OverlengthError(need, max_len,
                          "k=" + std::to_string(shots.size()) + " prompt (max feasible k is " +
                              std::to_string(feasible) + ")");
  }
  MultimodalPrompt<T> p;
  p.add_text(ind);
  for (const auto& s : shots) {
    p.add_visual(s.visual);
    p.add_text({tok::kQuestion});
    p.add_text(vocab.tokenize(s.question));
    p.add_text({tok::kAnswer});
    p.add_text(vocab.tokenize(s.answer));
    p.add_text({tok::kSep});
  }
  p.add_visual(query.visual);
  p.add_text({tok::kQuestion});
  p.add_text(qtok);
  p.add_text({tok::kAnswer});
  return p;
}

}  // namespace metavl
