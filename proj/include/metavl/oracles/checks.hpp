#pragma once

// Self-contained oracle checks shared by `metavl selftest` and the acceptance
// binary. Each returns a pass flag and a one-line detail.

#include <chrono>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "metavl/harness.hpp"
#include "metavl/oracles/gradcheck.hpp"
#include "metavl/oracles/random_graph.hpp"
#include "metavl/prompt.hpp"
#include "metavl/tasks.hpp"
#include "metavl/training.hpp"

namespace metavl::oracles {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// Rows of a logits gradient with any nonzero entry.
inline std::vector<bool> nonzero_rows(const Tensor<double>& logits) {
  std::vector<bool> out(logits.rows(), false);
  const auto v = logits.cols();
  const auto g = logits.grad();
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t c = 0; c < v; ++c)
      if (g[r * v + c] != 0.0) out[r] = true;
  return out;
}

inline LMConfig tiny_lm(std::size_t vocab) {
  LMConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 64;
  c.vocab_size = vocab;
  return c;
}

template <class T>
void jitter(LanguageModel<T>& lm, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& [name, t] : lm.parameters())
    for (auto& v : t.mutable_data()) v += T(normal(rng) * scale);
}

}  // namespace detail

// Autodiff against central differences on random graphs covering every op.
inline CheckResult check_gradients(std::size_t graphs = 120, std::uint64_t seed = 2024) {
  return detail::timed("gradient correctness", [&](CheckResult& r) {
    Rng rng(seed);
    double worst = 0.0;
    std::size_t checked = 0;
    std::set<std::string> covered;
    for (std::size_t g = 0; g < graphs; ++g) {
      auto graph = random_graph(rng, g);
      covered.insert(graph.ops.begin(), graph.ops.end());
      auto res = grad_check(graph.leaves, graph.build);
      worst = std::max(worst, res.max_rel_error);
      checked += res.checked;
    }
    const bool all_ops = covered.size() == oracles::all_ops().size();
    r.pass = worst < 1e-4 && all_ops && graphs >= 100;
    r.detail = std::to_string(graphs) + " graphs, " + std::to_string(checked) + " partials, " +
               std::to_string(covered.size()) + "/" + std::to_string(oracles::all_ops().size()) +
               " ops, max rel error " + detail::fmt(worst);
  });
}

// Meta prompts: nonzero logit gradient exactly at rows predicting the query
// label and EOS.
inline CheckResult check_meta_mask(std::size_t episodes = 300, std::uint64_t seed = 7) {
  return detail::timed("meta prompt mask", [&](CheckResult& r) {
    const auto vocab = builtin_vocabulary();
    const auto suite = builtin_task_suite();
    Rng rng(seed);
    std::size_t bad = 0;
    for (std::size_t e = 0; e < episodes; ++e) {
      const auto& f = suite.families[std::size_t(uniform_int(rng, 0, std::int64_t(suite.families.size()) - 1))];
      auto ep = sample_episode(f, std::size_t(uniform_int(rng, 0, 4)), rng);
      auto seq = build_meta_prompt(vocab, ep, f.instruction, 256);
      std::vector<std::int32_t> pos(seq.tokens.begin(), seq.tokens.end());
      const auto t = shift_targets(pos, seq.supervised);
      auto logits = random_normal<double>({seq.tokens.size(), vocab.size()}, 1.0, rng).set_requires_grad(true);
      masked_cross_entropy(logits, t.targets, t.mask).backward();
      const auto rows = detail::nonzero_rows(logits);
      // Expected from serialization: the label starts after the last <a>.
      const auto label = vocab.tokenize(ep.query.y).size();
      const auto n = seq.tokens.size();
      for (std::size_t j = 0; j < n; ++j) {
        const bool predicts_label = j + 1 >= n - label - 1 && j + 1 < n;
        bad += rows[j] != predicts_label;
      }
    }
    r.pass = bad == 0;
    r.detail = std::to_string(episodes) + " random episodes, " + std::to_string(bad) + " rows off-contract";
  });
}

// Caption prompts: no gradient at visual rows, and per-example loss equal to
// a hand-computed cross entropy on a tiny double-precision model.
inline CheckResult check_caption_mask(std::size_t prompts = 100, std::uint64_t seed = 8) {
  return detail::timed("caption prompt mask and loss", [&](CheckResult& r) {
    const auto vocab = builtin_vocabulary();
    Rng rng(seed);
    std::size_t bad_rows = 0;
    double worst = 0.0;
    LanguageModel<double> lm(detail::tiny_lm(vocab.size()), seed);
    detail::jitter(lm, seed + 1, 0.3);
    for (std::size_t i = 0; i < prompts; ++i) {
      const auto cap = caption(random_scene(rng));
      const auto n_vis = std::size_t(uniform_int(rng, 1, 16));
      auto visual = random_normal<double>({n_vis, 8}, 1.0, rng);
      auto p = build_caption_prompt(vocab, visual, cap, 64);
      const auto t = p.targets();
      auto logits = random_normal<double>({p.total_length(), vocab.size()}, 1.0, rng).set_requires_grad(true);
      masked_cross_entropy(logits, t.targets, t.mask).backward();
      const auto rows = detail::nonzero_rows(logits);
      // Row j predicts position j+1; visual positions are never targets.
      for (std::size_t j = 0; j < rows.size(); ++j) bad_rows += rows[j] != (j + 1 >= n_vis && j + 1 < rows.size());
      for (std::size_t j = 0; j < n_vis; ++j) bad_rows += p.loss_mask[j];

      if (i % 10 == 0) {
        const double got = prompt_loss(lm, p).item();
        NoGradGuard ng;
        auto ids = vocab.tokenize(cap);
        ids.push_back(tok::kEos);
        std::vector<double> rowsv(visual.data().begin(), visual.data().end());
        auto emb = lm.embed_tokens(ids);
        rowsv.insert(rowsv.end(), emb.data().begin(), emb.data().end());
        auto z = lm.forward_embeddings(Tensor<double>({n_vis + ids.size(), 8}, rowsv));
        const auto v = vocab.size();
        double total = 0.0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const double* row = z.data().data() + (n_vis - 1 + k) * v;
          double mx = row[0];
          for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
          double se = 0.0;
          for (std::size_t c = 0; c < v; ++c) se += std::exp(row[c] - mx);
          total -= row[ids[k]] - mx - std::log(se);
        }
        worst = std::max(worst, std::abs(got - total / double(ids.size())));
      }
    }
    r.pass = bad_rows == 0 && worst < 1e-6;
    r.detail = std::to_string(prompts) + " prompts, " + std::to_string(bad_rows) +
               " visual rows with gradient, max |loss - hand| " + detail::fmt(worst);
  });
}

// Attaching adaptors leaves every logit bitwise unchanged.
inline CheckResult check_adaptor_identity(std::uint64_t seed = 9) {
  return detail::timed("adaptor identity at init", [&](CheckResult& r) {
    const auto vocab = builtin_vocabulary();
    LMConfig c;
    c.vocab_size = vocab.size();
    LanguageModel<float> lm(c, seed);
    detail::jitter(lm, seed, 0.05);
    Rng rng(seed);
    auto prefix = random_normal<float>({16, c.d_model}, 1.0, rng);
    const auto toks = vocab.tokenize("please answer the question . <q> what color is the square ? <a>");
    NoGradGuard ng;
    auto before = lm.forward(prefix, toks);
    lm.attach_adaptors(AdaptorConfig{true, 0}, seed);
    auto after = lm.forward(prefix, toks);
    const bool same = std::memcmp(before.data().data(), after.data().data(), before.numel() * sizeof(float)) == 0;
    r.pass = same && lm.has_adaptors();
    r.detail = same ? "logits bitwise identical after attach" : "logits changed after attach";
  });
}

// A short frozen_lm VL run on a tiny model leaves the LM bitwise unchanged.
inline CheckResult check_frozen_smoke(std::uint64_t seed = 10) {
  return detail::timed("frozen LM audit (smoke)", [&](CheckResult& r) {
    const auto vocab = builtin_vocabulary();
    LMConfig c = detail::tiny_lm(vocab.size());
    c.d_model = 16;
    LanguageModel<float> lm(c, seed);
    VisualFrontendConfig fc;
    fc.d_language = 16;
    fc.d_visual = 16;
    fc.prefix_hidden = 16;
    VisualFrontend<float> fe(fc, seed);
    DataConfig dc;
    dc.caption_count = 40;
    dc.train_pool = 4;
    dc.test_pool = 4;
    const auto before = snapshot(lm.parameters());
    VLTrainConfig vc;
    vc.steps = 20;
    auto st = vl_train(lm, fe, build_splits(dc, seed).captions, vocab, vc, seed);
    const double delta = max_abs_delta(lm.parameters(), before);
    r.pass = delta == 0.0 && st.max_lm_delta == 0.0;
    r.detail = "20 steps, max |delta theta_LM| = " + detail::fmt(delta);
  });
}

// Cosine fallback against a brute-force scan, plus exact-match precedence.
inline CheckResult check_matcher(std::size_t cases = 1000, std::uint64_t seed = 11) {
  return detail::timed("answer matcher", [&](CheckResult& r) {
    const auto vocab = builtin_vocabulary();
    Rng rng(seed);
    auto word = [&] { return vocab.word(TokenId(uniform_int(rng, tok::kNumSpecial, std::int64_t(vocab.size()) - 1))); };
    std::size_t fallback_bad = 0, exact_bad = 0, ties = 0;
    for (std::size_t t = 0; t < cases; ++t) {
      // Quantized random embeddings: ties are frequent on purpose.
      const int levels = t % 2 ? 1 : 0;
      const std::uint64_t salt = splitmix64(seed + t);
      TextEmbedder emb = [=](const std::string& s) {
        Rng er(fnv1a64(s, salt));
        std::vector<double> v(3);
        for (auto& x : v) x = levels ? double(uniform_int(er, -1, 1)) : normal(er);
        return v;
      };
      std::set<std::string> uniq;
      const auto n = std::size_t(uniform_int(rng, 1, 12));
      while (uniq.size() < n) uniq.insert(uniform_int(rng, 0, 2) ? word() : word() + " " + word());
      std::vector<std::string> raw(uniq.begin(), uniq.end());
      shuffle(raw, rng);
      CandidateAnswerSet cands(raw, emb);

      std::string gen = t % 10 == 0 ? "" : word() + " " + word() + " " + word();
      if (uniq.count(gen)) gen += " " + word();
      const auto g = emb(gen.empty() ? "<eos>" : gen);
      double best = -2.0;
      std::string pick;
      for (const auto& a : raw) {
        const auto e = emb(a);
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < e.size(); ++i) {
          dot += g[i] * e[i];
          na += g[i] * g[i];
          nb += e[i] * e[i];
        }
        const double s = na == 0 || nb == 0 ? 0.0 : dot / std::sqrt(na * nb);
        if (s > best + 1e-12 || (std::abs(s - best) <= 1e-12 && a < pick)) {
          ties += std::abs(s - best) <= 1e-12;
          best = s;
          pick = a;
        }
      }
      fallback_bad += match_answer(gen, cands, emb).answer != pick;

      const auto& gold = raw[std::size_t(uniform_int(rng, 0, std::int64_t(raw.size()) - 1))];
      exact_bad += match_answer("  " + gold + " ", cands, emb).answer != gold;
    }
    r.pass = fallback_bad == 0 && exact_bad == 0;
    r.detail = std::to_string(cases) + " cases (" + std::to_string(ties) + " with ties), " +
               std::to_string(fallback_bad) + " fallback disagreements, " + std::to_string(exact_bad) +
               " exact-precedence violations";
  });
}

inline std::vector<CheckResult> run_selftests() {
  return {check_gradients(), check_meta_mask(),      check_caption_mask(),
          check_adaptor_identity(), check_frozen_smoke(), check_matcher()};
}

}  // namespace metavl::oracles
