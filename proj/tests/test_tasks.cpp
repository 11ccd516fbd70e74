#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "metavl/tasks.hpp"
#include "metavl/transformer.hpp"

using namespace metavl;

TEST(TaskSuite, EightFamiliesSplitSixTwo) {
  auto suite = builtin_task_suite();
  EXPECT_GE(suite.families.size(), 8u);
  EXPECT_EQ(suite.meta_train.size(), 6u);
  EXPECT_EQ(suite.held_out.size(), 2u);
  for (const auto& h : suite.held_out) {
    EXPECT_EQ(std::count(suite.meta_train.begin(), suite.meta_train.end(), h), 0);
  }
  std::set<std::string> ids;
  for (const auto& f : suite.families) EXPECT_TRUE(ids.insert(f.id).second);
}

TEST(TaskSuite, DefinitionExamples) {
  EXPECT_EQ(reverse_pair("a b c").y, "c b a");
  EXPECT_EQ(parity_label("x x x"), "odd");
  EXPECT_EQ(parity_label("x x"), "even");
  EXPECT_EQ(mod_sum_label("3 4", 5), "2");
}

TEST(TaskSuite, ModSumAgreesWithArithmetic) {
  auto suite = builtin_task_suite();
  const auto& f = suite.family("mod_sum");
  for (std::uint64_t s = 0; s < 300; ++s) {
    auto p = f.generate(0, s);
    int total = 0;
    for (char ch : p.x)
      if (ch >= '0' && ch <= '9') total += ch - '0';
    EXPECT_EQ(p.y, std::to_string(total % 5)) << p.x;
  }
}

TEST(TaskSuite, GeneratorsDeterministicAndClosed) {
  auto suite = builtin_task_suite();
  auto vocab = builtin_vocabulary();
  for (const auto& f : suite.families) {
    EXPECT_NO_THROW(vocab.tokenize(f.instruction)) << f.id;
    for (std::uint64_t s = 0; s < 200; ++s) {
      const auto key = s % 7;
      auto a = f.generate(key, s), b = f.generate(key, s);
      EXPECT_EQ(a, b);
      EXPECT_NO_THROW(vocab.tokenize(a.x)) << f.id << ": " << a.x;
      for (const auto& w : split_words(a.y)) {
        EXPECT_NE(std::find(f.answer_space.begin(), f.answer_space.end(), w), f.answer_space.end())
            << f.id << ": " << a.y;
      }
    }
  }
}

TEST(TaskSuite, ColorShapeMappingFixedWithinEpisode) {
  auto suite = builtin_task_suite();
  const auto& f = suite.family("color_shape");
  const auto mapping = color_shape_mapping(42);
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto p = f.generate(42, s);
    auto xs = split_words(p.x), ys = split_words(p.y);
    ASSERT_EQ(xs.size(), ys.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto c = std::find(lexicon::colors().begin(), lexicon::colors().end(), xs[i]) - lexicon::colors().begin();
      EXPECT_EQ(ys[i], mapping[std::size_t(c)]);
    }
  }
}

TEST(SampleEpisode, ShapesAndDistinctness) {
  auto suite = builtin_task_suite();
  Rng rng(1);
  auto e0 = sample_episode(suite.family("copy"), 0, rng);
  EXPECT_TRUE(e0.supports.empty());
  EXPECT_FALSE(e0.query.x.empty());
  for (const auto& f : suite.families) {
    for (int t = 0; t < 30; ++t) {
      auto e = sample_episode(f, 3, rng);
      EXPECT_EQ(e.supports.size(), 3u);
      for (const auto& s : e.supports) EXPECT_NE(s.x, e.query.x);
    }
  }
}

TEST(SampleEpisode, SameSeedSameEpisode) {
  auto suite = builtin_task_suite();
  Rng a(77), b(77);
  auto ea = sample_episode(suite.family("reverse"), 4, a);
  auto eb = sample_episode(suite.family("reverse"), 4, b);
  EXPECT_EQ(ea.supports, eb.supports);
  EXPECT_EQ(ea.query, eb.query);
}

TEST(SampleEpisode, ImpossibleRequestThrows) {
  TextTaskFamily tiny{"tiny", "copy the words .", {"red"}, [](std::uint64_t, std::uint64_t) {
                        return TextPair{"red", "red"};
                      }};
  Rng rng(1);
  EXPECT_NO_THROW(sample_episode(tiny, 0, rng));
  EXPECT_THROW(sample_episode(tiny, 1, rng), Error);
}

TEST(MetaPrompt, CopyZeroShotMask) {
  auto vocab = builtin_vocabulary();
  Episode ep{"copy", {}, {"red", "red"}, 0};
  auto seq = build_meta_prompt(vocab, ep, "copy the words .", 256);
  const auto n = seq.tokens.size();
  EXPECT_EQ(seq.tokens[n - 2], vocab.id("red"));
  EXPECT_EQ(seq.tokens[n - 1], tok::kEos);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seq.supervised[i], i >= n - 2) << i;
}

TEST(MetaPrompt, MaskExclusivityOverRandomEpisodes) {
  auto suite = builtin_task_suite();
  auto vocab = builtin_vocabulary();
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto& f = suite.families[std::size_t(uniform_int(rng, 0, std::int64_t(suite.families.size()) - 1))];
    const auto k = std::size_t(uniform_int(rng, 0, 4));
    auto ep = sample_episode(f, k, rng);
    auto seq = build_meta_prompt(vocab, ep, f.instruction, 256);
    // Reconstruct the expected mask from serialization offsets.
    std::size_t off = vocab.tokenize(f.instruction).size();
    for (const auto& s : ep.supports) off += 3 + vocab.tokenize(s.x).size() + vocab.tokenize(s.y).size();
    off += 2 + vocab.tokenize(ep.query.x).size();
    const auto label = vocab.tokenize(ep.query.y).size();
    ASSERT_EQ(seq.tokens.size(), off + label + 1);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
      EXPECT_EQ(bool(seq.supervised[i]), i >= off);
      masked += seq.supervised[i];
    }
    EXPECT_EQ(masked, label + 1);
    EXPECT_EQ(seq.tokens[off - 1], tok::kAnswer);
  }
}

TEST(MetaPrompt, Overlength) {
  auto vocab = builtin_vocabulary();
  Episode ep{"copy", {{"red blue", "red blue"}}, {"red", "red"}, 1};
  EXPECT_THROW(build_meta_prompt(vocab, ep, "copy the words .", 10), OverlengthError);
}

TEST(PlainSequence, EveryPositionSupervised) {
  auto vocab = builtin_vocabulary();
  Episode ep{"copy", {{"red blue", "red blue"}}, {"cat", "cat"}, 1};
  auto seq = build_plain_sequence(vocab, ep, 256);
  EXPECT_EQ(seq.tokens, vocab.tokenize("red blue red blue cat cat <eos>"));
  EXPECT_TRUE(std::all_of(seq.supervised.begin(), seq.supervised.end(), [](bool b) { return b; }));
}
