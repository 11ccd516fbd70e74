#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "metavl/oracles/gradcheck.hpp"
#include "metavl/prompt.hpp"
#include "metavl/training.hpp"

using namespace metavl;
namespace fs = std::filesystem;

namespace {

LMConfig small_lm(std::size_t vocab) {
  LMConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 96;
  c.vocab_size = vocab;
  return c;
}

VisualFrontendConfig small_fe() {
  VisualFrontendConfig c;
  c.d_visual = 16;
  c.d_language = 16;
  c.prefix_hidden = 16;
  return c;
}

template <class T>
void jitter(LanguageModel<T>& lm, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& [name, t] : lm.parameters())
    for (auto& v : t.mutable_data()) v += T(normal(rng) * scale);
}

std::vector<SceneSpec> scenes(std::size_t n, std::uint64_t seed) {
  DataConfig dc;
  dc.caption_count = n;
  dc.train_pool = 4;
  dc.test_pool = 4;
  return build_splits(dc, seed).captions;
}

double head_mean(const std::vector<double>& v, std::size_t n) {
  return std::accumulate(v.begin(), v.begin() + std::ptrdiff_t(n), 0.0) / double(n);
}
double tail_mean(const std::vector<double>& v, std::size_t n) {
  return std::accumulate(v.end() - std::ptrdiff_t(n), v.end(), 0.0) / double(n);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

template <class T>
bool same_weights(const std::vector<NamedTensor<T>>& a, const std::vector<NamedTensor<T>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].second.data(), y = b[i].second.data();
    if (a[i].first != b[i].first || x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(T)))
      return false;
  }
  return true;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           (std::string("metavl_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Caption prompts and the loss mask

TEST(CaptionPrompt, LayoutAndMask) {
  auto vocab = builtin_vocabulary();
  auto p = build_caption_prompt(vocab, Tensor<float>::zeros({16, 8}), "a red circle", 256);
  EXPECT_EQ(p.total_length(), 20u);
  EXPECT_EQ(p.visual_span_count(), 1u);
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(std::count(p.loss_mask.begin(), p.loss_mask.end(), true), 4);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_FALSE(p.loss_mask[j]);
  const auto t = p.targets();
  // Row 15 (last visual row) predicts "a"; row 19 (EOS) predicts nothing.
  for (std::size_t j = 0; j < 20; ++j) EXPECT_EQ(bool(t.mask[j]), j >= 15 && j <= 18) << j;
  EXPECT_EQ(t.targets[15], vocab.id("a"));
  EXPECT_EQ(t.targets[18], tok::kEos);
  EXPECT_THROW(build_caption_prompt(vocab, Tensor<float>::zeros({16, 8}), "a red circle", 19), OverlengthError);
}

TEST(CaptionPrompt, VisualLogitRowsGetNoGradient) {
  auto vocab = builtin_vocabulary();
  auto p = build_caption_prompt(vocab, Tensor<double>::zeros({16, 4}), "a blue square and a red circle", 256);
  const auto t = p.targets();
  Rng rng(1);
  auto logits = random_normal<double>({p.total_length(), vocab.size()}, 1.0, rng).set_requires_grad(true);
  masked_cross_entropy(logits, t.targets, t.mask).backward();
  const auto v = vocab.size();
  for (std::size_t r = 0; r < p.total_length(); ++r) {
    double mag = 0;
    for (std::size_t c = 0; c < v; ++c) mag += std::abs(logits.grad()[r * v + c]);
    if (r < 15 || r + 1 == p.total_length()) EXPECT_EQ(mag, 0.0) << r;
    else EXPECT_GT(mag, 0.0) << r;
  }
}

TEST(CaptionPrompt, LossMatchesHandComputation) {
  auto vocab = builtin_vocabulary();
  LanguageModel<double> lm(small_lm(vocab.size()), 2);
  jitter(lm, 3);
  Rng rng(4);
  auto visual = random_normal<double>({16, 16}, 1.0, rng);
  auto p = build_caption_prompt(vocab, visual, "a green triangle", 96);
  const double got = prompt_loss(lm, p).item();

  // Reference: build the input rows by hand and average -log p over the four
  // caption/EOS targets.
  std::vector<double> rows(visual.data().begin(), visual.data().end());
  const auto ids = vocab.tokenize("a green triangle <eos>");
  auto emb = lm.embed_tokens(ids);
  rows.insert(rows.end(), emb.data().begin(), emb.data().end());
  NoGradGuard ng;
  auto logits = lm.forward_embeddings(Tensor<double>({16 + ids.size(), 16}, rows));
  const auto v = vocab.size();
  double total = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t r = 15 + i;
    const double* z = logits.data().data() + r * v;
    double mx = *std::max_element(z, z + v), se = 0;
    for (std::size_t c = 0; c < v; ++c) se += std::exp(z[c] - mx);
    total += -(z[ids[i]] - mx - std::log(se));
  }
  EXPECT_NEAR(got, total / double(ids.size()), 1e-9);

  // The visual rows condition the caption.
  auto p2 = build_caption_prompt(vocab, random_normal<double>({16, 16}, 1.0, rng), "a green triangle", 96);
  EXPECT_NE(prompt_loss(lm, p2).item(), got);
}

TEST(CaptionPrompt, FrontendGradientThroughFrozenLMMatchesFiniteDifferences) {
  auto vocab = builtin_vocabulary();
  LMConfig lc = small_lm(vocab.size());
  lc.d_model = 8;
  LanguageModel<double> lm(lc, 20);
  jitter(lm, 21);
  lm.set_base_trainable(false);
  VisualFrontendConfig fc;
  fc.image_size = 8;
  fc.patch = 4;
  fc.d_visual = 6;
  fc.d_language = 8;
  fc.prefix_hidden = 5;
  VisualFrontend<double> fe(fc, 22);
  Rng rng(23);
  auto patches = random_normal<double>({4, 48}, 1.0, rng);
  std::vector<Tensor<double>> leaves;
  for (auto& [n, t] : fe.parameters()) leaves.push_back(t);
  for (auto& l : leaves)
    for (auto& v : l.mutable_data()) v += 0.1 * normal(rng);
  auto res = metavl::oracles::grad_check(leaves, [&](std::vector<Tensor<double>>&) {
    auto p = build_caption_prompt(vocab, fe.prefix(fe.encode_patches(patches)), "a red circle and a blue square", 96);
    return prompt_loss(lm, p);
  });
  EXPECT_LT(res.max_rel_error, 1e-4);
  for (auto& [n, t] : lm.parameters()) EXPECT_FALSE(t.has_grad()) << n;
}

TEST(MetaPrompt, SupportPositionsGetNoGradient) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  Rng rng(5);
  const auto& f = suite.family("reverse");
  auto ep = sample_episode(f, 3, rng);
  auto seq = build_meta_prompt(vocab, ep, f.instruction, 256);
  std::vector<std::int32_t> pos(seq.tokens.begin(), seq.tokens.end());
  const auto t = shift_targets(pos, seq.supervised);
  auto logits = random_normal<double>({seq.tokens.size(), vocab.size()}, 1.0, rng).set_requires_grad(true);
  masked_cross_entropy(logits, t.targets, t.mask).backward();
  const auto first_sup = std::size_t(std::find(seq.supervised.begin(), seq.supervised.end(), true) -
                                     seq.supervised.begin());
  const auto v = vocab.size();
  for (std::size_t r = 0; r < seq.tokens.size(); ++r) {
    double mag = 0;
    for (std::size_t c = 0; c < v; ++c) mag += std::abs(logits.grad()[r * v + c]);
    // Row r predicts token r+1.
    if (r + 1 < first_sup || r + 1 == seq.tokens.size()) EXPECT_EQ(mag, 0.0) << r;
    else EXPECT_GT(mag, 0.0) << r;
  }
}

// ---------------------------------------------------------------------------
// LM stages

TEST(TrainLM, ZeroStepsLeavesWeightsUnchanged) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LanguageModel<float> lm(small_lm(vocab.size()), 6);
  const auto before = snapshot(lm.parameters());
  LMTrainConfig cfg;
  cfg.steps = 0;
  auto st = train_lm(lm, suite, vocab, LMStage::kMeta, cfg, 1);
  EXPECT_EQ(st.steps_done, 0u);
  EXPECT_EQ(max_abs_delta(lm.parameters(), before), 0.0);
}

TEST(TrainLM, MetaLossDecreasesOnCopy) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  suite.meta_train = {"copy"};
  LanguageModel<float> lm(small_lm(vocab.size()), 7);
  LMTrainConfig cfg;
  cfg.steps = 200;
  cfg.lr = 3e-3;
  auto st = train_lm(lm, suite, vocab, LMStage::kMeta, cfg, 2);
  ASSERT_EQ(st.losses.size(), 200u);
  EXPECT_LT(tail_mean(st.losses, 20), 0.8 * head_mean(st.losses, 20));
}

TEST(TrainLM, HeldOutFamiliesNeverSampled) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LMTrainConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::set<std::size_t> ks;
  for (auto stage : {LMStage::kPretrain, LMStage::kMeta, LMStage::kBaseline}) {
    for (std::size_t step = 0; step < 300; ++step) {
      for (std::size_t b = 0; b < 8; ++b) {
        auto s = draw_lm_sample(suite, vocab, stage, cfg, 256, 3, step, b);
        ++seen[s.family];
        ks.insert(s.k);
      }
    }
  }
  for (const auto& h : suite.held_out) EXPECT_EQ(seen.count(h), 0u) << h;
  EXPECT_EQ(seen.size(), suite.meta_train.size());
  EXPECT_EQ(ks, (std::set<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(TrainLM, MetaAndBaselineSeeTheSameEpisodes) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LMTrainConfig cfg;
  for (std::size_t step = 0; step < 50; ++step) {
    for (std::size_t b = 0; b < 8; ++b) {
      auto m = draw_lm_sample(suite, vocab, LMStage::kMeta, cfg, 256, 4, step, b);
      auto p = draw_lm_sample(suite, vocab, LMStage::kBaseline, cfg, 256, 4, step, b);
      EXPECT_EQ(m.family, p.family);
      EXPECT_EQ(m.k, p.k);
      // Same content words: the plain sequence is the meta prompt without
      // instruction and markers.
      TokenSequence stripped;
      const auto ins = vocab.tokenize(suite.family(m.family).instruction).size();
      for (std::size_t i = ins; i < m.seq.tokens.size(); ++i) {
        const auto t = m.seq.tokens[i];
        if (t != tok::kQuestion && t != tok::kAnswer && t != tok::kSep) stripped.push_back(t);
      }
      EXPECT_EQ(stripped, p.seq.tokens);
    }
  }
}

TEST(TrainLM, MetaAndBaselineRunMatchedStepCounts) {
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LMTrainConfig cfg;
  cfg.steps = 5;
  LanguageModel<float> a(small_lm(vocab.size()), 8), b(small_lm(vocab.size()), 8);
  auto sa = train_lm(a, suite, vocab, LMStage::kMeta, cfg, 5);
  auto sb = train_lm(b, suite, vocab, LMStage::kBaseline, cfg, 5);
  EXPECT_EQ(sa.steps_done, sb.steps_done);
  EXPECT_EQ(sa.losses.size(), sb.losses.size());
  EXPECT_EQ(sa.family_counts, sb.family_counts);
}

TEST(TrainLM, ResumeEqualsUninterruptedAndIsReproducible) {
  TempDir tmp;
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LMTrainConfig cfg;
  cfg.steps = 6;
  cfg.batch = 2;

  LanguageModel<float> full(small_lm(vocab.size()), 9);
  train_lm(full, suite, vocab, LMStage::kMeta, cfg, 6, TrainIO{tmp.path / "full.ckpt", tmp.path / "full.jsonl", 0, {}});

  LanguageModel<float> part(small_lm(vocab.size()), 9);
  LMTrainConfig first = cfg;
  first.steps = 3;
  const TrainIO io{tmp.path / "part.ckpt", tmp.path / "part.jsonl", 0, {}};
  train_lm(part, suite, vocab, LMStage::kMeta, first, 6, io);
  LanguageModel<float> resumed(small_lm(vocab.size()), 9);
  auto st = train_lm(resumed, suite, vocab, LMStage::kMeta, cfg, 6, io);
  EXPECT_EQ(st.start_step, 3u);
  EXPECT_EQ(st.losses.size(), 3u);
  EXPECT_TRUE(same_weights(full.parameters(), resumed.parameters()));
  EXPECT_EQ(file_bytes(tmp.path / "full.ckpt"), file_bytes(tmp.path / "part.ckpt"));

  // The log of the resumed run continues the first one.
  std::ifstream log(tmp.path / "part.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) {
    auto rec = nlohmann::json::parse(line);
    EXPECT_EQ(rec.at("step").get<std::size_t>(), ++lines);
    EXPECT_TRUE(rec.contains("loss") && rec.contains("grad_norm") && rec.contains("lr"));
  }
  EXPECT_EQ(lines, 6u);

  // A second uninterrupted run writes the same checkpoint bytes.
  LanguageModel<float> again(small_lm(vocab.size()), 9);
  train_lm(again, suite, vocab, LMStage::kMeta, cfg, 6, TrainIO{tmp.path / "again.ckpt", {}, 0, {}});
  EXPECT_EQ(file_bytes(tmp.path / "full.ckpt"), file_bytes(tmp.path / "again.ckpt"));
}

TEST(TrainLM, ResumeRejectsOtherStage) {
  TempDir tmp;
  auto vocab = builtin_vocabulary();
  auto suite = builtin_task_suite();
  LMTrainConfig cfg;
  cfg.steps = 1;
  cfg.batch = 1;
  LanguageModel<float> lm(small_lm(vocab.size()), 10);
  const TrainIO io{tmp.path / "x.ckpt", {}, 0, {}};
  train_lm(lm, suite, vocab, LMStage::kMeta, cfg, 7, io);
  EXPECT_THROW(train_lm(lm, suite, vocab, LMStage::kBaseline, cfg, 7, io), CheckpointError);
}

// ---------------------------------------------------------------------------
// Vision-language stage

TEST(CaptionSchedule, EpochsArePermutationsOfTheSubset) {
  CaptionSchedule s(10, 4, 1);
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> got;
    for (std::size_t g = epoch * 10; g < epoch * 10 + 10; ++g) got.insert(s.index(g / 4, g % 4));
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < 10; ++i) all.insert(i);
    EXPECT_EQ(got, all);
  }
}

TEST(CaptionSchedule, HalfFractionConsumesExactlyTheFirstHalf) {
  const std::size_t n = 101;
  const auto half = caption_subset_size(n, 0.5);
  EXPECT_EQ(half, 50u);
  CaptionSchedule s(half, 8, 2);
  auto used = s.consumed(100);
  EXPECT_EQ(used.size(), half);
  EXPECT_EQ(*used.rbegin(), half - 1);
  CaptionSchedule f(n, 8, 2);
  EXPECT_EQ(f.consumed(100).size(), n);
}

TEST(VLTrain, ZeroStepsLeavesEverythingUnchanged) {
  auto vocab = builtin_vocabulary();
  LanguageModel<float> lm(small_lm(vocab.size()), 11);
  VisualFrontend<float> fe(small_fe(), 11);
  const auto l0 = snapshot(lm.parameters());
  const auto f0 = snapshot(fe.parameters());
  VLTrainConfig cfg;
  cfg.steps = 0;
  auto st = vl_train(lm, fe, scenes(20, 1), vocab, cfg, 1);
  EXPECT_EQ(max_abs_delta(lm.parameters(), l0), 0.0);
  EXPECT_EQ(max_abs_delta(fe.parameters(), f0), 0.0);
  EXPECT_EQ(st.subset_size, 20u);
}

TEST(VLTrain, LossDecreasesAndBaseLMStaysBitwiseFrozen) {
  auto vocab = builtin_vocabulary();
  LanguageModel<float> lm(small_lm(vocab.size()), 12);
  jitter(lm, 13, 0.05);
  VisualFrontend<float> fe(small_fe(), 12);
  const auto l0 = snapshot(lm.parameters());
  const auto e0 = snapshot(fe.encoder_parameters());
  const auto p0 = snapshot(fe.prefix_parameters());
  VLTrainConfig cfg;
  cfg.steps = 300;
  auto st = vl_train(lm, fe, scenes(200, 2), vocab, cfg, 3);
  EXPECT_LT(tail_mean(st.losses, 30), head_mean(st.losses, 30));
  EXPECT_EQ(st.max_lm_delta, 0.0);
  EXPECT_EQ(max_abs_delta(lm.parameters(), l0), 0.0);
  EXPECT_GT(max_abs_delta(fe.encoder_parameters(), e0), 0.0);
  EXPECT_GT(max_abs_delta(fe.prefix_parameters(), p0), 0.0);
}

TEST(VLTrain, AdaptorsTrainWhileBaseStaysFrozen) {
  auto vocab = builtin_vocabulary();
  LanguageModel<float> lm(small_lm(vocab.size()), 14);
  VisualFrontend<float> fe(small_fe(), 14);
  VLTrainConfig cfg;
  cfg.steps = 100;
  cfg.adaptors = true;
  EXPECT_THROW(vl_train(lm, fe, scenes(50, 3), vocab, cfg, 4), ConfigError);
  lm.attach_adaptors(AdaptorConfig{true, 0}, 14);
  const auto probe = vocab.tokenize("a red circle and a blue square");
  auto logits0 = lm.forward(std::nullopt, probe);
  const auto base0 = snapshot(lm.parameters());
  auto st = vl_train(lm, fe, scenes(50, 3), vocab, cfg, 4, {}, "with_adaptors");
  EXPECT_EQ(st.max_lm_delta, 0.0);
  EXPECT_EQ(max_abs_delta(lm.parameters(), base0), 0.0);
  auto logits1 = lm.forward(std::nullopt, probe);
  double diff = 0;
  for (std::size_t i = 0; i < logits0.numel(); ++i)
    diff = std::max(diff, double(std::abs(logits0.data()[i] - logits1.data()[i])));
  EXPECT_GT(diff, 1e-4);

  cfg.adaptors = false;
  EXPECT_THROW(vl_train(lm, fe, scenes(50, 3), vocab, cfg, 4), ConfigError);
}

TEST(VLTrain, DimensionMismatchIsAConfigError) {
  auto vocab = builtin_vocabulary();
  LanguageModel<float> lm(small_lm(vocab.size()), 15);
  VisualFrontend<float> fe(VisualFrontendConfig{}, 15);  // D_l 64 vs d_model 16
  VLTrainConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(vl_train(lm, fe, scenes(5, 4), vocab, cfg, 5), ConfigError);
}

TEST(VLTrain, ResumeEqualsUninterruptedAndIsReproducible) {
  TempDir tmp;
  auto vocab = builtin_vocabulary();
  const auto data = scenes(30, 5);
  VLTrainConfig cfg;
  cfg.steps = 6;
  cfg.batch = 3;
  cfg.fraction = 0.5;

  LanguageModel<float> lm(small_lm(vocab.size()), 16);
  VisualFrontend<float> full(small_fe(), 16);
  vl_train(lm, full, data, vocab, cfg, 6, TrainIO{tmp.path / "full.ckpt", {}, 0, {}});

  VisualFrontend<float> part(small_fe(), 16);
  VLTrainConfig first = cfg;
  first.steps = 4;
  const TrainIO io{tmp.path / "part.ckpt", {}, 0, {}};
  vl_train(lm, part, data, vocab, first, 6, io);
  VisualFrontend<float> resumed(small_fe(), 16);
  auto st = vl_train(lm, resumed, data, vocab, cfg, 6, io);
  EXPECT_EQ(st.start_step, 4u);
  EXPECT_TRUE(same_weights(full.parameters(), resumed.parameters()));
  EXPECT_EQ(file_bytes(tmp.path / "full.ckpt"), file_bytes(tmp.path / "part.ckpt"));

  VisualFrontend<float> again(small_fe(), 16);
  vl_train(lm, again, data, vocab, cfg, 6, TrainIO{tmp.path / "again.ckpt", {}, 0, {}});
  EXPECT_EQ(file_bytes(tmp.path / "full.ckpt"), file_bytes(tmp.path / "again.ckpt"));
}

TEST(VLTrain, HalfFractionNeverTouchesTheSecondHalf) {
  auto vocab = builtin_vocabulary();
  // Scenes beyond the subset are poisoned: rendering them would throw.
  auto data = scenes(20, 6);
  for (std::size_t i = 10; i < data.size(); ++i) data[i].grid = 0;
  LanguageModel<float> lm(small_lm(vocab.size()), 17);
  VisualFrontend<float> fe(small_fe(), 17);
  VLTrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 4;
  cfg.fraction = 0.5;
  VLStats st;
  EXPECT_NO_THROW(st = vl_train(lm, fe, data, vocab, cfg, 7));
  EXPECT_EQ(st.subset_size, 10u);
  cfg.fraction = 1.0;
  VisualFrontend<float> fe2(small_fe(), 17);
  EXPECT_ANY_THROW(vl_train(lm, fe2, data, vocab, cfg, 7));
}

TEST(FrozenAudit, DetectsAnyBitChange) {
  std::vector<NamedTensor<float>> p{{"w", Tensor<float>::zeros({3})}};
  const auto before = snapshot(p);
  EXPECT_EQ(max_abs_delta(p, before), 0.0);
  p[0].second.mutable_data()[1] = -0.0f;
  EXPECT_GT(max_abs_delta(p, before), 0.0);
  p[0].second.mutable_data()[1] = 0.25f;
  EXPECT_EQ(max_abs_delta(p, before), 0.25);
}
