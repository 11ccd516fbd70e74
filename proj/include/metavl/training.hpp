#pragma once

// Training loops: text pretraining, meta-training and its plain-format
// baseline, and prefix-LM training of the visual frontend against a frozen
// LM. Every step draws its data from a stream derived from (seed, stage,
// step, slot), so a resumed run replays exactly what an uninterrupted run
// would have seen.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metavl/checkpoint.hpp"
#include "metavl/errors.hpp"
#include "metavl/optim.hpp"
#include "metavl/prompt.hpp"
#include "metavl/rng.hpp"
#include "metavl/scene.hpp"
#include "metavl/tasks.hpp"
#include "metavl/transformer.hpp"
#include "metavl/visual.hpp"

namespace metavl {

// Line-delimited JSON records. A default-constructed log discards records.
class JsonlLog {
 public:
  JsonlLog() = default;
  JsonlLog(const std::filesystem::path& path, bool append) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw Error("cannot open log " + path.string());
  }
  void write(const nlohmann::json& rec) {
    if (out_.is_open()) out_ << rec.dump() << '\n';
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::ofstream out_;
};

// Where a stage keeps its resumable state. Empty paths disable the feature.
struct TrainIO {
  std::filesystem::path resume_checkpoint;
  std::filesystem::path log;
  std::size_t checkpoint_every = 0;
  // Appended to the checkpoint fingerprint, e.g. a hash of the stage config,
  // so a resume never mixes runs of different settings.
  std::string fingerprint_suffix;
};

enum class LMStage { kPretrain, kMeta, kBaseline };

inline std::string stage_name(LMStage s) {
  switch (s) {
    case LMStage::kPretrain: return "pretrain";
    case LMStage::kMeta: return "meta";
    case LMStage::kBaseline: return "baseline";
  }
  return "?";
}

struct LMTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double lr = 3e-4;
  std::size_t k_min = 0;
  std::size_t k_max = 4;
  double clip_norm = 1.0;

  void validate(const LMConfig& lm) const {
    if (batch == 0) throw ConfigError("batch size must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (k_min > k_max) throw ConfigError("k range is empty");
    // Longest family pair is well under 16 tokens; keep k_max inside context.
    if ((k_max + 1) * 16 + 8 > lm.max_seq_len) {
      throw ConfigError("k_max " + std::to_string(k_max) + " does not fit context " +
                        std::to_string(lm.max_seq_len));
    }
  }
};

struct TrainStats {
  std::size_t start_step = 0;
  std::size_t steps_done = 0;
  std::vector<double> losses;  // one per step run in this call
  std::map<std::string, std::size_t> family_counts;
};

namespace detail {

template <class T>
void check_finite(const Tensor<T>& loss, const std::string& stage, std::size_t step) {
  if (!std::isfinite(double(loss.item()))) {
    throw AuditError(stage + " diverged: loss is " + std::to_string(double(loss.item())) + " at step " +
                     std::to_string(step));
  }
}

template <class T>
bool try_resume(const TrainIO& io, const std::string& fingerprint, std::vector<NamedTensor<T>>& params,
                Adam<T>& opt, std::size_t& start) {
  if (io.resume_checkpoint.empty() || !std::filesystem::exists(io.resume_checkpoint)) return false;
  auto ck = load_checkpoint<T>(io.resume_checkpoint);
  restore_checkpoint(ck, fingerprint, params, &opt);
  start = ck.step;
  return true;
}

template <class T>
void save_resume(const TrainIO& io, const std::string& fingerprint, const std::vector<NamedTensor<T>>& params,
                 const Adam<T>& opt) {
  if (io.resume_checkpoint.empty()) return;
  save_checkpoint(capture_checkpoint(fingerprint, params, &opt), io.resume_checkpoint);
}

}  // namespace detail

// One training sequence for an LM stage, drawn from its own stream.
struct LMSample {
  std::string family;
  std::size_t k = 0;
  MaskedSequence seq;
};

inline LMSample draw_lm_sample(const TaskSuite& suite, const Vocabulary& vocab, LMStage stage,
                               const LMTrainConfig& cfg, std::size_t max_len, std::uint64_t seed,
                               std::size_t step, std::size_t slot) {
  // Meta and baseline share a stream, so both see the same episodes and
  // differ only in how they are serialized.
  Rng rng = make_rng(seed, tag(stage == LMStage::kPretrain ? "pretrain" : "episodes"), step, slot);
  LMSample s;
  s.family = suite.meta_train[std::size_t(uniform_int(rng, 0, std::int64_t(suite.meta_train.size()) - 1))];
  s.k = std::size_t(uniform_int(rng, std::int64_t(cfg.k_min), std::int64_t(cfg.k_max)));
  const auto& fam = suite.family(s.family);
  auto ep = sample_episode(fam, s.k, rng);
  s.seq = stage == LMStage::kMeta ? build_meta_prompt(vocab, ep, fam.instruction, max_len)
                                  : build_plain_sequence(vocab, ep, max_len);
  return s;
}

template <class T>
Tensor<T> sequence_loss(const LanguageModel<T>& lm, const MaskedSequence& seq) {
  std::vector<std::int32_t> positions(seq.tokens.begin(), seq.tokens.end());
  const auto t = shift_targets(positions, seq.supervised);
  return masked_cross_entropy(lm.forward(std::nullopt, seq.tokens), t.targets, t.mask);
}

// Identity stored in a stage checkpoint; loading checks it.
template <class T>
std::string lm_stage_fingerprint(const LanguageModel<T>& lm, LMStage stage, const std::string& suffix = "") {
  return lm.fingerprint() + "|stage:" + stage_name(stage) + suffix;
}

// Pretraining and the baseline use plain "x y ... <eos>" sequences with every
// position supervised; the meta stage uses meta prompts supervising only the
// query label. All three sample a meta-train family and k uniformly per
// sequence and average per-sequence losses over the batch.
template <class T>
TrainStats train_lm(LanguageModel<T>& lm, const TaskSuite& suite, const Vocabulary& vocab, LMStage stage,
                    const LMTrainConfig& cfg, std::uint64_t seed, const TrainIO& io = {}) {
  cfg.validate(lm.config());
  if (lm.has_adaptors()) throw ConfigError("LM stages train the base model without adaptors");
  lm.set_base_trainable(true);
  Adam<T> opt(AdamOptions{0.9, 0.999, 1e-8, cfg.clip_norm});
  opt.add_group({"lm", lm.parameters(), cfg.lr, false});
  const auto fp = lm_stage_fingerprint(lm, stage, io.fingerprint_suffix);

  TrainStats stats;
  std::size_t start = 0;
  const bool resumed = detail::try_resume(io, fp, lm.parameters(), opt, start);
  stats.start_step = start;
  JsonlLog log = io.log.empty() ? JsonlLog() : JsonlLog(io.log, resumed);

  const auto name = stage_name(stage);
  for (std::size_t step = start; step < cfg.steps; ++step) {
    opt.zero_grad();
    Tensor<T> total;
    std::vector<std::string> families;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      auto sample = draw_lm_sample(suite, vocab, stage, cfg, lm.config().max_seq_len, seed, step, b);
      families.push_back(sample.family);
      ++stats.family_counts[sample.family];
      auto l = sequence_loss(lm, sample.seq);
      total = b == 0 ? l : add(total, l);
    }
    total = scale(total, T(1) / T(cfg.batch));
    detail::check_finite(total, name, step);
    total.backward();
    const double gnorm = opt.step();
    stats.losses.push_back(double(total.item()));
    log.write({{"stage", name}, {"step", step + 1}, {"loss", double(total.item())}, {"grad_norm", gnorm},
               {"lr", {{"lm", cfg.lr}}}, {"families", families}});
    if (io.checkpoint_every && (step + 1) % io.checkpoint_every == 0 && step + 1 < cfg.steps) {
      log.flush();
      detail::save_resume(io, fp, lm.parameters(), opt);
    }
  }
  stats.steps_done = cfg.steps;
  opt.set_step_count(cfg.steps);
  detail::save_resume(io, fp, lm.parameters(), opt);
  return stats;
}

// ---------------------------------------------------------------------------
// Vision-language training

struct VLTrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 8;
  double fraction = 1.0;
  double lr_prefix = 1e-3;
  double lr_encoder = 3e-4;
  double lr_adaptor = 3e-4;
  bool adaptors = false;
  double clip_norm = 1.0;

  void validate() const {
    if (batch == 0) throw ConfigError("batch size must be positive");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
    if (!(lr_prefix > 0 && lr_encoder > 0 && lr_adaptor > 0)) throw ConfigError("learning rates must be positive");
  }
};

struct VLStats {
  std::size_t start_step = 0;
  std::size_t steps_done = 0;
  std::size_t subset_size = 0;
  std::vector<double> losses;
  double max_lm_delta = 0.0;
};

// Order in which caption examples are visited: epoch e is a fresh permutation
// of the subset [0, n), drawn from its own stream.
class CaptionSchedule {
 public:
  CaptionSchedule(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
    if (n == 0) throw ConfigError("caption subset is empty");
  }

  std::size_t index(std::size_t step, std::size_t slot) {
    const std::size_t g = step * batch_ + slot;
    const std::size_t epoch = g / n_;
    if (epoch != epoch_) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng = make_rng(seed_, tag("vl-order"), epoch);
      shuffle(perm_, rng);
      epoch_ = epoch;
    }
    return perm_[g % n_];
  }

  // Distinct examples touched by the first `steps` steps.
  std::set<std::size_t> consumed(std::size_t steps) {
    std::set<std::size_t> out;
    for (std::size_t s = 0; s < steps && out.size() < n_; ++s)
      for (std::size_t b = 0; b < batch_; ++b) out.insert(index(s, b));
    return out;
  }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = SIZE_MAX;
  std::vector<std::size_t> perm_;
};

template <class T>
std::vector<std::vector<T>> snapshot(const std::vector<NamedTensor<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& [n, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

// Largest absolute change; any bit difference (including -0 vs 0 or NaN)
// counts as at least the smallest positive value.
template <class T>
double max_abs_delta(const std::vector<NamedTensor<T>>& params, const std::vector<std::vector<T>>& before) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto now = params[i].second.data();
    if (std::memcmp(now.data(), before[i].data(), now.size() * sizeof(T)) == 0) continue;
    for (std::size_t j = 0; j < now.size(); ++j) {
      if (std::memcmp(&now[j], &before[i][j], sizeof(T)) != 0) {
        const double d = std::abs(double(now[j]) - double(before[i][j]));
        worst = std::max(worst, std::isnan(d) || d == 0.0 ? std::numeric_limits<double>::denorm_min() : d);
      }
    }
  }
  return worst;
}

template <class T>
std::vector<NamedTensor<T>> vl_trainable(const LanguageModel<T>& lm, const VisualFrontend<T>& fe) {
  auto all = fe.parameters();
  all.insert(all.end(), lm.adaptor_parameters().begin(), lm.adaptor_parameters().end());
  return all;
}

template <class T>
std::string vl_fingerprint(const LanguageModel<T>& lm, const VisualFrontend<T>& fe, const std::string& variant,
                           const std::string& suffix = "") {
  return fe.fingerprint() + "|" + lm.fingerprint() + "|variant:" + variant + suffix;
}

// Prefix-LM training of the frontend (and adaptors when enabled) on captions
// of the first floor(fraction * N) scenes. Base LM weights are excluded from
// the graph and audited bitwise afterwards.
template <class T>
VLStats vl_train(LanguageModel<T>& lm, VisualFrontend<T>& fe, const std::vector<SceneSpec>& scenes,
                 const Vocabulary& vocab, const VLTrainConfig& cfg, std::uint64_t seed, const TrainIO& io = {},
                 const std::string& variant = "frozen_lm") {
  cfg.validate();
  if (cfg.adaptors != lm.has_adaptors()) {
    throw ConfigError(cfg.adaptors ? "with_adaptors variant needs attach_adaptors first"
                                   : "frozen_lm variant must not carry adaptors");
  }
  if (fe.config().d_language != lm.config().d_model) {
    throw ConfigError("frontend D_l " + std::to_string(fe.config().d_language) + " differs from LM d_model " +
                      std::to_string(lm.config().d_model));
  }
  lm.set_base_trainable(false);
  Adam<T> opt(AdamOptions{0.9, 0.999, 1e-8, cfg.clip_norm});
  opt.add_group({"prefix", fe.prefix_parameters(), cfg.lr_prefix, false});
  opt.add_group({"encoder", fe.encoder_parameters(), cfg.lr_encoder, false});
  opt.add_group({"lm", lm.parameters(), cfg.lr_prefix, true});
  if (cfg.adaptors) opt.add_group({"adaptors", lm.adaptor_parameters(), cfg.lr_adaptor, false});

  const auto before = snapshot(lm.parameters());
  auto trainable = vl_trainable(lm, fe);
  const auto fp = vl_fingerprint(lm, fe, variant, io.fingerprint_suffix);

  VLStats stats;
  stats.subset_size = caption_subset_size(scenes.size(), cfg.fraction);
  std::size_t start = 0;
  const bool resumed = detail::try_resume(io, fp, trainable, opt, start);
  stats.start_step = start;
  JsonlLog log = io.log.empty() ? JsonlLog() : JsonlLog(io.log, resumed);

  CaptionSchedule schedule(stats.subset_size, cfg.batch, seed);
  std::vector<std::optional<Tensor<T>>> patch_cache(stats.subset_size);
  std::vector<std::string> caption_cache(stats.subset_size);
  nlohmann::json lrs = {{"prefix", cfg.lr_prefix}, {"encoder", cfg.lr_encoder}};
  if (cfg.adaptors) lrs["adaptors"] = cfg.lr_adaptor;

  for (std::size_t step = start; step < cfg.steps; ++step) {
    opt.zero_grad();
    Tensor<T> total;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto idx = schedule.index(step, b);
      if (!patch_cache[idx]) {
        patch_cache[idx] = patchify<T>(render(scenes[idx]), fe.config());
        caption_cache[idx] = caption(scenes[idx]);
      }
      auto visual = fe.prefix(fe.encode_patches(*patch_cache[idx]));
      auto prompt = build_caption_prompt(vocab, visual, caption_cache[idx], lm.config().max_seq_len);
      auto l = prompt_loss(lm, prompt);
      total = b == 0 ? l : add(total, l);
    }
    total = scale(total, T(1) / T(cfg.batch));
    detail::check_finite(total, "vl", step);
    total.backward();
    const double gnorm = opt.step();
    stats.losses.push_back(double(total.item()));
    log.write({{"stage", "vl"}, {"variant", variant}, {"step", step + 1}, {"loss", double(total.item())},
               {"grad_norm", gnorm}, {"lr", lrs}});
    if (io.checkpoint_every && (step + 1) % io.checkpoint_every == 0 && step + 1 < cfg.steps) {
      log.flush();
      detail::save_resume(io, fp, trainable, opt);
    }
  }
  stats.steps_done = cfg.steps;
  opt.set_step_count(cfg.steps);
  detail::save_resume(io, fp, trainable, opt);

  stats.max_lm_delta = max_abs_delta(lm.parameters(), before);
  if (stats.max_lm_delta != 0.0) {
    throw AuditError("frozen LM weights changed during VL training (max |delta| = " +
                     std::to_string(stats.max_lm_delta) + ")");
  }
  return stats;
}

}  // namespace metavl
