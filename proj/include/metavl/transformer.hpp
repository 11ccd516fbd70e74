#pragma once

// Decoder-only transformer whose input rows can be token embeddings or
// externally supplied vectors (visual tokens). Pre-LN GPT-2 layout with tied
// input/output embeddings and learned absolute positions.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/optim.hpp"
#include "metavl/rng.hpp"
#include "metavl/tensor.hpp"
#include "metavl/vocab.hpp"

namespace metavl {

struct LMConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 256;
  std::size_t vocab_size = 0;

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0 || vocab_size == 0) {
      throw ConfigError("LM dims must all be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
  }

  std::string fingerprint() const {
    return "lm:d" + std::to_string(d_model) + ":l" + std::to_string(n_layers) + ":h" +
           std::to_string(n_heads) + ":ctx" + std::to_string(max_seq_len) + ":v" + std::to_string(vocab_size);
  }
};

struct AdaptorConfig {
  bool enabled = false;
  // 0 means d_model / 4.
  std::size_t bottleneck = 0;
};

template <class T>
struct KVCache {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;
  std::size_t length = 0;
};

template <class T>
Tensor<T> random_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(normal(rng) * stddev);
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
class LanguageModel {
 public:
  LanguageModel(LMConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, tag("lm-init")));
    const auto d = cfg_.d_model;
    const double proj_std = 0.02 / std::sqrt(2.0 * double(cfg_.n_layers));
    tok_emb_ = add_param("lm.tok_emb", random_normal<T>({cfg_.vocab_size, d}, 0.02, rng));
    pos_emb_ = add_param("lm.pos_emb", random_normal<T>({cfg_.max_seq_len, d}, 0.01, rng));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto p = "lm.block" + std::to_string(l) + ".";
      Block b;
      b.ln1_g = add_param(p + "ln1.g", Tensor<T>::full({d}, T(1), true));
      b.ln1_b = add_param(p + "ln1.b", Tensor<T>::zeros({d}, true));
      b.w_qkv = add_param(p + "attn.w_qkv", random_normal<T>({d, 3 * d}, 0.02, rng));
      b.b_qkv = add_param(p + "attn.b_qkv", Tensor<T>::zeros({3 * d}, true));
      b.w_o = add_param(p + "attn.w_o", random_normal<T>({d, d}, proj_std, rng));
      b.b_o = add_param(p + "attn.b_o", Tensor<T>::zeros({d}, true));
      b.ln2_g = add_param(p + "ln2.g", Tensor<T>::full({d}, T(1), true));
      b.ln2_b = add_param(p + "ln2.b", Tensor<T>::zeros({d}, true));
      b.w_fc = add_param(p + "mlp.w_fc", random_normal<T>({d, 4 * d}, 0.02, rng));
      b.b_fc = add_param(p + "mlp.b_fc", Tensor<T>::zeros({4 * d}, true));
      b.w_proj = add_param(p + "mlp.w_proj", random_normal<T>({4 * d, d}, proj_std, rng));
      b.b_proj = add_param(p + "mlp.b_proj", Tensor<T>::zeros({d}, true));
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = add_param("lm.lnf.g", Tensor<T>::full({d}, T(1), true));
    lnf_b_ = add_param("lm.lnf.b", Tensor<T>::zeros({d}, true));
  }

  const LMConfig& config() const { return cfg_; }
  std::string fingerprint() const { return cfg_.fingerprint(); }

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::vector<NamedTensor<T>>& adaptor_parameters() { return adaptor_params_; }
  const std::vector<NamedTensor<T>>& adaptor_parameters() const { return adaptor_params_; }
  bool has_adaptors() const { return !adaptor_params_.empty(); }

  const Tensor<T>& token_embeddings() const { return tok_emb_; }

  // Inserts a residual bottleneck after every block. The output projection is
  // zero so the augmented model computes exactly what the base model does.
  void attach_adaptors(const AdaptorConfig& ac, std::uint64_t seed) {
    if (has_adaptors()) throw Error("adaptors are already attached");
    const auto d = cfg_.d_model;
    const auto width = ac.bottleneck ? ac.bottleneck : std::max<std::size_t>(1, d / 4);
    Rng rng(derive_seed(seed, tag("adaptor-init")));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto p = "adaptor.block" + std::to_string(l) + ".";
      auto& b = blocks_[l];
      b.ad_w1 = add_adaptor(p + "w1", random_normal<T>({d, width}, 0.02, rng));
      b.ad_b1 = add_adaptor(p + "b1", Tensor<T>::zeros({width}, true));
      b.ad_w2 = add_adaptor(p + "w2", Tensor<T>::zeros({width, d}, true));
      b.ad_b2 = add_adaptor(p + "b2", Tensor<T>::zeros({d}, true));
    }
    adaptor_width_ = width;
  }
  std::size_t adaptor_width() const { return adaptor_width_; }

  // Sets requires_grad on the base (non-adaptor) weights.
  void set_base_trainable(bool on) {
    for (auto& [n, t] : params_) t.set_requires_grad(on);
  }

  Tensor<T> embed_tokens(const TokenSequence& ids) const { return gather_rows(tok_emb_, ids); }

  // Logits [N, V] for input rows x [N, d_model]. With a cache, rows continue
  // after the cached positions and their keys/values are appended.
  Tensor<T> forward_embeddings(const Tensor<T>& x, KVCache<T>* cache = nullptr) const {
    const auto d = cfg_.d_model;
    if (x.rank() != 2 || x.cols() != d) {
      throw ShapeError("LM input must be [N, " + std::to_string(d) + "], got " + shape_str(x.shape()));
    }
    const std::size_t start = cache ? cache->length : 0;
    const std::size_t n = x.rows();
    if (start + n > cfg_.max_seq_len) throw OverlengthError(start + n, cfg_.max_seq_len, "LM input");
    if (cache && cache->keys.empty()) {
      cache->keys.resize(cfg_.n_layers);
      cache->values.resize(cfg_.n_layers);
    }
    const auto nh = cfg_.n_heads;
    const auto dh = d / nh;
    const T att_scale = T(1) / std::sqrt(T(dh));

    Tensor<T> h = add(x, slice_rows(pos_emb_, start, n));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      auto a = layernorm(h, b.ln1_g, b.ln1_b);
      auto qkv = add_bias(matmul(a, b.w_qkv), b.b_qkv);
      auto q = slice_cols(qkv, 0, d);
      auto k = slice_cols(qkv, d, d);
      auto v = slice_cols(qkv, 2 * d, d);
      if (cache) {
        if (start > 0) {
          k = concat_rows<T>({cache->keys[l], k});
          v = concat_rows<T>({cache->values[l], v});
        }
        cache->keys[l] = k;
        cache->values[l] = v;
      }
      std::vector<Tensor<T>> heads;
      heads.reserve(nh);
      for (std::size_t hd = 0; hd < nh; ++hd) {
        auto qh = slice_cols(q, hd * dh, dh);
        auto kh = slice_cols(k, hd * dh, dh);
        auto vh = slice_cols(v, hd * dh, dh);
        auto att = causal_softmax(scale(matmul_nt(qh, kh), att_scale), start);
        heads.push_back(matmul(att, vh));
      }
      auto o = nh == 1 ? heads[0] : concat_cols(heads);
      h = add(h, add_bias(matmul(o, b.w_o), b.b_o));
      auto m = layernorm(h, b.ln2_g, b.ln2_b);
      m = gelu(add_bias(matmul(m, b.w_fc), b.b_fc));
      h = add(h, add_bias(matmul(m, b.w_proj), b.b_proj));
      if (b.ad_w1) {
        auto z = gelu(add_bias(matmul(h, *b.ad_w1), *b.ad_b1));
        h = add(h, add_bias(matmul(z, *b.ad_w2), *b.ad_b2));
      }
    }
    h = layernorm(h, lnf_g_, lnf_b_);
    if (cache) cache->length = start + n;
    return matmul_nt(h, tok_emb_);
  }

  // Logits [(n + m), V] for an optional prefix of n embedding rows followed by
  // m tokens.
  Tensor<T> forward(const std::optional<Tensor<T>>& prefix, const TokenSequence& tokens) const {
    std::vector<Tensor<T>> parts;
    std::size_t n = 0;
    if (prefix) {
      n += prefix->rows();
      parts.push_back(*prefix);
    }
    n += tokens.size();
    if (n == 0) throw ShapeError("LM forward needs at least one input position");
    if (n > cfg_.max_seq_len) throw OverlengthError(n, cfg_.max_seq_len, "LM input");
    if (!tokens.empty()) parts.push_back(embed_tokens(tokens));
    return forward_embeddings(parts.size() == 1 ? parts[0] : concat_rows(parts));
  }

  // Mean of the input-embedding rows of the text's tokens.
  std::vector<T> embed_text(const Vocabulary& vocab, std::string_view text) const {
    return embed_ids(vocab.tokenize(text));
  }

  std::vector<T> embed_ids(const TokenSequence& ids) const {
    if (ids.empty()) throw Error("embed_text: empty text");
    const auto d = cfg_.d_model;
    std::vector<T> out(d, T{0});
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) throw VocabularyError("<id>");
      const T* row = tok_emb_.data().data() + static_cast<std::size_t>(id) * d;
      for (std::size_t c = 0; c < d; ++c) out[c] += row[c];
    }
    for (auto& x : out) x /= T(ids.size());
    return out;
  }

 private:
  struct Block {
    Tensor<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    std::optional<Tensor<T>> ad_w1, ad_b1, ad_w2, ad_b2;
  };

  Tensor<T> add_param(std::string name, Tensor<T> t) {
    params_.emplace_back(std::move(name), t);
    return t;
  }
  Tensor<T> add_adaptor(std::string name, Tensor<T> t) {
    adaptor_params_.emplace_back(std::move(name), t);
    return t;
  }

  LMConfig cfg_;
  Tensor<T> tok_emb_, pos_emb_, lnf_g_, lnf_b_;
  std::vector<Block> blocks_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> adaptor_params_;
  std::size_t adaptor_width_ = 0;
};

// Targets and mask for next-token scoring: logits row j is scored against
// position j + 1 when that position is supervised.
struct NextTokenTargets {
  std::vector<std::int32_t> targets;
  std::vector<bool> mask;
};

// positions[j] is the token id at input position j, or -1 for a non-token
// (visual) position. supervised[j] marks positions whose token is a target.
inline NextTokenTargets shift_targets(const std::vector<std::int32_t>& positions,
                                      const std::vector<bool>& supervised) {
  if (positions.size() != supervised.size()) throw ShapeError("shift_targets: length mismatch");
  NextTokenTargets out;
  const auto n = positions.size();
  out.targets.assign(n, tok::kPad);
  out.mask.assign(n, false);
  for (std::size_t j = 0; j + 1 < n; ++j) {
    if (supervised[j + 1]) {
      if (positions[j + 1] < 0) throw Error("shift_targets: supervised position holds no token");
      out.targets[j] = positions[j + 1];
      out.mask[j] = true;
    }
  }
  return out;
}

}  // namespace metavl
