#pragma once

// Visual encoder (patch stack, no cross-patch mixing) and visual prefix
// (row-wise two-layer perceptron into the LM embedding space).

#include <cmath>
#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/optim.hpp"
#include "metavl/rng.hpp"
#include "metavl/scene.hpp"
#include "metavl/tensor.hpp"
#include "metavl/transformer.hpp"

namespace metavl {

struct VisualFrontendConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t d_visual = 64;
  std::size_t d_language = 64;
  std::size_t encoder_depth = 2;
  std::size_t prefix_hidden = 64;
  double lr_encoder = 3e-4;
  double lr_prefix = 1e-3;

  std::size_t patches_per_side() const { return image_size / patch; }
  std::size_t num_tokens() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return channels * patch * patch; }

  void validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0) {
      throw ConfigError("patch size " + std::to_string(patch) + " does not tile image size " +
                        std::to_string(image_size));
    }
    if (d_visual == 0 || d_language == 0 || prefix_hidden == 0 || encoder_depth == 0 || channels == 0) {
      throw ConfigError("visual frontend dims must be positive");
    }
  }

  std::string fingerprint() const {
    return "vis:img" + std::to_string(image_size) + ":c" + std::to_string(channels) + ":p" + std::to_string(patch) +
           ":dv" + std::to_string(d_visual) + ":dl" + std::to_string(d_language) + ":depth" +
           std::to_string(encoder_depth) + ":hid" + std::to_string(prefix_hidden);
  }
};

// Non-overlapping patches in row-major patch order, each flattened as
// (channel, y, x) -> [n, channels * patch * patch].
template <class T>
Tensor<T> patchify(const ImageRaster& img, const VisualFrontendConfig& cfg) {
  if (img.channels != cfg.channels || img.height != cfg.image_size || img.width != cfg.image_size) {
    throw ShapeError("image is " + std::to_string(img.channels) + "x" + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + ", frontend expects " + std::to_string(cfg.channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  const auto side = cfg.patches_per_side(), p = cfg.patch;
  std::vector<T> out;
  out.reserve(cfg.num_tokens() * cfg.patch_dim());
  for (std::size_t pr = 0; pr < side; ++pr)
    for (std::size_t pc = 0; pc < side; ++pc)
      for (std::size_t ch = 0; ch < cfg.channels; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) out.push_back(static_cast<T>(img.at(ch, pr * p + y, pc * p + x)));
  return Tensor<T>({cfg.num_tokens(), cfg.patch_dim()}, std::move(out));
}

template <class T>
class VisualFrontend {
 public:
  VisualFrontend(VisualFrontendConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, tag("frontend-init")));
    const auto pd = cfg_.patch_dim(), dv = cfg_.d_visual;
    auto enc = [&](const std::string& name, std::size_t in, std::size_t out) {
      encoder_.emplace_back(name + ".w", random_normal<T>({in, out}, std::sqrt(2.0 / double(in)), rng));
      encoder_.emplace_back(name + ".b", Tensor<T>::zeros({out}, true));
    };
    enc("visual.encoder.patch", pd, dv);
    for (std::size_t i = 1; i < cfg_.encoder_depth; ++i) enc("visual.encoder.layer" + std::to_string(i), dv, dv);
    prefix_.emplace_back("visual.prefix.w1",
                         random_normal<T>({dv, cfg_.prefix_hidden}, std::sqrt(2.0 / double(dv)), rng));
    prefix_.emplace_back("visual.prefix.b1", Tensor<T>::zeros({cfg_.prefix_hidden}, true));
    prefix_.emplace_back("visual.prefix.w2", random_normal<T>({cfg_.prefix_hidden, cfg_.d_language},
                                                              0.5 / std::sqrt(double(cfg_.prefix_hidden)), rng));
    prefix_.emplace_back("visual.prefix.b2", Tensor<T>::zeros({cfg_.d_language}, true));
  }

  const VisualFrontendConfig& config() const { return cfg_; }
  std::string fingerprint() const { return cfg_.fingerprint(); }

  std::vector<NamedTensor<T>>& encoder_parameters() { return encoder_; }
  std::vector<NamedTensor<T>>& prefix_parameters() { return prefix_; }
  const std::vector<NamedTensor<T>>& encoder_parameters() const { return encoder_; }
  const std::vector<NamedTensor<T>>& prefix_parameters() const { return prefix_; }

  std::vector<NamedTensor<T>> parameters() const {
    auto all = encoder_;
    all.insert(all.end(), prefix_.begin(), prefix_.end());
    return all;
  }

  // Feature grid [n, d_visual].
  Tensor<T> encode(const ImageRaster& img) const { return encode_patches(patchify<T>(img, cfg_)); }

  Tensor<T> encode_patches(const Tensor<T>& patches) const {
    if (patches.rank() != 2 || patches.cols() != cfg_.patch_dim()) {
      throw ShapeError("patch matrix " + shape_str(patches.shape()) + " does not match patch dim " +
                       std::to_string(cfg_.patch_dim()));
    }
    Tensor<T> h = patches;
    for (std::size_t i = 0; i < encoder_.size(); i += 2) {
      h = gelu(add_bias(matmul(h, encoder_[i].second), encoder_[i + 1].second));
    }
    return h;
  }

  // Language-space rows [n, d_language] for a feature grid.
  Tensor<T> prefix(const Tensor<T>& grid) const {
    if (grid.rank() != 2 || grid.cols() != cfg_.d_visual) {
      throw ShapeError("feature grid " + shape_str(grid.shape()) + " does not match D_v " +
                       std::to_string(cfg_.d_visual));
    }
    auto h = gelu(add_bias(matmul(grid, prefix_[0].second), prefix_[1].second));
    return add_bias(matmul(h, prefix_[2].second), prefix_[3].second);
  }

  Tensor<T> operator()(const ImageRaster& img) const { return prefix(encode(img)); }

 private:
  VisualFrontendConfig cfg_;
  std::vector<NamedTensor<T>> encoder_;
  std::vector<NamedTensor<T>> prefix_;
};

}  // namespace metavl
