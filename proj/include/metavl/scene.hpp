#pragma once

// Synthetic visual world: scenes of colored shapes on a grid, their rasters,
// canonical captions, and three question generators.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/rng.hpp"
#include "metavl/vocab.hpp"

namespace metavl {

enum class ShapeKind : std::uint8_t { kCircle = 0, kSquare = 1, kTriangle = 2 };
enum class ColorKind : std::uint8_t { kRed = 0, kGreen = 1, kBlue = 2, kYellow = 3 };

inline const std::string& shape_word(ShapeKind s) { return lexicon::shapes()[static_cast<std::size_t>(s)]; }
inline const std::string& shape_plural(ShapeKind s) {
  return lexicon::shape_plurals()[static_cast<std::size_t>(s)];
}
inline const std::string& color_word(ColorKind c) { return lexicon::colors()[static_cast<std::size_t>(c)]; }

struct SceneObject {
  ShapeKind shape;
  ColorKind color;
  std::size_t row;
  std::size_t col;
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::size_t grid = 4;
  std::vector<SceneObject> objects;

  static constexpr std::size_t kMaxObjects = 5;

  void validate() const {
    if (grid == 0) throw ConfigError("scene grid must be positive");
    if (objects.size() > kMaxObjects) throw ConfigError("scene has more than 5 objects");
    std::set<std::pair<std::size_t, std::size_t>> cells;
    for (const auto& o : objects) {
      if (o.row >= grid || o.col >= grid) throw ConfigError("scene object outside the grid");
      if (!cells.insert({o.row, o.col}).second) throw ConfigError("two scene objects share a cell");
    }
  }

  // Objects sorted row-major.
  std::vector<SceneObject> ordered() const {
    auto v = objects;
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    return v;
  }

  // Canonical string; equal scenes have equal keys.
  std::string key() const {
    std::string k = std::to_string(grid) + ":";
    for (const auto& o : ordered()) {
      k += std::to_string(o.row) + std::to_string(o.col) + static_cast<char>('a' + static_cast<int>(o.shape)) +
           static_cast<char>('a' + static_cast<int>(o.color)) + ";";
    }
    return k;
  }

  bool operator==(const SceneSpec& o) const { return key() == o.key(); }
};

struct RasterConfig {
  std::size_t cell = 8;
};

// channels x height x width, channel-major, values in [0, 1].
struct ImageRaster {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const ImageRaster&) const = default;
};

inline std::array<float, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::kRed: return {1.f, 0.f, 0.f};
    case ColorKind::kGreen: return {0.f, 1.f, 0.f};
    case ColorKind::kBlue: return {0.f, 0.f, 1.f};
    case ColorKind::kYellow: return {1.f, 1.f, 0.f};
  }
  return {0.f, 0.f, 0.f};
}

// Whether local pixel (y, x) of a cell x cell tile lies in the filled shape.
inline bool stencil(ShapeKind s, std::size_t cell, std::size_t y, std::size_t x) {
  const double c = (double(cell) - 1.0) / 2.0;
  const double dy = double(y) - c, dx = double(x) - c;
  switch (s) {
    case ShapeKind::kCircle: {
      const double r = double(cell) * 0.42;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kSquare:
      return y >= 1 && x >= 1 && y + 1 < cell && x + 1 < cell;
    case ShapeKind::kTriangle: {
      // apex at top row, base on the last inner row
      if (y < 1 || y + 1 >= cell) return false;
      const double frac = double(y - 1) / double(cell - 3);
      return std::abs(dx) <= 0.5 + frac * (c - 0.5);
    }
  }
  return false;
}

inline ImageRaster render(const SceneSpec& scene, const RasterConfig& rc = {}) {
  scene.validate();
  ImageRaster img;
  img.height = img.width = scene.grid * rc.cell;
  img.pixels.assign(img.channels * img.height * img.width, 0.f);
  for (const auto& o : scene.objects) {
    const auto rgb = color_rgb(o.color);
    for (std::size_t y = 0; y < rc.cell; ++y) {
      for (std::size_t x = 0; x < rc.cell; ++x) {
        if (!stencil(o.shape, rc.cell, y, x)) continue;
        const auto py = o.row * rc.cell + y, px = o.col * rc.cell + x;
        for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[(ch * img.height + py) * img.width + px] = rgb[ch];
      }
    }
  }
  return img;
}

inline std::string caption(const SceneSpec& scene) {
  scene.validate();
  if (scene.objects.empty()) throw Error("cannot caption an empty scene");
  std::string out;
  for (const auto& o : scene.ordered()) {
    if (!out.empty()) out += " and ";
    out += "a " + color_word(o.color) + " " + shape_word(o.shape);
  }
  return out;
}

// Uniform object count in [min_objects, max_objects], distinct random cells.
inline SceneSpec random_scene(Rng& rng, std::size_t grid = 4, std::size_t min_objects = 1,
                              std::size_t max_objects = SceneSpec::kMaxObjects) {
  SceneSpec s;
  s.grid = grid;
  const auto n = static_cast<std::size_t>(
      uniform_int(rng, static_cast<std::int64_t>(min_objects), static_cast<std::int64_t>(max_objects)));
  std::vector<std::size_t> cells(grid * grid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i),
                                                         static_cast<std::int64_t>(cells.size()) - 1));
    std::swap(cells[i], cells[j]);
    s.objects.push_back({static_cast<ShapeKind>(uniform_int(rng, 0, 2)), static_cast<ColorKind>(uniform_int(rng, 0, 3)),
                         cells[i] / grid, cells[i] % grid});
  }
  return s;
}

enum class QADataset : std::uint8_t { kAttr = 0, kCount = 1, kRel = 2 };

inline const std::vector<QADataset>& all_qa_datasets() {
  static const std::vector<QADataset> v{QADataset::kAttr, QADataset::kCount, QADataset::kRel};
  return v;
}

inline std::string dataset_name(QADataset d) {
  switch (d) {
    case QADataset::kAttr: return "attr";
    case QADataset::kCount: return "count";
    case QADataset::kRel: return "rel";
  }
  return "?";
}

inline QADataset parse_dataset(const std::string& s) {
  for (auto d : all_qa_datasets())
    if (dataset_name(d) == s) return d;
  throw ConfigError("unknown dataset '" + s + "' (expected attr, count or rel)");
}

struct QAItem {
  SceneSpec scene;
  std::string question;
  std::string answer;
  QADataset dataset = QADataset::kAttr;
  std::size_t id = 0;
};

// Nearest object in the same row strictly to the left of `ref`.
inline const SceneObject* left_neighbor(const SceneSpec& scene, const SceneObject& ref) {
  const SceneObject* best = nullptr;
  for (const auto& o : scene.objects) {
    if (o.row == ref.row && o.col < ref.col && (!best || o.col > best->col)) best = &o;
  }
  return best;
}

// Throws if the scene cannot support the requested question type.
inline QAItem generate_qa(const SceneSpec& scene, QADataset ds, Rng& rng) {
  scene.validate();
  QAItem item;
  item.scene = scene;
  item.dataset = ds;
  auto count_shape = [&](ShapeKind s) {
    return std::count_if(scene.objects.begin(), scene.objects.end(), [&](const auto& o) { return o.shape == s; });
  };
  switch (ds) {
    case QADataset::kAttr: {
      std::vector<const SceneObject*> unique;
      for (const auto& o : scene.ordered()) {
        if (count_shape(o.shape) == 1) {
          for (const auto& src : scene.objects)
            if (src == o) unique.push_back(&src);
        }
      }
      if (unique.empty()) throw Error("attr question needs a shape that appears exactly once");
      const auto* o = unique[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(unique.size()) - 1))];
      item.question = "what color is the " + shape_word(o->shape) + " ?";
      item.answer = color_word(o->color);
      break;
    }
    case QADataset::kCount: {
      const auto s = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
      item.question = "how many " + shape_plural(s) + " ?";
      item.answer = lexicon::number_words()[static_cast<std::size_t>(count_shape(s))];
      break;
    }
    case QADataset::kRel: {
      if (scene.objects.size() < 2) throw Error("rel question needs at least two objects");
      std::vector<SceneObject> refs;
      for (const auto& o : scene.ordered()) {
        const auto same = std::count_if(scene.objects.begin(), scene.objects.end(), [&](const auto& p) {
          return p.shape == o.shape && p.color == o.color;
        });
        if (same == 1) refs.push_back(o);
      }
      if (refs.empty()) throw Error("rel question needs a uniquely described reference object");
      const auto& ref = refs[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(refs.size()) - 1))];
      item.question = "what is left of the " + color_word(ref.color) + " " + shape_word(ref.shape) + " ?";
      const auto* left = left_neighbor(scene, ref);
      item.answer = left ? color_word(left->color) + " " + shape_word(left->shape) : "nothing";
      break;
    }
  }
  return item;
}

// Draws scenes until one supports the question type.
inline QAItem sample_qa(QADataset ds, Rng& rng, std::size_t grid = 4, std::size_t max_attempts = 1000) {
  const std::size_t min_objects = ds == QADataset::kRel ? 2 : 1;
  for (std::size_t i = 0; i < max_attempts; ++i) {
    auto scene = random_scene(rng, grid, min_objects);
    try {
      return generate_qa(scene, ds, rng);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error&) {
    }
  }
  throw Error("could not sample a " + dataset_name(ds) + " question after " + std::to_string(max_attempts) +
              " scenes");
}

struct DataConfig {
  std::size_t grid = 4;
  std::size_t caption_count = 2000;
  std::size_t train_pool = 1000;
  std::size_t test_pool = 500;
};

struct QAPools {
  std::vector<QAItem> train;
  std::vector<QAItem> test;
  std::vector<std::string> candidates;  // unique train answers, sorted
};

struct DataSplits {
  std::vector<SceneSpec> captions;  // VL training scenes, already shuffled
  std::map<QADataset, QAPools> qa;
};

// Deterministic in (config, seed). Every scene is used at most once across
// the caption list and all pools.
inline DataSplits build_splits(const DataConfig& cfg, std::uint64_t seed) {
  DataSplits out;
  std::set<std::string> used;
  {
    Rng rng = make_rng(seed, tag("captions"));
    while (out.captions.size() < cfg.caption_count) {
      auto s = random_scene(rng, cfg.grid);
      if (used.insert(s.key()).second) out.captions.push_back(std::move(s));
    }
  }
  for (auto ds : all_qa_datasets()) {
    auto& pools = out.qa[ds];
    Rng rng = make_rng(seed, tag("qa"), static_cast<std::uint64_t>(ds));
    // Test items whose answer is missing from the train pool are redrawn, so
    // every gold answer is a candidate.
    std::set<std::string> answers;
    auto fill = [&](std::vector<QAItem>& pool, std::size_t n, bool need_candidate) {
      std::size_t attempts = 0;
      while (pool.size() < n) {
        if (++attempts > 1000 * n) throw Error("could not fill the " + dataset_name(ds) + " pool");
        auto item = sample_qa(ds, rng, cfg.grid);
        if (need_candidate && !answers.count(item.answer)) continue;
        if (!used.insert(item.scene.key()).second) continue;
        item.id = pool.size();
        pool.push_back(std::move(item));
      }
    };
    if (cfg.test_pool > 0 && cfg.train_pool == 0) throw ConfigError("a test pool needs a nonempty train pool");
    fill(pools.train, cfg.train_pool, false);
    for (const auto& it : pools.train) answers.insert(it.answer);
    fill(pools.test, cfg.test_pool, true);
    pools.candidates.assign(answers.begin(), answers.end());
  }
  return out;
}

// First floor(fraction * N) scenes of the shuffled caption list.
inline std::size_t caption_subset_size(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
  return static_cast<std::size_t>(std::floor(fraction * double(n) + 1e-9));
}

}  // namespace metavl
