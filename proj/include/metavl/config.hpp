#pragma once

// Run configuration: plain "key = value" files with `include = <path>`,
// parsed into typed module configs. Later assignments override earlier ones;
// includes are resolved relative to the including file. Environment variables
// may override only the output directory and thread count.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/prompt.hpp"
#include "metavl/rng.hpp"
#include "metavl/scene.hpp"
#include "metavl/training.hpp"
#include "metavl/transformer.hpp"
#include "metavl/visual.hpp"

namespace metavl {

class ConfigMap {
 public:
  void load_file(const std::filesystem::path& path) { load_file(path, 0); }

  void load_string(const std::string& text, const std::string& origin = "<string>",
                   const std::filesystem::path& base = {}) {
    std::istringstream in(text);
    parse(in, origin, base, 0);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

 private:
  void load_file(const std::filesystem::path& path, int depth) {
    if (depth > 16) throw ConfigError("config include depth exceeds 16 at " + path.string());
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    parse(in, path.string(), path.parent_path(), depth);
  }

  void parse(std::istream& in, const std::string& origin, const std::filesystem::path& base, int depth) {
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto eq = line.find('=');
      const auto key = trim(line.substr(0, eq));
      if (eq == std::string::npos) {
        if (!key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
        continue;
      }
      const auto value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
      if (key == "include") {
        load_file(base / value, depth + 1);
      } else {
        values_[key] = value;
      }
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  std::map<std::string, std::string> values_;
};

// One cell of the variant matrix.
struct Variant {
  std::string lm;  // "metavl" or "frozen"
  bool adaptors = false;
  double fraction = 1.0;

  std::string adaptor_name() const { return adaptors ? "with_adaptors" : "frozen_lm"; }
  // Stable identifier used in paths and reports, e.g. "metavl.frozen_lm.f100".
  std::string id() const {
    return lm + "." + adaptor_name() + ".f" + std::to_string(int(std::lround(fraction * 100)));
  }
  std::string label() const {
    std::string s = lm == "metavl" ? "MetaVL" : "Frozen";
    if (adaptors) s += " +adaptors";
    if (fraction != 1.0) s += " " + std::to_string(int(std::lround(fraction * 100))) + "% data";
    return s;
  }
  LMStage lm_stage() const { return lm == "metavl" ? LMStage::kMeta : LMStage::kBaseline; }
};

struct RunConfig {
  std::string profile;
  std::vector<std::uint64_t> seeds;
  LMConfig lm;
  LMTrainConfig pretrain;
  LMTrainConfig meta;  // also the baseline's continued plain training
  DataConfig data;
  VisualFrontendConfig visual;
  VLTrainConfig vl;
  std::size_t adaptor_bottleneck = 0;
  std::vector<std::string> matrix_lms;
  std::vector<bool> matrix_adaptors;
  std::vector<double> matrix_fractions;
  std::vector<std::size_t> shots;
  std::size_t n_eval = 500;
  std::vector<QADataset> datasets;
  std::size_t checkpoint_every = 500;
  std::size_t threads = 1;
  std::filesystem::path out_dir;

  std::vector<Variant> variants() const {
    std::vector<Variant> out;
    for (const auto& l : matrix_lms)
      for (bool a : matrix_adaptors)
        for (double f : matrix_fractions) out.push_back({l, a, f});
    return out;
  }

  // LM stages the matrix needs.
  std::vector<LMStage> lm_stages() const {
    std::vector<LMStage> out;
    for (const auto& l : matrix_lms) out.push_back(l == "metavl" ? LMStage::kMeta : LMStage::kBaseline);
    return out;
  }

  // Canonical "key=value" lines of everything that can change results.
  std::map<std::string, std::string> canonical;

  // Hash of every result-relevant key, optionally restricted to prefixes.
  std::string fingerprint(const std::vector<std::string>& prefixes = {}) const {
    std::string text;
    for (const auto& [k, v] : canonical) {
      bool keep = prefixes.empty();
      for (const auto& p : prefixes) keep = keep || k.rfind(p, 0) == 0;
      if (keep) text += k + "=" + v + "\n";
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      const auto b = cur.find_first_not_of(" \t"), e = cur.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const ConfigMap& m) : m_(m) {}

  const std::string& str(const std::string& key) {
    used_.insert(key);
    return m_.get(key);
  }
  std::size_t size(const std::string& key) { return to_size(key, str(key)); }
  double real(const std::string& key) { return to_real(key, str(key)); }
  bool flag(const std::string& key) { return to_flag(key, str(key)); }

  std::vector<std::string> list(const std::string& key) {
    auto v = split_list(str(key));
    if (v.empty()) throw ConfigError("config key '" + key + "' needs at least one value");
    return v;
  }
  std::vector<std::size_t> sizes(const std::string& key) {
    std::vector<std::size_t> out;
    for (const auto& s : list(key)) out.push_back(to_size(key, s));
    return out;
  }

  // Keys present in the map but never read: almost always typos.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : m_.values())
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  static std::size_t to_size(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError("config key '" + key + "': '" + s + "' is not a count");
    return static_cast<std::size_t>(v);
  }
  static double to_real(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
    return v;
  }
  static bool to_flag(const std::string& key, const std::string& s) {
    if (s == "on" || s == "true" || s == "1") return true;
    if (s == "off" || s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "': '" + s + "' is not on/off");
  }

 private:
  const ConfigMap& m_;
  std::set<std::string> used_;
};

}  // namespace detail

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::size_t> threads;
};

// Typed view of a config map. Flags beat environment variables, which beat
// the file.
inline RunConfig parse_run_config(const ConfigMap& map, const Overrides& ov = {}) {
  detail::Reader r(map);
  RunConfig c;
  c.profile = r.str("profile");
  for (const auto& s : r.list("seeds")) c.seeds.push_back(detail::Reader::to_size("seeds", s));
  if (ov.seed) c.seeds = {*ov.seed};

  c.lm.d_model = r.size("lm.d_model");
  c.lm.n_layers = r.size("lm.n_layers");
  c.lm.n_heads = r.size("lm.n_heads");
  c.lm.max_seq_len = r.size("lm.max_seq_len");

  c.pretrain.steps = r.size("pretrain.steps");
  c.pretrain.batch = r.size("pretrain.batch");
  c.pretrain.lr = r.real("pretrain.lr");
  c.meta.steps = r.size("meta.steps");
  c.meta.batch = r.size("meta.batch");
  c.meta.lr = r.real("meta.lr");
  c.meta.k_min = r.size("meta.k_min");
  c.meta.k_max = r.size("meta.k_max");
  c.pretrain.k_min = c.meta.k_min;
  c.pretrain.k_max = c.meta.k_max;
  c.pretrain.clip_norm = c.meta.clip_norm = r.real("train.clip_norm");

  c.data.grid = r.size("data.grid");
  c.data.caption_count = r.size("data.captions");
  c.data.train_pool = r.size("data.train_pool");
  c.data.test_pool = r.size("data.test_pool");

  c.visual.image_size = c.data.grid * RasterConfig{}.cell;
  c.visual.patch = r.size("visual.patch");
  c.visual.d_visual = r.size("visual.d_visual");
  c.visual.encoder_depth = r.size("visual.encoder_depth");
  c.visual.prefix_hidden = r.size("visual.prefix_hidden");
  c.visual.d_language = c.lm.d_model;

  c.vl.steps = r.size("vl.steps");
  c.vl.batch = r.size("vl.batch");
  c.vl.lr_prefix = r.real("vl.lr_prefix");
  c.vl.lr_encoder = r.real("vl.lr_encoder");
  c.vl.lr_adaptor = r.real("vl.lr_adaptor");
  c.vl.clip_norm = c.meta.clip_norm;
  c.visual.lr_prefix = c.vl.lr_prefix;
  c.visual.lr_encoder = c.vl.lr_encoder;
  c.adaptor_bottleneck = r.size("vl.adaptor_bottleneck");

  c.matrix_lms = r.list("matrix.lms");
  for (const auto& l : c.matrix_lms)
    if (l != "metavl" && l != "frozen") throw ConfigError("matrix.lms: unknown LM '" + l + "' (metavl, frozen)");
  for (const auto& a : r.list("matrix.adaptors")) c.matrix_adaptors.push_back(detail::Reader::to_flag("matrix.adaptors", a));
  for (const auto& f : r.list("matrix.fractions")) c.matrix_fractions.push_back(detail::Reader::to_real("matrix.fractions", f));

  c.shots = r.sizes("eval.shots");
  c.n_eval = r.size("eval.n_eval");
  for (const auto& d : r.list("eval.datasets")) c.datasets.push_back(parse_dataset(d));

  c.checkpoint_every = r.size("run.checkpoint_every");
  c.threads = r.size("run.threads");
  c.out_dir = r.str("run.out_dir");
  if (const char* e = std::getenv("METAVL_OUT_DIR"); e && *e) c.out_dir = e;
  if (const char* e = std::getenv("METAVL_THREADS"); e && *e) c.threads = detail::Reader::to_size("METAVL_THREADS", e);
  if (ov.out_dir) c.out_dir = *ov.out_dir;
  if (ov.threads) c.threads = *ov.threads;

  if (auto extra = r.unused(); !extra.empty()) throw ConfigError("unknown config key '" + extra.front() + "'");

  // Validation across modules.
  if (c.seeds.empty()) throw ConfigError("seed list is empty");
  if (c.threads == 0) throw ConfigError("thread count must be positive");
  c.lm.vocab_size = 1;  // replaced by the real vocabulary size at build time
  c.lm.validate();
  c.pretrain.validate(c.lm);
  c.meta.validate(c.lm);
  c.visual.validate();
  c.vl.validate();
  for (double f : c.matrix_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("matrix.fractions: " + std::to_string(f) + " is outside (0, 1]");
    if (caption_subset_size(c.data.caption_count, f) == 0) throw ConfigError("data fraction leaves no captions");
  }
  if (c.n_eval > c.data.test_pool) {
    throw ConfigError("eval.n_eval " + std::to_string(c.n_eval) + " exceeds data.test_pool " +
                      std::to_string(c.data.test_pool));
  }
  for (auto k : c.shots)
    if (k > c.data.train_pool) throw ConfigError("eval.shots: k=" + std::to_string(k) + " exceeds the train pool");
  // Worst case prompt: longest question "what is left of the <color> <shape> ?"
  // and a two-token answer for every shot.
  const std::size_t kmax = *std::max_element(c.shots.begin(), c.shots.end());
  const std::size_t n = c.visual.num_tokens();
  const auto ind = builtin_vocabulary().tokenize(default_induction()).size();
  const std::vector<std::pair<std::size_t, std::size_t>> worst_shots(kmax, {8, 2});
  const std::size_t worst = icl_prompt_length(ind, n, worst_shots, 8) + 6;
  if (worst > c.lm.max_seq_len) {
    throw ConfigError("eval.shots: k=" + std::to_string(kmax) + " prompts need up to " + std::to_string(worst) +
                      " positions but lm.max_seq_len is " + std::to_string(c.lm.max_seq_len));
  }

  for (const auto& [k, v] : map.values())
    if (k != "run.out_dir" && k != "run.threads" && k != "seeds") c.canonical[k] = v;
  std::string seeds;
  for (auto s : c.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  c.canonical["seeds"] = seeds;
  return c;
}

// Reads <config_dir>/<profile>.cfg, or `explicit_path` when given.
inline RunConfig load_run_config(const std::filesystem::path& config_dir, const std::string& profile,
                                 const std::filesystem::path& explicit_path = {}, const Overrides& ov = {}) {
  std::filesystem::path path = explicit_path;
  if (path.empty()) {
    path = config_dir / (profile + ".cfg");
    if (!std::filesystem::exists(path)) {
      throw ConfigError("no config for profile '" + profile + "' at " + path.string());
    }
  }
  ConfigMap map;
  map.load_file(path);
  return parse_run_config(map, ov);
}

}  // namespace metavl
