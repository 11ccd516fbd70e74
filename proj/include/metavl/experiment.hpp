#pragma once

// Experiment orchestration: data preparation, the LM and VL training stages,
// evaluation of the variant matrix, metrics export and reports. Every stage
// writes under one output directory, skips work whose artifacts already match
// the current config, and names the missing stage when a dependency is absent.
//
//   vocab.txt, task_suite.json
//   data/seed-<s>/{manifest.json, captions.jsonl, qa-<ds>.jsonl, fraction-<pct>.json}
//   models/seed-<s>/{pretrain,meta,baseline}.ckpt (+ .done.json)
//   models/seed-<s>/vl-<variant>.ckpt (+ .done.json, .audit.json)
//   logs/seed-<s>/*.jsonl
//   eval/seed-<s>/<variant>/<ds>-k<k>.{json,jsonl}
//   metrics.json, metrics.csv, run_info.json, report/

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metavl/checkpoint.hpp"
#include "metavl/config.hpp"
#include "metavl/errors.hpp"
#include "metavl/harness.hpp"
#include "metavl/scene.hpp"
#include "metavl/tasks.hpp"
#include "metavl/training.hpp"
#include "metavl/visual.hpp"
#include "metavl/vocab.hpp"

#ifndef METAVL_BUILD_ID
#define METAVL_BUILD_ID "unknown"
#endif

namespace metavl {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kMetricsSchema = "metavl.metrics/1";

// ---------------------------------------------------------------------------
// Small file helpers

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string file_checksum(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

// Write to a sibling temp file, then rename, so readers never see half a file.
inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

// Fixed-precision decimal, so exported numbers are stable text.
inline std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex m;
  std::size_t next = 0;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lk(m);
          if (err || next >= n) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lk(m);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Statistics used by reports and acceptance

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n < 2
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= double(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(s.n - 1));
  }
  return s;
}

// One-sided sign test: P(X >= positives) for X ~ Binomial(positives +
// negatives, 1/2). Ties are dropped; with no informative pairs p = 1.
inline double sign_test_p(std::size_t positives, std::size_t negatives) {
  const std::size_t n = positives + negatives;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (std::size_t i = positives; i <= n; ++i) {
    double c = 1.0;  // C(n, i), built incrementally in floating point
    for (std::size_t j = 1; j <= i; ++j) c = c * double(n - i + j) / double(j);
    p += c;
  }
  return p / std::pow(2.0, double(n));
}

struct PairedDelta {
  std::vector<double> deltas;  // per seed
  Summary summary;
  std::size_t positives = 0, negatives = 0, ties = 0;
  double p_value = 1.0;
};

inline PairedDelta paired_delta(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("paired comparison over different seed counts");
  PairedDelta d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    d.deltas.push_back(x);
    if (x > 0) ++d.positives;
    else if (x < 0) ++d.negatives;
    else ++d.ties;
  }
  d.summary = summarize(d.deltas);
  d.p_value = sign_test_p(d.positives, d.negatives);
  return d;
}

// Per-seed accuracies keyed by (variant, dataset, k), read from metrics.json.
class MetricsView {
 public:
  explicit MetricsView(const json& metrics) : m_(metrics) {
    for (const auto& s : metrics.at("seeds")) seeds_.push_back(s.get<std::uint64_t>());
    for (const auto& c : metrics.at("cells")) {
      cells_[key(c.at("variant"), c.at("dataset"), c.at("k"))][c.at("seed").get<std::uint64_t>()] =
          c.at("accuracy").get<double>();
    }
  }

  bool has(const std::string& variant, const std::string& ds, std::size_t k) const {
    return cells_.count(key(variant, ds, k)) > 0;
  }

  // Accuracies in seed order.
  std::vector<double> per_seed(const std::string& variant, const std::string& ds, std::size_t k) const {
    auto it = cells_.find(key(variant, ds, k));
    if (it == cells_.end()) throw Error("metrics have no cell " + variant + "/" + ds + "/k" + std::to_string(k));
    std::vector<double> out;
    for (auto s : seeds_) out.push_back(it->second.at(s));
    return out;
  }

  const json& raw() const { return m_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

 private:
  static std::string key(const std::string& v, const std::string& d, std::size_t k) {
    return v + "|" + d + "|" + std::to_string(k);
  }
  const json& m_;
  std::vector<std::uint64_t> seeds_;
  std::map<std::string, std::map<std::uint64_t, double>> cells_;
};

// The two headline comparisons: MetaVL's gain from k_lo to k_hi shots, and
// MetaVL against the frozen baseline at k_hi, on full data without adaptors.
struct TrendResult {
  std::string dataset;
  PairedDelta shot_gain;       // metavl k_hi - metavl k_lo
  PairedDelta meta_vs_frozen;  // metavl k_hi - frozen k_hi
};

struct Trends {
  std::size_t k_lo = 0, k_hi = 0;
  std::string meta_variant, frozen_variant;
  std::vector<TrendResult> per_dataset;

  std::size_t gain_datasets() const {
    return std::size_t(std::count_if(per_dataset.begin(), per_dataset.end(),
                                     [](const TrendResult& t) { return t.shot_gain.summary.mean > 0; }));
  }
  double best_gain_p() const {
    double p = 1.0;
    for (const auto& t : per_dataset) p = std::min(p, t.shot_gain.p_value);
    return p;
  }
  std::size_t meta_wins() const {
    return std::size_t(std::count_if(per_dataset.begin(), per_dataset.end(),
                                     [](const TrendResult& t) { return t.meta_vs_frozen.summary.mean > 0; }));
  }
};

inline Trends compute_trends(const json& metrics) {
  MetricsView view(metrics);
  Trends t;
  std::vector<std::size_t> shots;
  for (const auto& k : metrics.at("shots")) shots.push_back(k.get<std::size_t>());
  if (shots.empty()) throw Error("metrics list no shot counts");
  t.k_lo = *std::min_element(shots.begin(), shots.end());
  t.k_hi = std::count(shots.begin(), shots.end(), 3) ? 3 : *std::max_element(shots.begin(), shots.end());
  t.meta_variant = Variant{"metavl", false, 1.0}.id();
  t.frozen_variant = Variant{"frozen", false, 1.0}.id();
  for (const auto& d : metrics.at("datasets")) {
    const auto ds = d.get<std::string>();
    TrendResult r;
    r.dataset = ds;
    if (view.has(t.meta_variant, ds, t.k_hi)) {
      r.shot_gain = paired_delta(view.per_seed(t.meta_variant, ds, t.k_hi), view.per_seed(t.meta_variant, ds, t.k_lo));
      if (view.has(t.frozen_variant, ds, t.k_hi)) {
        r.meta_vs_frozen =
            paired_delta(view.per_seed(t.meta_variant, ds, t.k_hi), view.per_seed(t.frozen_variant, ds, t.k_hi));
      }
    }
    t.per_dataset.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Task suite and vocabulary exports

inline std::string vocabulary_text(const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < vocab.size(); ++i) out += vocab.word(TokenId(i)) + "\n";
  return out;
}

inline json task_suite_json(const TaskSuite& suite) {
  json fams = json::array();
  for (const auto& f : suite.families) {
    const bool train = std::count(suite.meta_train.begin(), suite.meta_train.end(), f.id) > 0;
    fams.push_back({{"id", f.id}, {"instruction", f.instruction}, {"split", train ? "meta_train" : "held_out"}});
  }
  return {{"families", fams}, {"meta_train", suite.meta_train}, {"held_out", suite.held_out}};
}

// ---------------------------------------------------------------------------
// Experiment

class Experiment {
 public:
  Experiment(RunConfig cfg, std::ostream& progress)
      : cfg_(std::move(cfg)), out_(cfg_.out_dir), progress_(progress), vocab_(builtin_vocabulary()),
        suite_(builtin_task_suite()) {
    if (out_.empty()) throw ConfigError("no output directory (set run.out_dir, METAVL_OUT_DIR or --out-dir)");
    cfg_.lm.vocab_size = vocab_.size();
    cfg_.lm.validate();
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& out_dir() const { return out_; }

  // Paths ------------------------------------------------------------------
  fs::path data_dir(std::uint64_t s) const { return out_ / "data" / seed_dir(s); }
  fs::path model_dir(std::uint64_t s) const { return out_ / "models" / seed_dir(s); }
  fs::path log_dir(std::uint64_t s) const { return out_ / "logs" / seed_dir(s); }
  fs::path eval_dir(std::uint64_t s, const Variant& v) const { return out_ / "eval" / seed_dir(s) / v.id(); }
  fs::path lm_checkpoint(std::uint64_t s, LMStage st) const { return model_dir(s) / (stage_name(st) + ".ckpt"); }
  fs::path vl_checkpoint(std::uint64_t s, const Variant& v) const { return model_dir(s) / ("vl-" + v.id() + ".ckpt"); }
  fs::path audit_path(std::uint64_t s, const Variant& v) const {
    return model_dir(s) / ("vl-" + v.id() + ".audit.json");
  }
  fs::path metrics_path() const { return out_ / "metrics.json"; }
  fs::path report_dir() const { return out_ / "report"; }
  fs::path run_info_path() const { return out_ / "run_info.json"; }

  // Stages -----------------------------------------------------------------
  void prepare() {
    write_file(out_ / "vocab.txt", vocabulary_text(vocab_));
    write_json(out_ / "task_suite.json", task_suite_json(suite_));
    for (auto s : cfg_.seeds) prepare_seed(s);
  }

  // stage: pretrain, meta, baseline, vl or all.
  void train(const std::string& stage = "all") {
    static const std::vector<std::string> known{"pretrain", "meta", "baseline", "vl", "all"};
    if (std::find(known.begin(), known.end(), stage) == known.end()) {
      throw ConfigError("unknown stage '" + stage + "' (pretrain, meta, baseline, vl, all)");
    }
    const bool all = stage == "all";
    if (all || stage != "vl") {
      parallel_for(cfg_.seeds.size(), cfg_.threads, [&](std::size_t i) {
        const auto s = cfg_.seeds[i];
        if (all || stage == "pretrain") train_lm_stage(s, LMStage::kPretrain);
        for (auto st : {LMStage::kMeta, LMStage::kBaseline}) {
          const bool wanted = all ? needs_stage(st) : stage == stage_name(st);
          if (wanted) train_lm_stage(s, st);
        }
      });
    }
    if (all || stage == "vl") {
      const auto units = vl_units();
      parallel_for(units.size(), cfg_.threads, [&](std::size_t i) { train_vl(units[i].first, units[i].second); });
    }
  }

  void evaluate_all() {
    const auto units = vl_units();
    parallel_for(units.size(), cfg_.threads, [&](std::size_t i) { evaluate_variant(units[i].first, units[i].second); });
  }

  // Collects cached results into metrics.json / metrics.csv and returns the
  // metrics object. Never retrains or re-evaluates.
  json collect_metrics() {
    json cells = json::array(), aggregates = json::array(), checkpoints = json::array(), audits = json::array(),
         references = json::array();
    std::string csv = "seed,variant,dataset,k,accuracy,correct,n\n";
    for (auto s : cfg_.seeds) {
      for (const auto& v : cfg_.variants())
        for (auto ds : cfg_.datasets)
          for (auto k : cfg_.shots) {
            const auto p = eval_dir(s, v) / (dataset_name(ds) + "-k" + std::to_string(k) + ".json");
            if (!fs::exists(p)) {
              throw MissingDependencyError("metrics need " + p.string() + "; run `metavl eval` first");
            }
            const auto r = read_json(p);
            cells.push_back({{"seed", s}, {"variant", v.id()}, {"dataset", dataset_name(ds)}, {"k", k},
                             {"accuracy", r.at("accuracy")}, {"correct", r.at("correct")}, {"n", r.at("n")}});
            csv += std::to_string(s) + "," + v.id() + "," + dataset_name(ds) + "," + std::to_string(k) + "," +
                   fixed(r.at("accuracy").get<double>(), 6) + "," + std::to_string(r.at("correct").get<std::size_t>()) +
                   "," + std::to_string(r.at("n").get<std::size_t>()) + "\n";
          }
      for (auto st : stages_in_use()) checkpoints.push_back(checkpoint_entry(s, stage_name(st), lm_checkpoint(s, st)));
      for (const auto& v : cfg_.variants()) {
        checkpoints.push_back(checkpoint_entry(s, "vl-" + v.id(), vl_checkpoint(s, v)));
        auto a = read_json(audit_path(s, v));
        a["seed"] = s;
        a["variant"] = v.id();
        audits.push_back(a);
      }
      const auto splits = build_splits(cfg_.data, s);
      for (auto ds : cfg_.datasets) {
        references.push_back(
            {{"seed", s}, {"dataset", dataset_name(ds)}, {"majority_answer_accuracy", majority_accuracy(splits.qa.at(ds))}});
      }
    }
    // Aggregates over seeds, in variant/dataset/k order.
    for (const auto& v : cfg_.variants())
      for (auto ds : cfg_.datasets)
        for (auto k : cfg_.shots) {
          std::vector<double> xs;
          for (const auto& c : cells)
            if (c["variant"] == v.id() && c["dataset"] == dataset_name(ds) && c["k"] == k)
              xs.push_back(c["accuracy"].get<double>());
          const auto sm = summarize(xs);
          aggregates.push_back({{"variant", v.id()}, {"dataset", dataset_name(ds)}, {"k", k}, {"mean", sm.mean},
                                {"std", sm.std}, {"n", sm.n}});
        }
    json variants = json::array();
    for (const auto& v : cfg_.variants())
      variants.push_back({{"id", v.id()}, {"label", v.label()}, {"lm", v.lm}, {"adaptors", v.adaptors},
                          {"fraction", v.fraction}});
    json datasets = json::array();
    for (auto ds : cfg_.datasets) datasets.push_back(dataset_name(ds));
    json metrics = {{"schema", kMetricsSchema},
                    {"build", METAVL_BUILD_ID},
                    {"profile", cfg_.profile},
                    {"config_fingerprint", cfg_.fingerprint()},
                    {"seeds", cfg_.seeds},
                    {"shots", cfg_.shots},
                    {"n_eval", cfg_.n_eval},
                    {"datasets", datasets},
                    {"variants", variants},
                    {"cells", cells},
                    {"aggregates", aggregates},
                    {"majority_baseline", references},
                    {"checkpoints", checkpoints},
                    {"vl_audits", audits}};
    write_json(metrics_path(), metrics);
    write_file(out_ / "metrics.csv", csv);
    return metrics;
  }

  void report() {
    const auto metrics = collect_metrics();
    write_reports(metrics);
  }

  void run() {
    const auto t0 = std::chrono::steady_clock::now();
    prepare();
    train("all");
    evaluate_all();
    report();
    record_duration("total", seconds_since(t0));
  }

  // Seconds spent per stage, as recorded in run_info.json.
  json run_info() const { return fs::exists(run_info_path()) ? read_json(run_info_path()) : json::object(); }

 private:
  static std::string seed_dir(std::uint64_t s) { return "seed-" + std::to_string(s); }
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  void say(const std::string& msg) {
    std::lock_guard lk(mu_);
    progress_ << "[metavl] " << msg << std::endl;
  }

  // run_info.json is the only file with wall-clock data; metrics stay
  // byte-reproducible.
  void record_duration(const std::string& key, double secs) {
    std::lock_guard lk(mu_);
    json info = fs::exists(run_info_path()) ? read_json(run_info_path()) : json::object();
    const auto now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    if (!info.contains("started")) info["started"] = stamp;
    info["updated"] = stamp;
    info["build"] = METAVL_BUILD_ID;
    info["threads"] = cfg_.threads;
    info["profile"] = cfg_.profile;
    info["durations_s"][key] = secs;
    write_json(run_info_path(), info);
  }

  bool needs_stage(LMStage st) const {
    const auto s = cfg_.lm_stages();
    return std::find(s.begin(), s.end(), st) != s.end();
  }

  std::vector<LMStage> stages_in_use() const {
    std::vector<LMStage> out{LMStage::kPretrain};
    for (auto st : {LMStage::kMeta, LMStage::kBaseline})
      if (needs_stage(st)) out.push_back(st);
    return out;
  }

  std::vector<std::pair<std::uint64_t, Variant>> vl_units() const {
    std::vector<std::pair<std::uint64_t, Variant>> out;
    for (auto s : cfg_.seeds)
      for (const auto& v : cfg_.variants()) out.emplace_back(s, v);
    return out;
  }

  // Fingerprints tie each artifact to exactly the settings it depends on.
  std::string data_fp(std::uint64_t s) const { return cfg_.fingerprint({"data."}) + "|seed:" + std::to_string(s); }
  std::string lm_fp_suffix(std::uint64_t s, LMStage st) const {
    std::vector<std::string> keys{"lm.", "pretrain.", "train.", "meta.k_"};
    if (st != LMStage::kPretrain) keys.push_back("meta.");
    return "|cfg:" + cfg_.fingerprint(keys) + "|seed:" + std::to_string(s) + "|suite:" + suite_fp();
  }
  std::string vl_fp_suffix(std::uint64_t s, const Variant& v) const {
    return lm_fp_suffix(s, v.lm_stage()) + "|vlcfg:" + cfg_.fingerprint({"data.", "visual.", "vl."}) +
           "|fraction:" + fixed(v.fraction, 6);
  }
  std::string suite_fp() const { return hex64(fnv1a64(task_suite_json(suite_).dump())); }

  // Done markers record the fingerprint and checkpoint checksum of a finished
  // stage; anything else means the stage must (re)run.
  static bool stage_done(const fs::path& ckpt, const std::string& fp) {
    const fs::path marker = ckpt.string() + ".done.json";
    if (!fs::exists(marker) || !fs::exists(ckpt)) return false;
    const auto m = read_json(marker);
    return m.value("fingerprint", "") == fp && m.value("checksum", "") == file_checksum(ckpt);
  }
  static void mark_done(const fs::path& ckpt, const std::string& fp, json extra = json::object()) {
    extra["fingerprint"] = fp;
    extra["checksum"] = file_checksum(ckpt);
    write_json(ckpt.string() + ".done.json", extra);
  }

  json checkpoint_entry(std::uint64_t s, const std::string& name, const fs::path& p) const {
    if (!fs::exists(p)) throw MissingDependencyError("metrics need checkpoint " + p.string());
    const auto m = read_json(p.string() + ".done.json");
    return {{"seed", s}, {"name", name}, {"file", fs::relative(p, out_).generic_string()},
            {"fingerprint", hex64(fnv1a64(m.at("fingerprint").get<std::string>()))},
            {"config_fingerprint", cfg_.fingerprint()}, {"checksum", m.at("checksum")}};
  }

  static double majority_accuracy(const QAPools& pools) {
    std::map<std::string, std::size_t> counts;
    for (const auto& it : pools.train) ++counts[it.answer];
    std::string best;
    std::size_t n = 0;
    for (const auto& [a, c] : counts)
      if (c > n) best = a, n = c;
    std::size_t hit = 0;
    for (const auto& it : pools.test) hit += it.answer == best;
    return pools.test.empty() ? 0.0 : double(hit) / double(pools.test.size());
  }

  // prepare --------------------------------------------------------------------
  void prepare_seed(std::uint64_t s) {
    const auto dir = data_dir(s);
    const auto fp = data_fp(s);
    if (fs::exists(dir / "manifest.json") && verify_manifest(s, false)) {
      say("prepare seed " + std::to_string(s) + ": up to date");
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto splits = build_splits(cfg_.data, s);
    json files = json::object();
    auto emit = [&](const std::string& name, const std::string& content) {
      write_file(dir / name, content);
      files[name] = hex64(fnv1a64(content));
    };
    std::string caps;
    for (std::size_t i = 0; i < splits.captions.size(); ++i) {
      caps += json({{"index", i}, {"scene", splits.captions[i].key()}, {"caption", caption(splits.captions[i])}}).dump() +
              "\n";
    }
    emit("captions.jsonl", caps);
    for (auto ds : all_qa_datasets()) {
      std::string lines;
      const auto& pools = splits.qa.at(ds);
      for (const auto* split : {&pools.train, &pools.test})
        for (const auto& it : *split) {
          lines += json({{"split", split == &pools.train ? "train" : "test"}, {"id", it.id},
                         {"scene", it.scene.key()}, {"question", it.question}, {"answer", it.answer}})
                       .dump() +
                   "\n";
        }
      emit("qa-" + dataset_name(ds) + ".jsonl", lines);
    }
    for (double f : cfg_.matrix_fractions) {
      const auto n = caption_subset_size(splits.captions.size(), f);
      json keys = json::array();
      for (std::size_t i = 0; i < n; ++i) keys.push_back(splits.captions[i].key());
      emit("fraction-" + std::to_string(int(std::lround(f * 100))) + ".json",
           json({{"fraction", f}, {"subset_size", n}, {"of", splits.captions.size()}, {"scenes", keys}}).dump(2) +
               "\n");
    }
    write_json(dir / "manifest.json", {{"fingerprint", fp}, {"seed", s}, {"files", files}});
    record_duration(seed_dir(s) + "/prepare", seconds_since(t0));
    say("prepare seed " + std::to_string(s) + ": wrote " + std::to_string(files.size()) + " files");
  }

  // True when the manifest matches this config and every file checksum holds.
  bool verify_manifest(std::uint64_t s, bool throw_on_missing) const {
    const auto dir = data_dir(s);
    if (!fs::exists(dir / "manifest.json")) {
      if (throw_on_missing) {
        throw MissingDependencyError("seed " + std::to_string(s) + " has no prepared data in " + dir.string() +
                                     "; run `metavl prepare` first");
      }
      return false;
    }
    const auto m = read_json(dir / "manifest.json");
    bool ok = m.value("fingerprint", "") == data_fp(s);
    for (const auto& [name, sum] : m.at("files").items())
      ok = ok && fs::exists(dir / name) && file_checksum(dir / name) == sum.get<std::string>();
    if (!ok && throw_on_missing) {
      throw MissingDependencyError("prepared data in " + dir.string() +
                                   " does not match the config; run `metavl prepare` again");
    }
    return ok;
  }

  // train ----------------------------------------------------------------------
  void load_lm(LanguageModel<float>& lm, std::uint64_t s, LMStage st) const {
    const auto path = lm_checkpoint(s, st);
    const auto fp = lm_stage_fingerprint(lm, st, lm_fp_suffix(s, st));
    if (!stage_done(path, fp)) {
      throw MissingDependencyError("seed " + std::to_string(s) + " needs a finished " + stage_name(st) +
                                   " checkpoint at " + path.string() + "; run `metavl train --stage " +
                                   stage_name(st) + "` first");
    }
    auto ck = load_checkpoint<float>(path);
    restore_checkpoint(ck, fp, lm.parameters());
  }

  void train_lm_stage(std::uint64_t s, LMStage st) {
    const auto path = lm_checkpoint(s, st);
    LanguageModel<float> lm(cfg_.lm, s);
    const auto suffix = lm_fp_suffix(s, st);
    const auto fp = lm_stage_fingerprint(lm, st, suffix);
    const auto tag = "seed " + std::to_string(s) + " " + stage_name(st);
    if (stage_done(path, fp)) {
      say(tag + ": up to date");
      return;
    }
    if (st != LMStage::kPretrain) {
      // Both continuations start from the pretrained weights.
      LanguageModel<float> base(cfg_.lm, s);
      load_lm(base, s, LMStage::kPretrain);
      restore_checkpoint(capture_checkpoint(lm.fingerprint(), base.parameters()), lm.fingerprint(), lm.parameters());
    }
    const auto& tc = st == LMStage::kPretrain ? cfg_.pretrain : cfg_.meta;
    say(tag + ": " + std::to_string(tc.steps) + " steps");
    const auto t0 = std::chrono::steady_clock::now();
    TrainIO io{path, log_dir(s) / (stage_name(st) + ".jsonl"), cfg_.checkpoint_every, suffix};
    auto stats = train_lm(lm, suite_, vocab_, st, tc, s, io);
    mark_done(path, fp, {{"steps", stats.steps_done}, {"family_counts", stats.family_counts}});
    record_duration(seed_dir(s) + "/" + stage_name(st), seconds_since(t0));
    say(tag + ": done" + (stats.start_step ? " (resumed at step " + std::to_string(stats.start_step) + ")" : ""));
  }

  // The variant's LM, with adaptors attached when the variant uses them.
  void load_variant_lm(std::uint64_t s, const Variant& v, LanguageModel<float>& lm) const {
    load_lm(lm, s, v.lm_stage());
    if (v.adaptors) lm.attach_adaptors(AdaptorConfig{true, cfg_.adaptor_bottleneck}, s);
  }

  void train_vl(std::uint64_t s, const Variant& v) {
    verify_manifest(s, true);
    LanguageModel<float> lm(cfg_.lm, s);
    VisualFrontend<float> fe(cfg_.visual, s);
    load_variant_lm(s, v, lm);
    const auto path = vl_checkpoint(s, v);
    const auto suffix = vl_fp_suffix(s, v);
    const auto fp = vl_fingerprint(lm, fe, v.adaptor_name(), suffix);
    const auto tag = "seed " + std::to_string(s) + " vl " + v.id();
    if (stage_done(path, fp) && fs::exists(audit_path(s, v))) {
      say(tag + ": up to date");
      return;
    }
    VLTrainConfig vc = cfg_.vl;
    vc.fraction = v.fraction;
    vc.adaptors = v.adaptors;
    const auto splits = build_splits(cfg_.data, s);
    const auto lm_sum_before = params_checksum(lm.parameters());
    say(tag + ": " + std::to_string(vc.steps) + " steps on " +
        std::to_string(caption_subset_size(splits.captions.size(), vc.fraction)) + " captions");
    const auto t0 = std::chrono::steady_clock::now();
    TrainIO io{path, log_dir(s) / ("vl-" + v.id() + ".jsonl"), cfg_.checkpoint_every, suffix};
    auto stats = vl_train(lm, fe, splits.captions, vocab_, vc, s, io, v.adaptor_name());
    const auto lm_sum_after = params_checksum(lm.parameters());
    if (lm_sum_before != lm_sum_after) throw AuditError(tag + ": LM checksum changed during VL training");

    CaptionSchedule sched(stats.subset_size, vc.batch, s);
    const auto used = sched.consumed(vc.steps);
    write_json(audit_path(s, v), {{"subset_size", stats.subset_size},
                                  {"caption_pool", splits.captions.size()},
                                  {"distinct_consumed", used.size()},
                                  {"max_index_consumed", used.empty() ? 0 : *used.rbegin()},
                                  {"max_lm_delta", stats.max_lm_delta},
                                  {"lm_checksum_before", lm_sum_before},
                                  {"lm_checksum_after", lm_sum_after}});
    mark_done(path, fp, {{"steps", stats.steps_done}});
    record_duration(seed_dir(s) + "/vl-" + v.id(), seconds_since(t0));
    say(tag + ": done");
  }

  static std::string params_checksum(const std::vector<NamedTensor<float>>& ps) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : ps) {
      h = fnv1a64(name, h);
      const auto& d = t.data();
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float)), h);
    }
    return hex64(h);
  }

  // eval -----------------------------------------------------------------------
  void evaluate_variant(std::uint64_t s, const Variant& v) {
    verify_manifest(s, true);
    LanguageModel<float> lm(cfg_.lm, s);
    VisualFrontend<float> fe(cfg_.visual, s);
    load_variant_lm(s, v, lm);
    const auto path = vl_checkpoint(s, v);
    const auto fp = vl_fingerprint(lm, fe, v.adaptor_name(), vl_fp_suffix(s, v));
    if (!stage_done(path, fp)) {
      throw MissingDependencyError("seed " + std::to_string(s) + " variant " + v.id() + " needs " + path.string() +
                                   "; run `metavl train --stage vl` first");
    }
    const auto eval_fp = hex64(fnv1a64(fp + "|n_eval:" + std::to_string(cfg_.n_eval) + "|ck:" + file_checksum(path)));
    // Skip the whole variant when every cell is cached.
    bool all_cached = true;
    for (auto ds : cfg_.datasets)
      for (auto k : cfg_.shots) all_cached = all_cached && cell_cached(s, v, ds, k, eval_fp);
    const auto tag = "seed " + std::to_string(s) + " eval " + v.id();
    if (all_cached) {
      say(tag + ": up to date");
      return;
    }

    {
      auto trainable = vl_trainable(lm, fe);
      restore_checkpoint(load_checkpoint<float>(path), fp, trainable);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto splits = build_splits(cfg_.data, s);
    VisualLanguageModel<float> model(lm, fe, vocab_);
    const auto emb = lm_embedder(lm, vocab_);
    for (auto ds : cfg_.datasets) {
      const auto& pools = splits.qa.at(ds);
      model.warm(pools.train);
      model.warm(pools.test);
      const CandidateAnswerSet cands(pools.candidates, emb);
      for (auto k : cfg_.shots) {
        if (cell_cached(s, v, ds, k, eval_fp)) continue;
        // Seed-level parallelism already fills the workers.
        const auto r = evaluate(model, pools, ds, k, cfg_.n_eval, s, cands, emb, 1);
        std::string lines;
        std::size_t correct = 0;
        for (const auto& rec : r.records) {
          correct += rec.correct;
          lines += json({{"query_id", rec.query_id}, {"k", rec.k}, {"shot_ids", rec.shot_ids},
                         {"generation", rec.generation}, {"matched", rec.matched}, {"gold", rec.gold},
                         {"correct", rec.correct}})
                       .dump() +
                   "\n";
        }
        const auto base = eval_dir(s, v) / (dataset_name(ds) + "-k" + std::to_string(k));
        write_file(base.string() + ".jsonl", lines);
        write_json(base.string() + ".json", {{"fingerprint", eval_fp}, {"dataset", dataset_name(ds)}, {"k", k},
                                              {"n", r.records.size()}, {"correct", correct},
                                              {"accuracy", r.accuracy}});
      }
    }
    record_duration(seed_dir(s) + "/eval-" + v.id(), seconds_since(t0));
    say(tag + ": done");
  }

  bool cell_cached(std::uint64_t s, const Variant& v, QADataset ds, std::size_t k, const std::string& fp) const {
    const auto p = eval_dir(s, v) / (dataset_name(ds) + "-k" + std::to_string(k) + ".json");
    return fs::exists(p) && read_json(p).value("fingerprint", "") == fp;
  }

  // report ---------------------------------------------------------------------
  void write_reports(const json& metrics) {
    const auto dir = report_dir();
    std::map<std::string, double> majority;
    for (const auto& r : metrics.at("majority_baseline")) majority[r.at("dataset")] += r.at("majority_answer_accuracy").get<double>();
    for (auto& [d, v] : majority) v /= double(cfg_.seeds.size());

    for (auto ds : cfg_.datasets) {
      const auto name = dataset_name(ds);
      std::string md = "# " + name + "\n\nAccuracy, mean ± sample std over " + std::to_string(cfg_.seeds.size()) +
                       " seed(s), " + std::to_string(cfg_.n_eval) + " test items per cell.\n\n| Variant |";
      std::string sep = "|---|";
      for (auto k : cfg_.shots) {
        md += " k=" + std::to_string(k) + " |";
        sep += "---|";
      }
      md += "\n" + sep + "\n";
      std::string csv = "variant,label,k,mean,std,n\n";
      for (const auto& v : cfg_.variants()) {
        md += "| " + v.label() + " |";
        for (auto k : cfg_.shots) {
          for (const auto& a : metrics.at("aggregates")) {
            if (a["variant"] != v.id() || a["dataset"] != name || a["k"] != k) continue;
            const double mean = a["mean"], sd = a["std"];
            md += " " + fixed(mean, 3) + " ± " + fixed(sd, 3) + " |";
            csv += v.id() + "," + v.label() + "," + std::to_string(k) + "," + fixed(mean, 6) + "," + fixed(sd, 6) + "," +
                   std::to_string(a["n"].get<std::size_t>()) + "\n";
          }
        }
        md += "\n";
      }
      md += "\nMajority-answer reference: " + fixed(majority[name], 3) + ".\n";
      write_file(dir / (name + ".md"), md);
      write_file(dir / (name + ".csv"), csv);
    }
    write_file(dir / "trends.md", trends_markdown(compute_trends(metrics), metrics));
  }

  std::string trends_markdown(const Trends& t, const json& metrics) const {
    auto seeds_str = [](const PairedDelta& d) {
      std::string s;
      for (double x : d.deltas) s += (s.empty() ? "" : ", ") + fixed(x, 3);
      return s;
    };
    std::string md = "# Trends\n\nDeltas are per-seed differences; p is a one-sided sign test with ties dropped.\n\n";
    md += "## Shot gain: " + t.meta_variant + ", k=" + std::to_string(t.k_hi) + " minus k=" + std::to_string(t.k_lo) +
          "\n\n| Dataset | mean delta | + / - / 0 | p | per seed |\n|---|---|---|---|---|\n";
    for (const auto& r : t.per_dataset) {
      const auto& d = r.shot_gain;
      md += "| " + r.dataset + " | " + fixed(d.summary.mean, 4) + " | " + std::to_string(d.positives) + " / " +
            std::to_string(d.negatives) + " / " + std::to_string(d.ties) + " | " + fixed(d.p_value, 4) + " | " +
            seeds_str(d) + " |\n";
    }
    md += "\nPositive mean on " + std::to_string(t.gain_datasets()) + " of " + std::to_string(t.per_dataset.size()) +
          " datasets; smallest p = " + fixed(t.best_gain_p(), 4) + ".\n";
    md += "\n## MetaVL vs Frozen at k=" + std::to_string(t.k_hi) +
          "\n\n| Dataset | mean delta | + / - / 0 | p | per seed |\n|---|---|---|---|---|\n";
    for (const auto& r : t.per_dataset) {
      const auto& d = r.meta_vs_frozen;
      md += "| " + r.dataset + " | " + fixed(d.summary.mean, 4) + " | " + std::to_string(d.positives) + " / " +
            std::to_string(d.negatives) + " / " + std::to_string(d.ties) + " | " + fixed(d.p_value, 4) + " | " +
            seeds_str(d) + " |\n";
    }
    md += "\nMetaVL ahead on " + std::to_string(t.meta_wins()) + " of " + std::to_string(t.per_dataset.size()) +
          " datasets.\n";

    // Secondary comparisons against the full-data frozen_lm run of the same LM.
    MetricsView view(metrics);
    md += "\n## Other variants at k=" + std::to_string(t.k_hi) + " (mean delta vs same LM, frozen_lm, full data)\n\n";
    md += "| Variant | Dataset | mean delta | p |\n|---|---|---|---|\n";
    for (const auto& v : cfg_.variants()) {
      if (!v.adaptors && v.fraction == 1.0) continue;
      const auto ref = Variant{v.lm, false, 1.0}.id();
      for (const auto& r : t.per_dataset) {
        if (!view.has(v.id(), r.dataset, t.k_hi) || !view.has(ref, r.dataset, t.k_hi)) continue;
        const auto d = paired_delta(view.per_seed(v.id(), r.dataset, t.k_hi), view.per_seed(ref, r.dataset, t.k_hi));
        md += "| " + v.label() + " | " + r.dataset + " | " + fixed(d.summary.mean, 4) + " | " + fixed(d.p_value, 4) +
              " |\n";
      }
    }
    return md;
  }

  RunConfig cfg_;
  fs::path out_;
  std::ostream& progress_;
  Vocabulary vocab_;
  TaskSuite suite_;
  mutable std::mutex mu_;
};

}  // namespace metavl
