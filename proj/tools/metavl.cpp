// metavl: command-line driver for the experiment pipeline.
//
//   metavl [--profile toy|smoke|...] [--config FILE] [--seed N] [--out-dir DIR]
//          [--threads N] <prepare|train|eval|report|run|selftest>
//
// Exit codes: 0 success, 2 config error, 3 missing dependency,
// 4 assertion or audit failure, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "metavl/config.hpp"
#include "metavl/errors.hpp"
#include "metavl/experiment.hpp"
#include "metavl/oracles/checks.hpp"

#ifndef METAVL_CONFIG_DIR
#define METAVL_CONFIG_DIR "configs"
#endif

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kMissing = 3, kAudit = 4 };

metavl::RunConfig load_config(const std::string& profile, const std::string& config_path,
                              const metavl::Overrides& ov) {
  return metavl::load_run_config(METAVL_CONFIG_DIR, profile, config_path, ov);
}

int selftest() {
  bool ok = true;
  for (const auto& r : metavl::oracles::run_selftests()) {
    std::printf("%s  %-30s %s (%.2fs)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
    ok = ok && r.pass;
  }
  return ok ? kOk : kAudit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MetaVL toy pipeline: meta-trained LM, frozen-LM vision-language training, in-context VQA"};
  app.require_subcommand(1);

  std::string profile = "toy", config_path, stage = "all";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> threads;
  app.add_option("--profile", profile, "config profile under the configs directory")->capture_default_str();
  app.add_option("--config", config_path, "explicit config file (overrides --profile lookup)");
  app.add_option("--seed", seed, "run a single seed instead of the profile's list");
  app.add_option("--out-dir", out_dir, "output directory (beats METAVL_OUT_DIR and run.out_dir)");
  app.add_option("--threads", threads, "worker threads (beats METAVL_THREADS and run.threads)")
      ->check(CLI::PositiveNumber);

  auto* prepare = app.add_subcommand("prepare", "generate data splits, vocabulary and task manifest");
  auto* train = app.add_subcommand("train", "run LM and VL training stages");
  train->add_option("--stage", stage, "pretrain, meta, baseline, vl or all")
      ->check(CLI::IsMember({"pretrain", "meta", "baseline", "vl", "all"}))
      ->capture_default_str();
  auto* eval = app.add_subcommand("eval", "evaluate every variant, dataset and shot count");
  auto* report = app.add_subcommand("report", "export metrics.json/csv and write the report tables");
  auto* run = app.add_subcommand("run", "prepare, train, eval and report in one go");
  auto* self = app.add_subcommand("selftest", "gradient, mask, frozen-LM and matcher oracles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (self->parsed()) return selftest();
    metavl::Overrides ov;
    ov.seed = seed;
    if (out_dir) ov.out_dir = *out_dir;
    ov.threads = threads;
    metavl::Experiment ex(load_config(profile, config_path, ov), std::cerr);
    if (prepare->parsed()) ex.prepare();
    if (train->parsed()) ex.train(stage);
    if (eval->parsed()) ex.evaluate_all();
    if (report->parsed()) {
      ex.report();
      std::cout << "wrote " << ex.metrics_path().string() << " and " << ex.report_dir().string() << "\n";
    }
    if (run->parsed()) {
      ex.run();
      std::cout << "wrote " << ex.metrics_path().string() << " and " << ex.report_dir().string() << "\n";
    }
    return kOk;
  } catch (const metavl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const metavl::MissingDependencyError& e) {
    std::cerr << "missing dependency: " << e.what() << "\n";
    return kMissing;
  } catch (const metavl::AuditError& e) {
    std::cerr << "audit failure: " << e.what() << "\n";
    return kAudit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
