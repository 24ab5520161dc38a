#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "tokenrank/bench.hpp"
#include "tokenrank/nn/errors.hpp"

namespace {

using namespace tokenrank;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kNumeric = 4 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string cache;
  std::size_t jobs = std::max(1U, std::thread::hardware_concurrency());
};

bench::Workspace make_workspace(const Globals& g) {
  auto cfg = bench::load_pipeline_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  return {std::move(cfg), g.out, g.cache, g.jobs};
}

void log(const std::string& msg) { std::cerr << "[tokenrank] " << msg << std::endl; }

void emit(const bench::Workspace& ws, const std::vector<bench::ResultRow>& rows, const std::string& stem) {
  bench::emit_report(rows, ws.reports_dir(), stem);
  std::cout << (ws.reports_dir() / (stem + ".csv")).string() << " (" << rows.size() << " rows)\n";
}

int run(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tokenrank: golden-ranking token pruning for a toy CLIP"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "pipeline config (JSON); defaults when omitted");
  app.add_option("--seed", g.seed, "run a single seed instead of the config seed list");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--cache", g.cache, "golden score cache (default <out>/cache)");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.fallthrough();

  std::function<void()> action;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic datasets");
  gen->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      for (auto s : ws.config().seeds) {
        bench::stage_gen_data(ws, s);
        log("seed " + std::to_string(s) + ": datasets written");
      }
    };
  });

  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of the dual encoder");
  pre->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      for (auto s : ws.config().seeds) {
        const auto r = bench::stage_pretrain(ws, s);
        std::printf("seed %llu: final loss %.4f, zero-shot test accuracy %.2f%%\n", static_cast<unsigned long long>(s),
                    r.report.epoch_loss.empty() ? r.report.initial_loss : r.report.epoch_loss.back(),
                    r.test_accuracy);
      }
    };
  });

  bool rebuild = false;
  auto* gold = app.add_subcommand("golden", "compute and cache golden rankings");
  gold->add_flag("--rebuild", rebuild, "recompute cached entries");
  gold->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      for (auto s : ws.config().seeds) {
        const auto n = bench::stage_golden(ws, s, rebuild);
        log("seed " + std::to_string(s) + ": " + std::to_string(n) + " images scored");
      }
    };
  });

  std::string arch_name;
  std::optional<std::uint32_t> variant;
  auto* trp = app.add_subcommand("train-predictor", "train the ranking predictor on cached golden scores");
  trp->add_option("--arch", arch_name, "mixmlp | mlp | transblock (default from config)");
  trp->add_option("--variant", variant, "dataset variant (default: first configured)");
  trp->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      const auto arch = arch_name.empty() ? ws.config().predictor.arch : predictor::parse_arch(arch_name);
      const auto v = variant.value_or(ws.config().variants.front());
      for (auto s : ws.config().seeds) {
        const auto r = bench::stage_train_predictor(ws, s, arch, v);
        std::printf("seed %llu: matching rate@%zu train %.2f test %.2f (untrained %.2f)\n",
                    static_cast<unsigned long long>(s), r.k, r.train_matching_rate, r.test_matching_rate,
                    r.untrained_test_matching_rate);
      }
    };
  });

  auto experiment = [&](const char* name, const char* help, std::vector<bench::ResultRow> (*fn)(const bench::Workspace&)) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&action, &g, name, fn] {
      action = [&g, name, fn] {
        auto ws = make_workspace(g);
        emit(ws, fn(ws), name);
      };
    });
  };
  experiment("sweep", "keep-rate sweep over all strategies", &bench::run_keep_rate_sweep);
  experiment("ablate-locations", "pruning-location ablation", &bench::run_location_ablation);
  experiment("ablate-arch", "predictor architecture ablation", &bench::run_arch_ablation);
  experiment("cross-dataset", "predictor transfer across dataset variants", &bench::run_cross_dataset);
  experiment("tuning-grid", "prompt tuning grid", &bench::run_tuning_grid);

  std::string mode_name;
  bool unpruned = false;
  auto* tune = app.add_subcommand("tune-prompts", "few-shot prompt tuning");
  tune->add_option("--mode", mode_name, "T_only | T_and_V (default from config)");
  tune->add_flag("--unpruned", unpruned, "tune without pruning");
  tune->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      const auto mode = mode_name.empty() ? ws.config().tune.mode : prompt::parse_tune_mode(mode_name);
      for (auto s : ws.config().seeds) {
        const auto r = bench::stage_tune_prompts(ws, s, mode, !unpruned);
        std::printf("seed %llu: test accuracy %.2f%% -> %.2f%%\n", static_cast<unsigned long long>(s),
                    r.log.initial_test_accuracy,
                    r.log.epoch_test_accuracy.empty() ? r.log.initial_test_accuracy : r.log.epoch_test_accuracy.back());
      }
    };
  });

  auto* rep = app.add_subcommand("report", "re-emit summaries and plot data for every report");
  rep->callback([&] {
    action = [&] {
      auto ws = make_workspace(g);
      for (const auto& p : bench::stage_report(ws)) std::cout << p.string() << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  return run(action);
}
