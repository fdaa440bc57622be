// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

// Command-line front end: run, sweep, report, gen-data, grad-check.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coda/coda.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kNumericError = 2;

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> strategies;
  std::string output;
  std::size_t epochs = 0;
  std::size_t jobs = 0;
  bool no_checkpoints = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON config file");
    app->add_option("--set", sets, "Override a config key: section.key=value")
        ->take_all();
    app->add_option("--seeds", seeds, "Trial seeds")->delimiter(',');
    app->add_option("--strategies", strategies,
                    "Strategies: coda, l2p, dualprompt, ft")
        ->delimiter(',');
    app->add_option("-o,--output", output, "Output directory");
    app->add_option("--epochs", epochs, "Epochs per task");
    app->add_option("-j,--jobs", jobs, "Concurrent trials");
    app->add_flag("--no-checkpoints", no_checkpoints,
                  "Do not write or resume from checkpoints");
  }

  // Precedence: built-in defaults < config file < flags. The output-root
  // environment variable then anchors relative output paths.
  coda::RunConfig build() const {
    nlohmann::json doc = nlohmann::json::object();
    if (!config_path.empty()) doc = coda::read_json_file(config_path);
    if (!seeds.empty()) doc["seeds"] = seeds;
    if (!strategies.empty()) doc["strategies"] = strategies;
    if (!output.empty()) doc["output_dir"] = output;
    if (epochs > 0) coda::set_override(doc, "optim.epochs", std::to_string(epochs));
    if (jobs > 0) doc["jobs"] = jobs;
    if (no_checkpoints) doc["checkpoints"] = false;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw coda::ConfigError("--set expects key=value, got '" + s + "'");
      }
      coda::set_override(doc, s.substr(0, eq), s.substr(eq + 1));
    }
    coda::RunConfig c = coda::config_from_json(doc);
    if (const char* root = std::getenv(coda::kOutputRootEnv)) {
      coda::apply_output_root(c, root);
    }
    return c;
  }
};

int cmd_run(const ConfigFlags& flags) {
  const auto config = flags.build();
  std::filesystem::create_directories(config.output_dir);
  const auto report = coda::run_experiment(config, {}, &std::cerr);
  coda::write_report(report, config.output_dir);
  std::cout << coda::format_table(report.summary);
  std::cerr << "wrote " << config.output_dir << "/report.json and results.csv\n";
  return kOk;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& axis_name,
              const std::vector<std::size_t>& values) {
  const auto axis = coda::parse_axis(axis_name);
  if (!axis) {
    throw coda::ConfigError("unknown sweep axis '" + axis_name +
                            "' (expected components or prompt_length)");
  }
  const auto config = flags.build();
  const auto points = coda::sweep(config, *axis, values, &std::cerr);
  std::cout << coda::sweep_csv(*axis, points);
  return kOk;
}

int cmd_report(const std::string& dir) {
  if (!std::filesystem::exists(std::filesystem::path(dir) / "config.json")) {
    throw coda::IoError("file not found: " + dir + "/config.json");
  }
  const auto r = coda::report_directory(dir);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  coda::io::write_bytes(std::filesystem::path(dir) / "summary.csv",
                        coda::summary_csv(r.summary));
  std::cout << r.table;
  return kOk;
}

int cmd_gen_data(const ConfigFlags& flags, std::optional<std::uint64_t> seed,
                 std::string out, bool pretext) {
  const auto config = flags.build();
  const std::uint64_t s = seed ? *seed : config.seeds.front();
  auto stream = coda::generate_benchmark(config.benchmark, s);
  std::string kind = "benchmark";
  if (pretext) {
    auto p = coda::pretext_split(config.pretrain.pretext, config.benchmark, s);
    coda::check_disjoint(p, stream);
    stream = std::move(p);
    kind = "pretext";
  }
  if (out.empty()) {
    out = (std::filesystem::path(config.output_dir) /
           (kind + "-seed" + std::to_string(s) + ".bin"))
              .string();
  }
  coda::write_benchmark(out, stream);
  std::cout << out << '\n' << out << ".manifest.json\n";
  return kOk;
}

int cmd_grad_check(double tolerance) {
  const auto entries = coda::run_gradient_suite();
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.result.max_rel_error < tolerance;
    ok = ok && pass;
    std::printf("%-4s %-22s max_rel_err=%.3e checked=%zu\n", pass ? "ok" : "FAIL",
                e.name.c_str(), e.result.max_rel_error, e.result.checked);
  }
  std::printf("%zu checks, tolerance %.1e: %s\n", entries.size(), tolerance,
              ok ? "all passed" : "FAILED");
  return ok ? kOk : kNumericError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decomposed attention-conditioned prompting for continual learning"};
  app.require_subcommand(1);

  ConfigFlags run_flags, sweep_flags, data_flags;
  auto* run = app.add_subcommand("run", "Train and evaluate every (seed, strategy)");
  run_flags.attach(run);

  auto* sw = app.add_subcommand("sweep", "CODA accuracy versus M or L_p");
  sweep_flags.attach(sw);
  std::string axis = "components";
  std::vector<std::size_t> values;
  sw->add_option("--axis", axis, "components | prompt_length");
  sw->add_option("--values", values, "Values to sweep")->delimiter(',')->required();

  auto* rep = app.add_subcommand("report", "Comparison table of a run directory");
  std::string run_dir;
  rep->add_option("run_dir", run_dir, "Run directory")->required();

  auto* gen = app.add_subcommand("gen-data", "Write a benchmark file and manifest");
  data_flags.attach(gen);
  std::optional<std::uint64_t> data_seed;
  std::string data_out;
  bool pretext = false;
  gen->add_option("--seed", data_seed, "Stream seed (default: first config seed)");
  gen->add_option("--out", data_out, "Output file");
  gen->add_flag("--pretext", pretext, "Write the pretraining stream instead");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  double tolerance = 1e-4;
  gc->add_option("--tolerance", tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*sw) return cmd_sweep(sweep_flags, axis, values);
    if (*rep) return cmd_report(run_dir);
    if (*gen) return cmd_gen_data(data_flags, data_seed, data_out, pretext);
    if (*gc) return cmd_grad_check(tolerance);
  } catch (const coda::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const coda::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const coda::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
