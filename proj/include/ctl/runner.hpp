#pragma once

// Executes a recipe into its output directory and keeps the run manifest.
// The manifest is rewritten after every stage outcome, so a failed run still
// leaves one naming the stage it died in.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctl/config.hpp"
#include "ctl/recipes.hpp"
#include "ctl/report.hpp"
#include "ctl/training.hpp"

namespace ctl {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kOutputRootEnv = "CTL_LAB_OUTPUT_ROOT";

enum ExitCode : int { kExitOk = 0, kExitValidation = 2, kExitRuntime = 3 };

/// output_dir as configured, placed under `root` when one is given (an
/// absolute output_dir keeps only its relative part there).
inline std::filesystem::path resolve_output_dir(const std::string& output_dir, const std::string& root) {
  std::filesystem::path p(output_dir);
  if (root.empty()) return p;
  return std::filesystem::path(root) / (p.is_absolute() ? p.relative_path() : p);
}

inline std::string env_output_root() {
  const char* v = std::getenv(kOutputRootEnv);
  return v ? std::string(v) : std::string();
}

/// A config document, or the config embedded in a run manifest.
inline nlohmann::json config_document(const nlohmann::json& j) {
  if (j.is_object() && j.contains("manifest_version")) {
    if (!j.contains("config") || !j["config"].is_object())
      throw ConfigError(std::vector<Diagnostic>{{"config", "manifest carries no config to replay"}});
    return j["config"];
  }
  return j;
}

struct RunResult {
  int exit_code = kExitOk;
  std::string message;
  std::filesystem::path output_dir;
  nlohmann::json manifest;
};

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline nlohmann::json report_document(const ExperimentConfig& cfg, const RecipeOutput& out) {
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& [name, t] : out.tables) tables.push_back(name);
  return {{"schema_version", kReportSchemaVersion}, {"recipe", cfg.recipe},        {"config_digest", detail::hex64(config_digest(cfg))},
          {"tables", tables},                      {"data", out.data},              {"plots", plots_json(out.plots)}};
}

/// Runs an already-validated config. `output_root` overrides the environment
/// variable when non-empty.
inline RunResult run_experiment(const ExperimentConfig& cfg, const std::string& output_root = {}) {
  RunResult res;
  const auto t0 = std::chrono::steady_clock::now();
  res.output_dir = resolve_output_dir(cfg.output_dir, output_root.empty() ? env_output_root() : output_root);

  auto& m = res.manifest;
  m = {{"manifest_version", kManifestVersion},
       {"library_version", kLibraryVersion},
       {"recipe", cfg.recipe},
       {"config_digest", detail::hex64(config_digest(cfg))},
       {"config", canonical_json(cfg)},
       {"started_at", detail::utc_now()},
       {"status", "running"},
       {"artifacts", nlohmann::json::array()},
       {"summary", nlohmann::json::object()}};
  StageLog log;
  const auto manifest_path = res.output_dir / "manifest.json";
  auto flush_manifest = [&] {
    m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text_file(manifest_path, m.dump(2) + "\n");
  };
  auto record = [&](const std::string& name, const std::string& text) {
    write_text_file(res.output_dir / name, text);
    m["artifacts"].push_back({{"path", name}, {"bytes", text.size()}, {"fnv1a", detail::hex64(fnv1a(text))}});
  };

  try {
    std::filesystem::create_directories(res.output_dir);
    flush_manifest();
    RecipeOutput out = run_recipe(cfg, log);
    log.enter("write");
    for (const auto& [name, table] : out.tables) record(name, table.str());
    const nlohmann::json report = report_document(cfg, out);
    record("report.json", report.dump(2) + "\n");
    if (!out.plots.errorbars.empty() || !out.plots.points.empty())
      record("plot_" + out.default_plot + ".svg", render_plot(report, out.default_plot));
    if (cfg.save_checkpoints)
      for (const auto& [name, ckpt] : out.checkpoints)
        record("checkpoints/" + name + ".json", checkpoint_to_json(ckpt).dump() + "\n");
    m["summary"] = out.summary;
    m["status"] = "ok";
    flush_manifest();
  } catch (const std::exception& e) {
    res.exit_code = kExitRuntime;
    res.message = "stage '" + log.current + "' failed: " + e.what();
    m["status"] = "failed";
    m["failure_stage"] = log.current;
    m["error"] = e.what();
    try {
      flush_manifest();
    } catch (const std::exception&) {  // the output directory itself is unusable
    }
  }
  return res;
}

/// Parses, validates and runs a config (or manifest) document.
inline RunResult run_document(const nlohmann::json& doc, const std::string& output_root = {}) {
  ExperimentConfig cfg;
  try {
    cfg = parse_config(config_document(doc));
  } catch (const ConfigError& e) {
    RunResult r;
    r.exit_code = kExitValidation;
    for (const auto& d : e.diagnostics) r.message += to_string(d) + "\n";
    return r;
  }
  return run_experiment(cfg, output_root);
}

}  // namespace ctl
