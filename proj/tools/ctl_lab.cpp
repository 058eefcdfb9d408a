// ctl_lab: run, validate and plot linearity experiments.
//
//   ctl_lab run <config.json | manifest.json> [--output-root DIR]
//   ctl_lab validate <config.json>
//   ctl_lab plot <report.json> --kind errorbar|scatter [--out FILE]
//
// Exit codes: 0 success, 2 invalid input (config, report or plot kind),
// 3 failure while running (the failing stage is printed and kept in the manifest).

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ctl/config.hpp"
#include "ctl/report.hpp"
#include "ctl/runner.hpp"

namespace {

int cmd_run(const std::string& path, const std::string& output_root) {
  nlohmann::json doc;
  try {
    doc = ctl::read_json_file(path);
  } catch (const ctl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ctl::kExitValidation;
  }
  const auto res = ctl::run_document(doc, output_root);
  if (res.exit_code == ctl::kExitValidation) {
    std::cerr << "invalid config " << path << ":\n" << res.message;
  } else if (res.exit_code != ctl::kExitOk) {
    std::cerr << "error: " << res.message << "\n";
    std::cerr << "partial manifest: " << (res.output_dir / "manifest.json").string() << "\n";
  } else {
    std::cout << "wrote " << res.output_dir.string() << "\n";
    std::cout << res.manifest["summary"].dump() << "\n";
  }
  return res.exit_code;
}

int cmd_validate(const std::string& path) {
  std::vector<ctl::Diagnostic> diags;
  try {
    diags = ctl::validate_config(ctl::config_document(ctl::read_json_file(path)));
  } catch (const ctl::ConfigError& e) {
    diags = e.diagnostics;
  }
  for (const auto& d : diags) std::cout << ctl::to_string(d) << "\n";
  if (diags.empty()) std::cout << path << ": ok\n";
  return diags.empty() ? ctl::kExitOk : ctl::kExitValidation;
}

int cmd_plot(const std::string& path, const std::string& kind, std::string out) {
  std::string svg;
  try {
    std::ifstream in(path);
    if (!in) throw ctl::ReportSchemaError("cannot open " + path);
    nlohmann::json report;
    try {
      report = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error&) {
      throw ctl::ReportSchemaError("report is empty or not JSON");
    }
    svg = ctl::render_plot(report, kind);
  } catch (const ctl::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ctl::kExitValidation;
  }
  if (out.empty()) {
    std::filesystem::path p(path);
    out = (p.parent_path() / (p.stem().string() + "_" + kind + ".svg")).string();
  }
  try {
    ctl::write_text_file(out, svg);
  } catch (const ctl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ctl::kExitRuntime;
  }
  std::cout << "wrote " << out << "\n";
  return ctl::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linearity lab: interpolation, averaging and task-arithmetic experiments on small MLPs"};
  app.require_subcommand(1);

  std::string run_path, output_root;
  auto* run = app.add_subcommand("run", "Run a recipe from a config or replay a run manifest");
  run->add_option("config", run_path, "Config JSON or manifest.json")->required();
  run->add_option("--output-root", output_root, std::string("Directory prepended to output_dir (overrides ") +
                                                    ctl::kOutputRootEnv + ")");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config and list every problem found");
  validate->add_option("config", validate_path, "Config JSON")->required();

  std::string plot_path, kind, out;
  auto* plot = app.add_subcommand("plot", "Render a report as SVG");
  plot->add_option("report", plot_path, "report.json written by run")->required();
  plot->add_option("--kind", kind, "errorbar or scatter")->required();
  plot->add_option("--out", out, "Output SVG path (default: next to the report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ctl::kExitValidation;
  }

  if (*run) return cmd_run(run_path, output_root);
  if (*validate) return cmd_validate(validate_path);
  return cmd_plot(plot_path, kind, out);
}
