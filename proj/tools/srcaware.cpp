#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "srcaware/pipeline.hpp"

using namespace srcaware;

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int report_error(const std::string& code, const std::string& what) {
  std::cerr << "error: " << code << ": " << one_line(what) << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"srcaware: source-aware COVID-19 CT classification pipeline"};
  app.require_subcommand(1);
  std::string config_path, data_root, output_root, stage, variant, split = "test";
  std::optional<std::uint64_t> seed;
  std::optional<double> scale;
  bool quiet = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file (schema_version 1)");
    sub->add_option("--data-root", data_root, "Override paths.data_root");
    sub->add_option("--output-root", output_root, "Override paths.output_root");
    sub->add_option("--seed", seed, "Override seed");
    sub->add_option("--scale", scale, "Override ledger.scale");
    sub->add_flag("-q,--quiet", quiet, "No progress lines on stderr");
  };
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset that follows the scaled split ledger");
  auto* prep = app.add_subcommand("prep", "Trim, extract lungs, canonicalize and pool every scan");
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("--stage", stage, "1, 2a, 2b or 3")->required();
  train->add_option("--variant", variant, "Train a single configured variant");
  auto* predict = app.add_subcommand("predict", "Expert and source predictions for a split");
  predict->add_option("--split", split, "test (default) or val");
  auto* fuse_cmd = app.add_subcommand("fuse", "Source-routed fusion of the expert predictions");
  auto* evaluate = app.add_subcommand("evaluate", "Metrics of the fused predictions against test_labels.csv");
  auto* report = app.add_subcommand("report", "Markdown report: ledger, test distribution, metrics");
  auto* show = app.add_subcommand("config", "Print the resolved config");
  for (auto* s : {synth, prep, train, predict, fuse_cmd, evaluate, report, show}) common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << std::endl;
    return 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (!data_root.empty()) cfg.data_root = data_root;
    if (!output_root.empty()) cfg.output_root = output_root;
    if (seed) cfg.seed = *seed;
    if (scale) {
      require(*scale > 0, "--scale must be positive");
      cfg.ledger_scale = *scale;
    }
    const RunContext ctx = make_context(cfg, quiet ? nullptr : &std::cerr);
    if (*synth) cmd_synth(ctx);
    if (*prep) cmd_prep(ctx);
    if (*train) cmd_train(ctx, parse_stage(stage), variant);
    if (*predict) {
      if (split != "test" && split != "val") fail("invalid_argument", "--split must be test or val");
      cmd_predict(ctx, parse_split(split));
    }
    if (*fuse_cmd) cmd_fuse(ctx);
    if (*evaluate) std::cout << cmd_evaluate(ctx).dump(2) << std::endl;
    if (*report) std::cout << cmd_report(ctx);
    if (*show) std::cout << to_json(cfg).dump(2) << std::endl;
  } catch (const CommandError& e) {
    return report_error(e.code(), e.what());
  } catch (const Error& e) {
    return report_error("invalid_input", e.what());
  } catch (const nlohmann::json::exception& e) {
    return report_error("invalid_input", e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
  return 0;
}
