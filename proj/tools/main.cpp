// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/pipeline.hpp"
#include "knowtrace/report_io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>

namespace {

using knowtrace::config::PipelineConfig;

struct CommonArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out;
  std::string world;
  std::string checkpoint;
  std::string labeled;
  std::string setting;
};

PipelineConfig effective_config(const CommonArgs& args) {
  PipelineConfig cfg = args.config_path.empty() ? knowtrace::config::default_config()
                                                : knowtrace::config::load_config(args.config_path);
  if (args.seed) {
    cfg.seed = *args.seed;
    cfg.propagate_seed();
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowtrace: instrumented toy-transformer workbench for knowledge-recall analysis\n"
               "Thread count: set KNOWTRACE_THREADS (default 1)."};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* cmd, bool needs_world, bool needs_checkpoint, bool needs_labeled,
                        bool needs_setting) {
    cmd->add_option("--config", args.config_path, "INI config file (defaults used when omitted)");
    cmd->add_option("--seed", args.seed, "root seed override");
    cmd->add_option("--out", args.out, "output directory")->required();
    if (needs_world) cmd->add_option("--world", args.world, "world directory")->required();
    if (needs_checkpoint)
      cmd->add_option("--checkpoint", args.checkpoint, "checkpoint directory")->required();
    if (needs_labeled)
      cmd->add_option("--labeled", args.labeled, "labeled-dataset directory")->required();
    if (needs_setting)
      cmd->add_option("--setting", args.setting, "experiment setting")->required();
  };

  CLI::App* world = app.add_subcommand("world", "generate the synthetic world and corpus");
  add_common(world, false, false, false, false);
  CLI::App* train = app.add_subcommand("train", "train the toy transformer on a world corpus");
  add_common(train, true, false, false, false);
  CLI::App* label = app.add_subcommand("label", "label model answers as FA/AH/UH");
  add_common(label, true, true, false, false);
  CLI::App* trace = app.add_subcommand("trace", "causal intervention heatmaps per category");
  add_common(trace, false, true, true, false);
  CLI::App* analyze = app.add_subcommand("analyze", "hidden-state analysis reports");
  add_common(analyze, false, true, true, false);
  CLI::App* detect =
      app.add_subcommand("detect", "probe-based detection (setting: AH_Only|UH_Only|Full)");
  add_common(detect, false, true, true, true);
  CLI::App* refuse =
      app.add_subcommand("refuse", "refusal tuning experiment (setting: UH_Only|AH_Only)");
  add_common(refuse, false, true, true, true);
  CLI::App* repro = app.add_subcommand("repro", "full pipeline end-to-end with one seed");
  add_common(repro, false, false, false, false);

  CLI11_PARSE(app, argc, argv);

  try {
    using namespace knowtrace;
    const PipelineConfig cfg = effective_config(args);
    if (world->parsed()) pipeline::cmd_world(cfg, args.out);
    if (train->parsed()) pipeline::cmd_train(cfg, args.world, args.out);
    if (label->parsed()) pipeline::cmd_label(cfg, args.checkpoint, args.world, args.out);
    if (trace->parsed()) pipeline::cmd_trace(cfg, args.checkpoint, args.labeled, args.out);
    if (analyze->parsed()) pipeline::cmd_analyze(cfg, args.checkpoint, args.labeled, args.out);
    if (detect->parsed())
      pipeline::cmd_detect(cfg, args.checkpoint, args.labeled,
                           detection::setting_from_name(args.setting), args.out);
    if (refuse->parsed())
      pipeline::cmd_refuse(cfg, args.checkpoint, args.labeled,
                           refusal::refusal_setting_from_name(args.setting), args.out);
    if (repro->parsed()) pipeline::cmd_repro(cfg, args.out);
  } catch (const knowtrace::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const knowtrace::InvalidInput& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
