#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pgl/commands.hpp"

namespace {

int fail(const std::string& type, const std::string& message, int code) {
  pgl::json err = {{"error", {{"type", type}, {"message", message}}}};
  std::cerr << err.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Provenance-guided learning toolkit on synthetic data"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, mask_mode;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  std::size_t jobs = 1, saliency = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Experiment config (JSON); defaults apply when omitted");
    sub->add_option("--out", out, "Output directory (relative paths resolve under $PGL_OUTPUT_ROOT)");
    sub->add_option("--seed", seed, "Root seed override");
    sub->add_option("--alpha", alpha, "Provenance loss weight override");
    sub->add_option("--mask-mode", mask_mode, "provenance, random or unmasked");
  };
  auto* gen = app.add_subcommand("generate", "Write the toy dataset splits and a JSON sidecar");
  common(gen);
  auto* tr = app.add_subcommand("train", "Train one model; writes metrics.csv, summary.json, checkpoint and manifest");
  common(tr);
  auto* ab = app.add_subcommand("ablate", "Run the alpha / mask-mode / mask-perturbation grids; writes suite.csv");
  common(ab);
  ab->add_option("--jobs", jobs, "Runs executed in parallel")->check(CLI::PositiveNumber);
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the config's test split");
  common(ev);
  ev->add_option("--checkpoint", checkpoint, "Run directory holding checkpoint.bin/.json")->required();
  ev->add_option("--saliency", saliency, "Export saliency PGMs for the first N test samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  auto* sub = app.get_subcommands().front();
  pgl::Overrides o;
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--alpha")) o.alpha = alpha;
  if (sub->count("--mask-mode")) o.mask_mode = mask_mode;

  try {
    const std::string name = sub->get_name();
    const pgl::fs::path dir = pgl::resolve_output(out, name);
    if (name == "generate") {
      auto j = pgl::cmd_generate(config, dir, o);
      std::cout << pgl::json{{"command", name}, {"out", dir.string()}, {"files", j["files"]}}.dump() << std::endl;
    } else if (name == "train") {
      auto j = pgl::cmd_train(config, dir, o);
      std::cout << pgl::json{{"command", name}, {"out", dir.string()}, {"final", j["final"]}}.dump() << std::endl;
    } else if (name == "ablate") {
      auto r = pgl::cmd_ablate(config, dir, o, jobs);
      pgl::json status = {{"command", name},
                          {"out", dir.string()},
                          {"rows", r.plan.size()},
                          {"executed", r.executed},
                          {"reused", r.reused},
                          {"failed", r.failed}};
      std::cout << status.dump() << std::endl;
      if (r.failed > 0) {
        return fail("run_failed", std::to_string(r.failed) + " ablation run(s) failed; see suite.csv", 3);
      }
    } else {
      auto j = pgl::cmd_eval(config, pgl::resolve_output(checkpoint, checkpoint), dir, o, saliency);
      std::cout << pgl::json{{"command", name}, {"out", dir.string()}, {"metrics", j}}.dump() << std::endl;
    }
  } catch (const pgl::Error& e) {
    return fail("error", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
