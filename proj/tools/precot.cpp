// precot: command-line driver for the experiment pipeline.
//
//   precot [--config F] [--seed N] [--backend planted|remote] [--task T] [--out DIR] <command>
//
// Every command records a run under --out and prints its summary as JSON.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "precot/pipeline.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string backend;
  std::string backend_url;
  std::string task;
  std::string out = "out";
  std::optional<std::size_t> synthetic_items;
  bool quiet = false;
};

precot::ExperimentConfig resolve_config(const Globals& g) {
  precot::ExperimentConfig cfg = g.config.empty() ? precot::ExperimentConfig{} : precot::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.backend.empty()) {
    if (g.backend != "planted" && g.backend != "remote") throw precot::ConfigError("--backend must be planted or remote");
    cfg.backend.name = g.backend;
  }
  if (!g.backend_url.empty()) cfg.backend.url = g.backend_url;
  if (!g.task.empty()) cfg.task.name = precot::parse_task_name(g.task);
  if (g.synthetic_items) cfg.task.synthetic_items = *g.synthetic_items;
  return cfg;
}

void print(const precot::StageResult& r) {
  std::cout << nlohmann::json{{"run_id", r.run_id}, {"summary", r.summary}}.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pre-CoT belief probing, steering and trace classification"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (overrides the config)");
  app.add_option("--backend", g.backend, "planted | remote");
  app.add_option("--backend-url", g.backend_url, "base URL of a remote backend server");
  app.add_option("--task", g.task, "anachronisms | logical_deduction | social_chemistry | sports_understanding");
  app.add_option("--out", g.out, "output directory (run store, caches, reports)");
  app.add_option("--synthetic-items", g.synthetic_items, "generate a synthetic source of N items under --out");
  app.add_flag("-q,--quiet", g.quiet, "no progress messages");

  std::function<void(precot::Pipeline&)> action;

  auto* data = app.add_subcommand("data", "dataset preparation");
  data->require_subcommand(1);
  data->add_subcommand("prepare", "load, deduplicate and split the task source")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.prepare_data()); };
  });

  std::string mode = "cot";
  auto* eval = app.add_subcommand("eval", "evaluate the model with or without CoT");
  eval->add_option("--mode", mode, "cot | no_cot")->check(CLI::IsMember({"cot", "no_cot"}));
  eval->callback([&] { action = [&](precot::Pipeline& p) { print(p.eval(precot::parse_mode(mode))); }; });

  auto* probe = app.add_subcommand("probe", "linear probes on pre-CoT activations");
  probe->require_subcommand(1);
  std::optional<int> fit_layer;
  auto* fit = probe->add_subcommand("fit", "fit a probe at one layer (default: best swept layer)");
  fit->add_option("--layer", fit_layer, "layer index");
  fit->callback([&] { action = [&](precot::Pipeline& p) { print(p.probe_fit(fit_layer)); }; });
  probe->add_subcommand("sweep", "fit and score a probe at every layer")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.probe_sweep()); };
  });
  std::size_t lens_k = 5;
  auto* lens = probe->add_subcommand("lens", "project the steering probe through the unembedding");
  lens->add_option("-k", lens_k, "tokens per direction");
  lens->callback([&] { action = [&](precot::Pipeline& p) { print(p.probe_lens(lens_k)); }; });

  auto* steer = app.add_subcommand("steer", "activation steering sweeps");
  steer->require_subcommand(1);
  steer->add_subcommand("run", "probe_yes and probe_no sweeps")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.steer_run()); };
  });
  steer->add_subcommand("baseline", "orthogonal-direction control sweep")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.steer_baseline()); };
  });

  auto* intervene = app.add_subcommand("intervene", "CoT sensitivity interventions");
  intervene->require_subcommand(1);
  intervene->add_subcommand("ellipses", "replace the CoT with an ellipsis")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.intervene(precot::InterventionKind::ellipses)); };
  });
  intervene->add_subcommand("wrong-cot", "minimally edit the CoT toward the other answer")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.intervene(precot::InterventionKind::wrong_cot)); };
  });

  auto* judge = app.add_subcommand("judge", "trace classification with an LLM judge");
  judge->require_subcommand(1);
  judge->add_subcommand("classify", "classify flipped steered traces")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.judge_classify()); };
  });
  judge->add_subcommand("audit", "re-classify and measure judge consistency")->callback([&] {
    action = [](precot::Pipeline& p) { print(p.judge_audit()); };
  });

  std::string report_name;
  std::string report_run;
  auto* report = app.add_subcommand("report", "write a figure or table under <out>/reports");
  std::vector<std::string> names = precot::report_names();
  names.push_back("all");
  auto* name_opt = report->add_option("name", report_name, "report name")->check(CLI::IsMember(names));
  auto* run_opt = report->add_option("--run", report_run, "emit the plot data of one run id instead");
  name_opt->excludes(run_opt);
  report->callback([&] {
    if (report_name.empty() && report_run.empty()) throw CLI::RequiredError("report needs a name or --run");
    action = [&](precot::Pipeline& p) {
      const auto files = report_run.empty() ? p.report(report_name) : p.emit(report_run);
      for (const auto& f : files) std::cout << f.string() << "\n";
    };
  });

  app.add_subcommand("run-all", "every stage in order, then all reports")->callback([&] {
    action = [](precot::Pipeline& p) {
      for (const auto& r : p.run_all()) std::cout << r.run_id << "\n";
    };
  });

  CLI11_PARSE(app, argc, argv);

  try {
    precot::Pipeline pipeline(resolve_config(g), g.out, [&](const std::string& msg) {
      if (!g.quiet) std::cerr << "[precot] " << msg << "\n";
    });
    action(pipeline);
  } catch (const precot::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
