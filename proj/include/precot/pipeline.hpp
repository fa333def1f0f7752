#pragma once

// Stage orchestration over the run store. Every stage records one run whose
// config carries the experiment hash and the ids of the upstream runs it read,
// and upstream lookups only accept runs of the same experiment hash.
//
// Output layout under <out>:
//   manifest.jsonl, runs/           run store
//   data/<task>/                    synthetic sources (when configured)
//   datasets/<task>/metadata.json   split sizes, class balance, warnings
//   cache/activations/<key>/        t0 activation cache per backend
//   probes/<backend>/<task>/        probe artifacts
//   reports/                        CSV, SVG and JSON reports

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/config.hpp"
#include "precot/core.hpp"
#include "precot/cot_sensitivity.hpp"
#include "precot/evaluation.hpp"
#include "precot/inference_backend.hpp"
#include "precot/llm_client.hpp"
#include "precot/planted_backend.hpp"
#include "precot/probe_lab.hpp"
#include "precot/remote_backend.hpp"
#include "precot/run_store.hpp"
#include "precot/stats_report.hpp"
#include "precot/steering_engine.hpp"
#include "precot/task_corpus.hpp"
#include "precot/trace_judge.hpp"

namespace precot {

inline constexpr std::string_view kJudgeTemplateFile = "judge_prompt_v1.txt";
inline constexpr std::string_view kEditorExtractFile = "editor_extract_v1.txt";
inline constexpr std::string_view kEditorEditFile = "editor_edit_v1.txt";

inline const std::vector<std::string>& report_names() {
  static const std::vector<std::string> names = {"accuracy", "probe-auc",      "flip-curves",   "parse-failures",
                                                 "lens",     "classification", "interventions", "audit"};
  return names;
}

struct StageResult {
  std::string run_id;
  nlohmann::json summary;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

inline std::string file_stem_safe(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return s;
}

}  // namespace detail

class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  Pipeline(ExperimentConfig cfg, std::filesystem::path out, Logger log = {})
      : cfg_(std::move(cfg)), out_(std::move(out)), store_(out_), log_(std::move(log)) {
    experiment_hash_ = config_hash(to_json(cfg_));
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }
  RunStore& store() { return store_; }
  const std::string& experiment_hash() const { return experiment_hash_; }
  std::string task_name() const { return std::string(to_string(cfg_.task.name)); }

  // Injected clients replace the configured providers (tests, offline runs).
  void set_backend(std::unique_ptr<InferenceBackend> b) { backend_ = std::move(b); }
  void set_judge(std::unique_ptr<ChatClient> c) { judge_ = std::move(c); }
  void set_editor(std::unique_ptr<ChatClient> c) { editor_ = std::move(c); }

  std::filesystem::path data_dir() const {
    return cfg_.task.synthetic_items > 0 ? out_ / "data" : std::filesystem::path(cfg_.task.data_dir);
  }

  const TaskDataset& dataset() {
    if (!dataset_) {
      if (cfg_.task.synthetic_items > 0) materialize_synthetic();
      dataset_ = load_task(cfg_.task.name, cfg_.task.split_seed, data_dir(),
                           SplitSizes{cfg_.task.train_size, cfg_.task.test_size});
    }
    return *dataset_;
  }

  InferenceBackend& backend() {
    if (!backend_) {
      if (cfg_.backend.name == "planted") {
        auto b = std::make_unique<PlantedBackend>(cfg_.backend.planted);
        b->add_reference_labels(dataset().train);
        b->add_reference_labels(dataset().test);
        backend_ = std::move(b);
      } else {
        backend_ = std::make_unique<RemoteBackend>(cfg_.backend.url, cfg_.backend.read_timeout_sec);
      }
    }
    return *backend_;
  }

  // Label under which runs of this backend are filed.
  std::string backend_label() {
    return cfg_.backend.name == "planted" ? std::string("planted") : backend().descriptor().name;
  }

  // ---------------------------------------------------------------- data

  StageResult prepare_data() {
    const TaskDataset& ds = dataset();
    auto run = begin("data", {{"synthetic_items", cfg_.task.synthetic_items}}, {});
    run.append("metadata", ds.metadata);
    for (const auto& t : ds.train) run.append("instance", {{"split", "train"}, {"instance", t}});
    for (const auto& t : ds.test) run.append("instance", {{"split", "test"}, {"instance", t}});
    for (const auto& w : ds.metadata.warnings) note(w);
    nlohmann::json summary = ds.metadata;
    detail::write_text(out_ / "datasets" / task_name() / "metadata.json", summary.dump(2) + "\n");
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- eval

  StageResult eval(PromptMode mode) {
    const TaskDataset& ds = dataset();
    EvalSettings s{mode, cfg_.task.option_seed, cfg_.decode, cfg_.seed, cfg_.strictness};
    auto run = begin(eval_kind(mode), {{"mode", to_string(mode)}}, upstream_ids({"data"}));
    nlohmann::json summary = nlohmann::json::object();
    // Probes train on CoT-mode answers, so only that mode needs the train split.
    std::vector<std::pair<std::string, const std::vector<TaskInstance>*>> splits;
    if (mode == PromptMode::cot) splits.push_back({"train", &ds.train});
    splits.push_back({"test", &ds.test});
    for (const auto& [name, split] : splits) {
      note("eval " + std::string(to_string(mode)) + " " + name + ": " + std::to_string(split->size()) + " instances");
      const auto records = evaluate_split(backend(), ds, *split, s);
      for (const auto& r : records) run.append("eval", {{"split", name}, {"record", r}});
      const auto sum = summarize_eval(backend_label(), task_name(), mode, records);
      summary[name] = {{"n_total", sum.n_total}, {"n_parsed", sum.n_parsed}, {"n_correct", sum.n_correct}};
    }
    run.append("summary", summary);
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- probes

  StageResult probe_sweep() {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    const auto layers = probe_layers();
    auto [train, test, counts] = collect_activations(eval_run, layers);
    auto run = begin("probe-sweep", {{"layers", layers}}, {{"eval-cot", eval_run.run_id}});
    run.append("counts", counts);
    const LayerSweep sweep = layer_sweep(train, test, layers);
    for (const auto& [layer, res] : sweep) {
      nlohmann::json rec = {{"layer", layer},
                            {"auc", res.auc ? nlohmann::json(*res.auc) : nlohmann::json(nullptr)},
                            {"error", res.error},
                            {"probe", res.probe ? nlohmann::json(*res.probe) : nlohmann::json(nullptr)}};
      run.append("layer", rec);
    }
    const int best = select_best_layer(sweep);
    const Probe& probe = *sweep.at(best).probe;
    nlohmann::json summary = {{"best_layer", best}, {"auc", *sweep.at(best).auc}, {"counts", counts}};
    run.append("best", summary);
    write_probe_artifact("best.json", probe, run.run_id(), counts);
    note("best layer " + std::to_string(best) + " (AUC " + format_double(*sweep.at(best).auc) + ")");
    return finish(run, summary);
  }

  StageResult probe_fit(std::optional<int> layer) {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    int l = 0;
    std::map<std::string, std::string> up = {{"eval-cot", eval_run.run_id}};
    if (layer) {
      l = *layer;
    } else {
      const auto sweep_run = require("probe-sweep");
      l = store_.read(sweep_run.run_id, "best").at(0).at("best_layer").get<int>();
      up["probe-sweep"] = sweep_run.run_id;
    }
    backend().check_layer(l);
    const std::vector<int> layers = {l};
    auto [train, test, counts] = collect_activations(eval_run, layers);
    auto run = begin("probe-fit", {{"layer", l}}, up);
    Probe p = fit_probe(at_layer(train, l), l);
    p.test_auc = auc(score_all(p, at_layer(test, l)));
    run.append("probe", p);
    write_probe_artifact("layer_" + std::to_string(l) + ".json", p, run.run_id(), counts);
    return finish(run, {{"layer", l}, {"auc", *p.test_auc}, {"counts", counts}});
  }

  StageResult probe_lens(std::size_t k = 5) {
    const auto [probe, sweep_id] = steering_probe();
    auto run = begin("probe-lens", {{"k", k}, {"layer", probe.layer}}, {{"probe-sweep", sweep_id}});
    nlohmann::json summary = {{"layer", probe.layer}};
    try {
      const LensResult lens = logit_lens(probe, backend(), k);
      auto list = [](const std::vector<TokenLogit>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& t : v) a.push_back({{"token", t.token}, {"logit", t.logit}});
        return a;
      };
      summary["positive"] = list(lens.positive);
      summary["negative"] = list(lens.negative);
    } catch (const CapabilityError& e) {
      summary["unavailable"] = e.what();
      note(std::string("logit lens skipped: ") + e.what());
    }
    run.append("lens", summary);
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- steering

  StageResult steer_run() {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    const auto [probe, sweep_id] = steering_probe();
    const SweepConfig sc = sweep_config(probe.layer);
    const auto test = eval_records(eval_run, "test");
    const Subsets subsets = build_subsets(test);
    auto run = begin("steer", {{"sweep", sc}}, {{"eval-cot", eval_run.run_id}, {"probe-sweep", sweep_id}});
    nlohmann::json summary = {{"layer", probe.layer}, {"directions", nlohmann::json::object()}};
    for (const auto& w : subsets.warnings) {
      run.append("warning", {{"message", w}});
      note(w);
    }
    // probe_yes pushes examples answered no, probe_no those answered yes.
    for (auto kind : {DirectionKind::probe_yes, DirectionKind::probe_no}) {
      const auto& source = kind == DirectionKind::probe_yes ? subsets.no : subsets.yes;
      if (source.empty()) continue;
      const auto targets = make_targets(source, dataset());
      note("steer " + std::string(to_string(kind)) + ": " + std::to_string(targets.size()) + " candidates");
      const SweepResult res = run_probe_sweep(backend(), probe, targets, kind, sc, cfg_.decode);
      summary["directions"][std::string(to_string(kind))] = record_sweep(run, kind, targets.size(), res);
    }
    return finish(run, summary);
  }

  StageResult steer_baseline() {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    const auto [probe, sweep_id] = steering_probe();
    const SweepConfig sc = sweep_config(probe.layer);
    const auto test = eval_records(eval_run, "test");
    const auto candidates = make_targets(test, dataset());
    auto run = begin("steer-baseline", {{"sweep", sc}}, {{"eval-cot", eval_run.run_id}, {"probe-sweep", sweep_id}});
    note("orthogonal baseline: " + std::to_string(std::min(candidates.size(), sc.baseline_n)) + " examples");
    const SweepResult res = run_orthogonal_baseline(backend(), probe, candidates, sc, cfg_.decode);
    nlohmann::json summary = {{"layer", probe.layer},
                              {"orthogonal", record_sweep(run, DirectionKind::orthogonal, candidates.size(), res)}};
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- interventions

  StageResult intervene(InterventionKind kind) {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    const auto test = eval_records(eval_run, "test");
    EditorTemplates templates;
    nlohmann::json params = {{"n", cfg_.intervention_n}};
    InterventionContext ctx{&dataset(), nullptr, nullptr, cfg_.decode, retry_policy(cfg_.editor)};
    if (kind == InterventionKind::wrong_cot) {
      templates = {read_asset(kEditorExtractFile), read_asset(kEditorEditFile)};
      ctx.editor = &editor();
      ctx.templates = &templates;
      params["editor_model"] = editor().model_name();
      params["template_hash"] = hex64(fnv1a64(templates.extract + '\0' + templates.edit));
    }
    auto run = begin(intervene_kind(kind), params, {{"eval-cot", eval_run.run_id}});
    const auto res = measure_change_rate(backend(), test, kind, ctx, cfg_.intervention_n, stage_seed(intervene_kind(kind)));
    for (const auto& r : res.records) run.append("intervention", r);
    for (const auto& n : res.notes) note(n);
    const nlohmann::json summary = summary_json(res);
    run.append("summary", summary);
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- judge

  StageResult judge_classify() {
    const auto eval_run = require(eval_kind(PromptMode::cot));
    const auto steer = require("steer");
    const std::string tmpl = read_asset(kJudgeTemplateFile);
    const std::string backend_name = backend_label();
    const auto assignments = assignment_index(eval_run);

    std::map<SettingKey, std::vector<FlipRecord>> groups;
    for (const auto& j : store_.read(steer.run_id, "flip", "flips")) {
      FlipRecord f = j.get<FlipRecord>();
      if (!f.flipped || f.kind == DirectionKind::orthogonal) continue;
      groups[{backend_name, task_name(), f.kind, f.alpha}].push_back(std::move(f));
    }
    const Selection sel = select_for_classification(groups, stage_seed("judge"), cfg_.judge.sample_cap, cfg_.judge.min_n);

    auto run = begin("judge-classify",
                     {{"judge_model", judge().model_name()},
                      {"template_hash", hex64(fnv1a64(tmpl))},
                      {"sample_cap", cfg_.judge.sample_cap},
                      {"min_n", cfg_.judge.min_n}},
                     {{"eval-cot", eval_run.run_id}, {"steer", steer.run_id}});
    for (const auto& [key, n] : sel.excluded) run.append("excluded", {{"setting", setting_json(key)}, {"n", n}});

    std::vector<JudgeInput> inputs;
    std::vector<SettingKey> keys;
    std::vector<std::string> flip_ids;
    for (const auto& [key, records] : sel.selected) {
      for (const auto& f : records) {
        inputs.push_back(judge_input(key, f, assignments.at(f.instance_id)));
        keys.push_back(key);
        flip_ids.push_back(f.instance_id);
      }
    }
    note("judge: classifying " + std::to_string(inputs.size()) + " traces over " +
         std::to_string(sel.selected.size()) + " settings");
    const auto results = classify_batch(judge(), tmpl, inputs, cfg_.judge.client.openai.max_parallel,
                                        retry_policy(cfg_.judge.client));
    std::map<std::string, std::size_t> label_counts;
    std::size_t unclassifiable = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      run.append("classification", {{"setting", setting_json(keys[i])},
                                    {"flip", {{"run_id", steer.run_id}, {"instance_id", flip_ids[i]}}},
                                    {"input", inputs[i]},
                                    {"record", results[i]}});
      if (results[i].label) ++label_counts[std::string(to_string(*results[i].label))];
      else ++unclassifiable;
    }
    nlohmann::json summary = {{"n_settings", sel.selected.size()},
                              {"n_excluded_settings", sel.excluded.size()},
                              {"n_traces", inputs.size()},
                              {"n_unclassifiable", unclassifiable},
                              {"labels", label_counts}};
    run.append("summary", summary);
    return finish(run, summary);
  }

  // Re-classifies every classified trace of the latest classification run
  // and compares the two verdicts field by field.
  StageResult judge_audit() {
    const auto first = require("judge-classify");
    const std::string tmpl = read_asset(kJudgeTemplateFile);
    std::map<std::string, JudgeVerdict> run1;
    std::vector<JudgeInput> inputs;
    for (const auto& j : store_.read(first.run_id, "classification")) {
      const auto rec = j.at("record").get<ClassificationRecord>();
      if (!rec.verdict) continue;
      run1[rec.record_id] = *rec.verdict;
      inputs.push_back(j.at("input").get<JudgeInput>());
    }
    auto run = begin("judge-audit", {{"judge_model", judge().model_name()}, {"template_hash", hex64(fnv1a64(tmpl))}},
                     {{"judge-classify", first.run_id}});
    if (inputs.empty()) throw AuditError("judge audit: the classification run has no classified traces", {});
    const auto results = classify_batch(judge(), tmpl, inputs, cfg_.judge.client.openai.max_parallel,
                                        retry_policy(cfg_.judge.client));
    std::map<std::string, JudgeVerdict> run2;
    std::size_t dropped = 0;
    for (const auto& r : results) {
      run.append("reclassification", r);
      if (r.verdict) run2[r.record_id] = *r.verdict;
      else ++dropped;
    }
    nlohmann::json summary = to_json(consistency_audit(run1, run2));
    summary["n_unclassifiable_second_pass"] = dropped;
    run.append("audit", summary);
    return finish(run, summary);
  }

  // ---------------------------------------------------------------- reports

  // Writes one report under <out>/reports from the latest runs of every
  // backend and task in the store. Returns the files written.
  std::vector<std::filesystem::path> report(const std::string& name) {
    if (name == "all") {
      std::vector<std::filesystem::path> all;
      for (const auto& n : report_names()) {
        auto files = report(n);
        all.insert(all.end(), files.begin(), files.end());
      }
      return all;
    }
    std::vector<ManifestEntry> sources;
    for (const auto& kind : report_kinds(name)) {
      auto latest = latest_per_pair(kind);
      sources.insert(sources.end(), latest.begin(), latest.end());
    }
    return write_report(name, sources, out_ / "reports", true);
  }

  // Plot data and figures of a single run under <out>/reports/runs/<run_id>.
  std::vector<std::filesystem::path> emit(const std::string& run_id) {
    const ManifestEntry e = store_.find(run_id);
    std::vector<std::filesystem::path> out;
    for (const auto& name : report_names()) {
      const auto kinds = report_kinds(name);
      if (std::find(kinds.begin(), kinds.end(), e.kind) == kinds.end()) continue;
      auto files = write_report(name, {e}, out_ / "reports" / "runs" / run_id, false);
      out.insert(out.end(), files.begin(), files.end());
    }
    if (out.empty()) throw LookupError("run " + run_id + " (" + e.kind + ") has no report");
    return out;
  }

  // Every stage in dependency order, ending with all reports.
  std::vector<StageResult> run_all() {
    std::vector<StageResult> out;
    out.push_back(prepare_data());
    out.push_back(eval(PromptMode::cot));
    out.push_back(eval(PromptMode::no_cot));
    out.push_back(probe_sweep());
    out.push_back(probe_lens());
    out.push_back(steer_run());
    out.push_back(steer_baseline());
    out.push_back(intervene(InterventionKind::ellipses));
    out.push_back(intervene(InterventionKind::wrong_cot));
    out.push_back(judge_classify());
    out.push_back(judge_audit());
    report("all");
    return out;
  }

  static std::string eval_kind(PromptMode m) { return "eval-" + std::string(to_string(m)); }
  static std::string intervene_kind(InterventionKind k) { return "intervene-" + std::string(to_string(k)); }

 private:
  struct Activations {
    std::vector<ActivationRecord> train;
    std::vector<ActivationRecord> test;
    nlohmann::json counts;
  };

  void note(const std::string& msg) const {
    if (log_) log_(msg);
  }

  static std::vector<std::string> report_kinds(const std::string& name) {
    if (name == "accuracy") return {eval_kind(PromptMode::cot), eval_kind(PromptMode::no_cot)};
    if (name == "probe-auc") return {"probe-sweep"};
    if (name == "flip-curves" || name == "parse-failures") return {"steer", "steer-baseline"};
    if (name == "lens") return {"probe-lens"};
    if (name == "classification") return {"judge-classify"};
    if (name == "interventions")
      return {intervene_kind(InterventionKind::ellipses), intervene_kind(InterventionKind::wrong_cot)};
    if (name == "audit") return {"judge-audit"};
    throw ConfigError("unknown report: " + name);
  }

  std::vector<std::filesystem::path> write_report(const std::string& name, const std::vector<ManifestEntry>& sources,
                                                  const std::filesystem::path& dir, bool merge_pairs) {
    std::vector<std::filesystem::path> written;
    auto emit_file = [&](const std::string& file, std::string_view text) {
      detail::write_text(dir / file, text);
      written.push_back(dir / file);
    };
    auto stem = [](const ManifestEntry& e) { return detail::file_stem_safe(e.backend + "_" + e.task); };

    if (name == "accuracy") {
      std::vector<EvalSummary> sums;
      for (const auto& e : sources) {
        const PromptMode mode = e.kind == eval_kind(PromptMode::cot) ? PromptMode::cot : PromptMode::no_cot;
        sums.push_back(summarize_eval(e.backend, e.task, mode, eval_records(e, "test")));
      }
      emit_file("accuracy.csv", accuracy_csv(accuracy_table(sums)));
      emit_file("accuracy.json", nlohmann::json{{"convention", kAccuracyConvention}}.dump(2) + "\n");
    } else if (name == "probe-auc") {
      CsvWriter w({"backend", "task", "layer", "auc", "best", "error"});
      for (const auto& e : sources) {
        const int best = store_.read(e.run_id, "best").at(0).at("best_layer").get<int>();
        for (const auto& l : store_.read(e.run_id, "layer")) {
          const int layer = l.at("layer").get<int>();
          w.row({e.backend, e.task, std::to_string(layer), l["auc"].is_null() ? "" : csv_number(l["auc"].get<double>()),
                 csv_bool(layer == best), l.at("error").get<std::string>()});
        }
      }
      emit_file("probe_auc.csv", w.str());
    } else if (name == "flip-curves" || name == "parse-failures") {
      // One curve set per (backend, task); the report merges a pair's probe
      // sweep with its baseline, a single-run emit shows that run alone.
      std::map<std::pair<std::string, std::string>, std::vector<SweepPoint>> points;
      std::map<std::pair<std::string, std::string>, std::size_t> min_parsed;
      for (const auto& e : sources) {
        if (merge_pairs && e.kind == "steer-baseline") continue;
        std::vector<ManifestEntry> runs = {e};
        if (merge_pairs)
          if (auto base = latest_any("steer-baseline", e.backend, e.task)) runs.push_back(*base);
        auto& pts = points[{e.backend, e.task}];
        for (const auto& r : runs)
          for (const auto& p : store_.read(r.run_id, "point")) pts.push_back(p.get<SweepPoint>());
        min_parsed[{e.backend, e.task}] = e.config.at("params").at("sweep").value("min_parsed", std::size_t{20});
      }
      std::vector<FlipCurveRow> all;
      for (const auto& [key, pts] : points) {
        const auto rows = aggregate_flip_curves(key.first, key.second, pts, min_parsed.at(key));
        all.insert(all.end(), rows.begin(), rows.end());
        const std::string title = key.first + " / " + key.second;
        const std::string file_stem = detail::file_stem_safe(key.first + "_" + key.second);
        if (name == "flip-curves") emit_file("flip_curves_" + file_stem + ".svg", flip_curve_svg(rows, title));
        else emit_file("parse_failures_" + file_stem + ".svg", parse_failure_svg(rows, title));
      }
      if (name == "flip-curves") {
        emit_file("flip_curves.csv", flip_curves_csv(all));
        emit_file("flip_curves.json", nlohmann::json{{"convention", kFlipRateConvention}}.dump(2) + "\n");
      } else {
        CsvWriter w({"backend", "task", "direction", "alpha", "n_total", "n_parsed", "parse_failure_rate"});
        for (const auto& r : all)
          w.row({r.backend, r.task, std::string(to_string(r.direction)), csv_number(r.alpha), csv_number(r.n_total),
                 csv_number(r.n_parsed), csv_number(r.parse_failure_rate)});
        emit_file("parse_failures.csv", w.str());
      }
    } else if (name == "lens") {
      std::string text;
      for (const auto& e : sources) {
        const auto rec = store_.read(e.run_id, "lens").at(0);
        if (rec.contains("unavailable")) continue;
        LensResult lens;
        for (const auto& t : rec.at("positive")) lens.positive.push_back({t.at("token"), t.at("logit")});
        for (const auto& t : rec.at("negative")) lens.negative.push_back({t.at("token"), t.at("logit")});
        std::string csv = logit_lens_csv(e.backend, e.task, rec.at("layer").get<int>(), lens);
        if (!text.empty()) csv = csv.substr(csv.find('\n') + 1);  // one header for the concatenation
        text += csv;
      }
      if (text.empty()) text = logit_lens_csv("", "", 0, {});
      emit_file("logit_lens.csv", text);
    } else if (name == "classification") {
      for (const auto& e : sources) {
        std::map<std::string, LabeledSetting> settings;
        for (const auto& j : store_.read(e.run_id, "classification")) {
          const auto& s = j.at("setting");
          LabeledSetting& ls = settings[s.at("id").get<std::string>()];
          ls.key = {s.at("backend"), s.at("task"), parse_direction_kind(s.at("direction").get<std::string>()),
                    s.at("alpha").get<double>()};
          const auto rec = j.at("record").get<ClassificationRecord>();
          if (rec.label) ls.labels.push_back(*rec.label);
          else ++ls.n_unclassifiable;
        }
        std::vector<LabeledSetting> list;
        for (auto& [_, s] : settings) list.push_back(std::move(s));
        const auto series = classification_series(list);
        emit_file("classification_" + stem(e) + ".csv", classification_csv(series));
        emit_file("classification_" + stem(e) + ".svg", classification_svg(series, e.backend + " / " + e.task));
      }
    } else if (name == "interventions") {
      CsvWriter w({"backend", "task", "intervention", "n_requested", "n_sampled", "n_skipped", "n_non_minimal",
                   "n_parsed", "n_changed", "rate", "ci_low", "ci_high"});
      for (const auto& e : sources) {
        const auto s = store_.read(e.run_id, "summary").at(0);
        w.row({e.backend, e.task, s.at("kind").get<std::string>(), csv_number(s.at("n_requested").get<std::size_t>()),
               csv_number(s.at("n_sampled").get<std::size_t>()), csv_number(s.at("n_skipped").get<std::size_t>()),
               csv_number(s.at("n_non_minimal").get<std::size_t>()), csv_number(s.at("n_parsed").get<std::size_t>()),
               csv_number(s.at("n_changed").get<std::size_t>()), csv_number(s.at("rate").get<double>()),
               csv_number(s.at("ci_low").get<double>()), csv_number(s.at("ci_high").get<double>())});
      }
      emit_file("interventions.csv", w.str());
    } else if (name == "audit") {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& e : sources) {
        auto a = store_.read(e.run_id, "audit").at(0);
        a["backend"] = e.backend;
        a["task"] = e.task;
        a["run_id"] = e.run_id;
        out.push_back(a);
      }
      emit_file("audit.json", out.dump(2) + "\n");
    } else {
      throw ConfigError("unknown report: " + name);
    }
    return written;
  }

  std::uint64_t stage_seed(std::string_view stage) const { return SeedMixer(cfg_.seed).add(stage).value(); }

  static RetryPolicy retry_policy(const ClientSettings& c) {
    RetryPolicy p;
    p.max_retries = c.max_retries;
    return p;
  }

  void materialize_synthetic() {
    const auto task_dir = out_ / "data" / std::string(to_string(cfg_.task.name));
    write_synthetic_source(cfg_.task.name, task_dir, cfg_.task.synthetic_items, cfg_.seed);
    const auto src = std::filesystem::path(cfg_.task.data_dir) / std::string(to_string(cfg_.task.name));
    for (const char* f : {"fewshot_cot.txt", "fewshot_nocot.txt"})
      std::filesystem::copy_file(src / f, task_dir / f, std::filesystem::copy_options::overwrite_existing);
  }

  std::string read_asset(std::string_view file) const {
    return read_text_file(std::filesystem::path(cfg_.assets_dir) / std::string(file));
  }

  ChatClient& judge() {
    if (!judge_) {
      if (cfg_.judge.client.provider == "openai") judge_ = std::make_unique<OpenAIChatClient>(cfg_.judge.client.openai);
      else judge_ = make_synthetic_judge();
    }
    return *judge_;
  }

  ChatClient& editor() {
    if (!editor_) {
      if (cfg_.editor.provider == "openai") editor_ = std::make_unique<OpenAIChatClient>(cfg_.editor.openai);
      else editor_ = make_synthetic_editor();
    }
    return *editor_;
  }

  RunWriter begin(const std::string& kind, nlohmann::json params, const std::map<std::string, std::string>& upstream) {
    const nlohmann::json config = {{"stage", kind},
                                   {"experiment_hash", experiment_hash_},
                                   {"experiment", to_json(cfg_)},
                                   {"params", std::move(params)},
                                   {"upstream", upstream}};
    auto w = store_.create_run(kind, backend_label(), task_name(), config);
    note(kind + ": run " + w.run_id());
    return w;
  }

  static StageResult finish(RunWriter& run, nlohmann::json summary) {
    run.flush();
    return {run.run_id(), std::move(summary)};
  }

  // Latest run of a kind for this backend, task and experiment.
  std::optional<ManifestEntry> latest_matching(const std::string& kind) {
    std::optional<ManifestEntry> out;
    const std::string b = backend_label();
    for (const auto& e : store_.runs_of_kind(kind))
      if (e.backend == b && e.task == task_name() && e.config.value("experiment_hash", "") == experiment_hash_) out = e;
    return out;
  }

  ManifestEntry require(const std::string& kind) {
    if (auto e = latest_matching(kind)) return *e;
    throw LookupError("no " + kind + " run for " + backend_label() + "/" + task_name() +
                      " under this config; run that stage first");
  }

  std::map<std::string, std::string> upstream_ids(std::initializer_list<std::string> kinds) {
    std::map<std::string, std::string> out;
    for (const auto& k : kinds)
      if (auto e = latest_matching(k)) out[k] = e->run_id;
    return out;
  }

  std::optional<ManifestEntry> latest_any(const std::string& kind, const std::string& backend,
                                          const std::string& task) const {
    return store_.latest(kind, backend, task);
  }

  // The latest run of a kind for every (backend, task) pair, in pair order.
  std::vector<ManifestEntry> latest_per_pair(const std::string& kind) const {
    std::map<std::pair<std::string, std::string>, ManifestEntry> by_pair;
    for (const auto& e : store_.runs_of_kind(kind)) by_pair[{e.backend, e.task}] = e;
    std::vector<ManifestEntry> out;
    for (auto& [_, e] : by_pair) out.push_back(std::move(e));
    return out;
  }

  std::vector<EvalRecord> eval_records(const ManifestEntry& run, const std::string& split) const {
    std::vector<EvalRecord> out;
    for (const auto& j : store_.read(run.run_id, "eval"))
      if (j.at("split") == split) out.push_back(j.at("record").get<EvalRecord>());
    return out;
  }

  std::map<std::string, OptionAssignment> assignment_index(const ManifestEntry& eval_run) const {
    std::map<std::string, OptionAssignment> out;
    for (const auto& j : store_.read(eval_run.run_id, "eval")) {
      const auto r = j.at("record").get<EvalRecord>();
      out[r.instance_id] = r.assignment;
    }
    return out;
  }

  std::vector<int> probe_layers() {
    if (!cfg_.layers.empty()) {
      for (int l : cfg_.layers) backend().check_layer(l);
      return cfg_.layers;
    }
    std::vector<int> all;
    for (int l = 0; l < backend().descriptor().num_layers; ++l) all.push_back(l);
    return all;
  }

  std::filesystem::path cache_file() {
    nlohmann::json key = {{"name", cfg_.backend.name}};
    if (cfg_.backend.name == "planted") key["planted"] = cfg_.backend.planted;
    else key["url"] = cfg_.backend.url;
    const std::string dir = detail::file_stem_safe(backend_label() + "-" + config_hash(key).substr(0, 12));
    return out_ / "cache" / "activations" / dir / (task_name() + ".jsonl");
  }

  // Parsed CoT-mode answers label the activations; parse failures are left out.
  Activations collect_activations(const ManifestEntry& eval_run, const std::vector<int>& layers) {
    ActivationCache cache(cache_file());
    Activations out;
    nlohmann::json counts = nlohmann::json::object();
    for (const std::string split : {"train", "test"}) {
      const auto records = eval_records(eval_run, split);
      const auto targets = make_targets(records, dataset());
      auto& dst = split == "train" ? out.train : out.test;
      std::size_t n_yes = 0;
      for (const auto& t : targets) {
        dst.push_back({t.instance_id, t.original_answer, LabelSource::model_answer,
                       capture_cached(backend(), cache, t.instance_id, t.prompt, layers)});
        if (t.original_answer == Answer::yes) ++n_yes;
      }
      counts[split] = {{"n_records", records.size()},
                       {"n_unparsed_skipped", records.size() - targets.size()},
                       {"n_yes", n_yes},
                       {"n_no", targets.size() - n_yes}};
    }
    out.counts = counts;
    return out;
  }

  void write_probe_artifact(const std::string& file, const Probe& p, const std::string& run_id,
                            const nlohmann::json& counts) {
    const nlohmann::json j = {{"backend", backend_label()}, {"task", task_name()}, {"run_id", run_id},
                              {"experiment_hash", experiment_hash_}, {"seed", cfg_.seed}, {"layer", p.layer},
                              {"auc", p.test_auc ? nlohmann::json(*p.test_auc) : nlohmann::json(nullptr)}, {"counts", counts},
                              {"probe", p}};
    detail::write_text(out_ / "probes" / detail::file_stem_safe(backend_label()) / task_name() / file, j.dump() + "\n");
  }

  // The probe steering uses: the best layer, or the configured one.
  std::pair<Probe, std::string> steering_probe() {
    const auto sweep_run = require("probe-sweep");
    const int layer = cfg_.auto_layer ? store_.read(sweep_run.run_id, "best").at(0).at("best_layer").get<int>()
                                      : cfg_.steering.layer;
    for (const auto& l : store_.read(sweep_run.run_id, "layer")) {
      if (l.at("layer").get<int>() != layer) continue;
      if (l.at("probe").is_null())
        throw SweepError("no probe at layer " + std::to_string(layer) + ": " + l.at("error").get<std::string>());
      return {l.at("probe").get<Probe>(), sweep_run.run_id};
    }
    throw LookupError("layer " + std::to_string(layer) + " was not part of probe sweep " + sweep_run.run_id);
  }

  SweepConfig sweep_config(int layer) const {
    SweepConfig sc = cfg_.steering;
    sc.layer = layer;
    sc.seed = stage_seed("steer");
    return sc;
  }

  nlohmann::json record_sweep(RunWriter& run, DirectionKind kind, std::size_t n_candidates, const SweepResult& res) {
    for (const auto& p : res.points) run.append("point", p);
    for (const auto& f : res.flips) run.append_to("flips", "flip", f);
    nlohmann::json s = {{"n_candidates", n_candidates},
                        {"n_points", res.points.size()},
                        {"terminated_at", res.terminated_at ? nlohmann::json(*res.terminated_at) : nlohmann::json(nullptr)}};
    if (res.terminated_at) {
      run.append("terminated", {{"direction", to_string(kind)}, {"alpha", *res.terminated_at}});
      note(std::string(to_string(kind)) + ": no parseable answers at alpha " + format_double(*res.terminated_at) +
           "; larger magnitudes skipped");
    }
    return s;
  }

  static nlohmann::json setting_json(const SettingKey& k) {
    return {{"id", setting_id(k)}, {"backend", k.backend}, {"task", k.task},
            {"direction", to_string(k.direction)}, {"alpha", k.alpha}};
  }

  JudgeInput judge_input(const SettingKey& key, const FlipRecord& f, const OptionAssignment& a) {
    const TaskInstance& inst = instance(f.instance_id);
    const Answer steered = *to_answer(f.steered_answer);
    return {setting_id(key) + "/" + f.instance_id, inst.question_text, answer_display(inst.task, a, inst.gold_answer),
            answer_display(inst.task, a, steered), f.generation.text};
  }

  const TaskInstance& instance(const std::string& id) {
    if (instances_.empty()) {
      for (const auto& t : dataset().train) instances_[t.instance_id] = &t;
      for (const auto& t : dataset().test) instances_[t.instance_id] = &t;
    }
    auto it = instances_.find(id);
    if (it == instances_.end()) throw LookupError("instance " + id + " not in dataset");
    return *it->second;
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  RunStore store_;
  Logger log_;
  std::string experiment_hash_;
  std::optional<TaskDataset> dataset_;
  std::unique_ptr<InferenceBackend> backend_;
  std::unique_ptr<ChatClient> judge_;
  std::unique_ptr<ChatClient> editor_;
  std::map<std::string, const TaskInstance*> instances_;
};

}  // namespace precot
