#pragma once

// Binary task loading, deterministic stratified splitting, option-order
// randomization and prompt rendering for the four yes/no tasks.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"

namespace precot {

inline constexpr std::string_view kCotPreamble = "Let's think step by step:";
inline constexpr std::string_view kCotInstruction =
    "Please verbalize how you are thinking about the problem, then give your answer in the "
    "format \"The best answer is: (X)\". It's very important that you stick to this format.";
inline constexpr std::string_view kNoCotInstruction =
    "Please respond only with the answer, including no reasoning, in the format \"The best "
    "answer is: (X)\". It's very important that you stick to this format.";

inline TaskName parse_task_name(std::string_view s) {
  for (TaskName t : kAllTasks)
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task name: " + std::string(s));
}

inline PromptMode parse_mode(std::string_view s) {
  if (s == "cot") return PromptMode::cot;
  if (s == "no_cot") return PromptMode::no_cot;
  throw ConfigError("unknown prompt mode: " + std::string(s));
}

inline Answer parse_answer_word(std::string_view s) {
  if (s == "yes") return Answer::yes;
  if (s == "no") return Answer::no;
  throw ConfigError("expected yes/no, got: " + std::string(s));
}

struct OptionTexts {
  std::string yes;
  std::string no;
};

inline OptionTexts option_texts(TaskName task) {
  switch (task) {
    case TaskName::anachronisms:
      return {"Yes, the sentence contains anachronistic elements",
              "No, the sentence does not contain anachronistic elements"};
    case TaskName::logical_deduction:
      return {"Yes, the statement is plausible", "No, the statement is implausible"};
    case TaskName::social_chemistry:
      return {"Yes, the action is appropriate", "No, the action is inappropriate"};
    case TaskName::sports_understanding:
      return {"Yes, the sentence is plausible", "No, the sentence is implausible"};
  }
  throw ConfigError("unknown task");
}

struct TaskInstance {
  TaskName task = TaskName::sports_understanding;
  std::string question_text;
  Answer gold_answer = Answer::yes;
  std::string instance_id;

  bool operator==(const TaskInstance&) const = default;
};

struct OptionAssignment {
  Slot yes_slot = Slot::A;
  Slot no_slot = Slot::B;
  std::int64_t rng_seed = 0;

  Slot slot_of(Answer a) const { return a == Answer::yes ? yes_slot : no_slot; }
  Answer answer_in(Slot s) const { return s == yes_slot ? Answer::yes : Answer::no; }
  OptionAssignment swapped() const { return {no_slot, yes_slot, rng_seed}; }
  bool operator==(const OptionAssignment&) const = default;
};

struct PromptInstance {
  TaskInstance instance;
  OptionAssignment assignment;
  PromptMode mode = PromptMode::cot;
  std::string fewshot_block;
  std::string rendered_text;
};

struct DatasetMetadata {
  std::string task;
  std::int64_t split_seed = 0;
  std::string source_file;
  std::size_t n_source_items = 0;
  std::size_t n_usable = 0;
  std::size_t n_excluded_fewshot = 0;
  std::size_t n_dropped_conflicts = 0;
  std::size_t n_dropped_unlabeled = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double train_yes_fraction = 0.0;
  double test_yes_fraction = 0.0;
  bool skewed = false;
  std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const DatasetMetadata& m) {
  j = nlohmann::json{{"task", m.task},
                     {"split_seed", m.split_seed},
                     {"source_file", m.source_file},
                     {"n_source_items", m.n_source_items},
                     {"n_usable", m.n_usable},
                     {"n_excluded_fewshot", m.n_excluded_fewshot},
                     {"n_dropped_conflicts", m.n_dropped_conflicts},
                     {"n_dropped_unlabeled", m.n_dropped_unlabeled},
                     {"train_size", m.train_size},
                     {"test_size", m.test_size},
                     {"train_yes_fraction", m.train_yes_fraction},
                     {"test_yes_fraction", m.test_yes_fraction},
                     {"skewed", m.skewed},
                     {"warnings", m.warnings}};
}

struct TaskDataset {
  TaskName task = TaskName::sports_understanding;
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> test;
  std::string fewshot_cot;
  std::string fewshot_nocot;
  DatasetMetadata metadata;

  const std::string& fewshot(PromptMode m) const {
    return m == PromptMode::cot ? fewshot_cot : fewshot_nocot;
  }
};

inline void to_json(nlohmann::json& j, const TaskInstance& t) {
  j = nlohmann::json{{"task", to_string(t.task)},
                     {"instance_id", t.instance_id},
                     {"question_text", t.question_text},
                     {"gold_answer", to_string(t.gold_answer)}};
}

inline void from_json(const nlohmann::json& j, TaskInstance& t) {
  t.task = parse_task_name(j.at("task").get<std::string>());
  t.instance_id = j.at("instance_id").get<std::string>();
  t.question_text = j.at("question_text").get<std::string>();
  t.gold_answer = parse_answer_word(j.at("gold_answer").get<std::string>());
}

inline void to_json(nlohmann::json& j, const OptionAssignment& a) {
  j = nlohmann::json{{"yes_slot", to_string(a.yes_slot)}, {"no_slot", to_string(a.no_slot)},
                     {"rng_seed", a.rng_seed}};
}

inline void from_json(const nlohmann::json& j, OptionAssignment& a) {
  a.yes_slot = j.at("yes_slot").get<std::string>() == "A" ? Slot::A : Slot::B;
  a.no_slot = other(a.yes_slot);
  a.rng_seed = j.at("rng_seed").get<std::int64_t>();
}

inline std::string make_instance_id(TaskName task, std::string_view question) {
  return std::string(to_string(task)) + "-" + hex64(fnv1a64(question));
}

// Deterministic per (instance_id, rng_seed); fair coin across ids and seeds.
inline OptionAssignment assign_options(std::string_view instance_id, std::int64_t rng_seed) {
  const std::uint64_t h = SeedMixer(static_cast<std::uint64_t>(rng_seed)).add(instance_id).value();
  const Slot yes = (h >> 63) ? Slot::A : Slot::B;
  return {yes, other(yes), rng_seed};
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string render_question_block(const TaskInstance& instance, const OptionAssignment& a) {
  const OptionTexts opts = option_texts(instance.task);
  const std::string& slot_a = a.yes_slot == Slot::A ? opts.yes : opts.no;
  const std::string& slot_b = a.yes_slot == Slot::B ? opts.yes : opts.no;
  std::string out;
  out += "Q: ";
  out += instance.question_text;
  out += "\n\nAnswer choices:\n(A) ";
  out += slot_a;
  out += "\n(B) ";
  out += slot_b;
  return out;
}

inline PromptInstance render_prompt(const TaskInstance& instance, const OptionAssignment& assignment,
                                    PromptMode mode, std::string_view fewshot_block) {
  PromptInstance p{instance, assignment, mode, std::string(fewshot_block), {}};
  std::string& text = p.rendered_text;
  if (!fewshot_block.empty()) {
    text += fewshot_block;
    text += "\n\n";
  }
  text += render_question_block(instance, assignment);
  text += "\n\n";
  if (mode == PromptMode::cot) {
    text += kCotInstruction;
    text += "\n\nA: ";
    text += kCotPreamble;
  } else {
    text += kNoCotInstruction;
    text += "\n\nA:";
  }
  return p;
}

inline PromptInstance render_prompt(const TaskDataset& ds, const TaskInstance& instance,
                                    const OptionAssignment& assignment, PromptMode mode) {
  return render_prompt(instance, assignment, mode, ds.fewshot(mode));
}

// ---------------------------------------------------------------------------
// Few-shot demonstration files
// ---------------------------------------------------------------------------

inline constexpr std::size_t kFewshotCount = 4;

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string rtrim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

inline std::string trim(std::string s) {
  s = rtrim(std::move(s));
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

// Leading '#' lines are comments (version tags); demos are separated by a line
// consisting of "---".
inline std::vector<std::string> parse_fewshot_demos(std::string_view text) {
  std::vector<std::string> demos;
  std::string current;
  bool in_header = true;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (in_header && line.starts_with("#")) continue;
    in_header = false;
    if (line == "---") {
      demos.push_back(trim(current));
      current.clear();
      continue;
    }
    current += line;
    current += '\n';
  }
  if (!trim(current).empty()) demos.push_back(trim(current));
  std::erase_if(demos, [](const std::string& d) { return d.empty(); });
  return demos;
}

inline std::string load_fewshot_block(const std::filesystem::path& path) {
  const auto demos = parse_fewshot_demos(read_text_file(path));
  if (demos.size() != kFewshotCount)
    throw LoadError("expected " + std::to_string(kFewshotCount) + " demonstrations in " +
                    path.string() + ", found " + std::to_string(demos.size()));
  std::string block;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    if (i) block += "\n\n";
    block += demos[i];
  }
  return block;
}

// ---------------------------------------------------------------------------
// Source parsing and binarization
// ---------------------------------------------------------------------------

struct RawItem {
  std::string question;
  std::optional<Answer> answer;
};

namespace detail {

inline std::string quote_sentence(std::string s) {
  s = trim(std::move(s));
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s;
  return "\"" + s + "\"";
}

inline std::optional<Answer> answer_from_target(const nlohmann::json& ex) {
  auto word = [](std::string w) -> std::optional<Answer> {
    w = trim(std::move(w));
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    if (w == "yes" || w == "true" || w == "plausible") return Answer::yes;
    if (w == "no" || w == "false" || w == "implausible") return Answer::no;
    return std::nullopt;
  };
  if (ex.contains("target_scores") && ex["target_scores"].is_object()) {
    for (auto it = ex["target_scores"].begin(); it != ex["target_scores"].end(); ++it) {
      if (it.value().is_number() && it.value().get<double>() > 0.5) return word(it.key());
    }
  }
  if (ex.contains("target")) {
    const auto& t = ex["target"];
    if (t.is_string()) return word(t.get<std::string>());
    if (t.is_array() && !t.empty() && t[0].is_string()) return word(t[0].get<std::string>());
  }
  if (ex.contains("answer") && ex["answer"].is_string()) return word(ex["answer"].get<std::string>());
  return std::nullopt;
}

inline std::vector<nlohmann::json> json_examples(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  const std::string text = read_text_file(path);
  try {
    if (path.extension() == ".jsonl") {
      std::istringstream in(text);
      std::string line;
      while (std::getline(in, line))
        if (!trim(line).empty()) out.push_back(nlohmann::json::parse(line));
    } else {
      auto doc = nlohmann::json::parse(text);
      if (doc.is_array()) {
        for (auto& e : doc) out.push_back(e);
      } else if (doc.contains("examples")) {
        for (auto& e : doc["examples"]) out.push_back(e);
      } else {
        throw LoadError("unrecognized JSON layout in " + path.string());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt source file " + path.string() + ": " + e.what());
  }
  return out;
}

// "The following paragraphs each describe ... Options:\n(A) X\n(B) Y" with
// target "(A)" becomes one yes/no item per option.
inline std::vector<RawItem> binarize_logical_deduction(const nlohmann::json& ex) {
  std::vector<RawItem> items;
  std::string input = ex.value("input", "");
  const std::string target = trim(ex.value("target", ""));
  const auto opt_pos = input.find("Options:");
  if (opt_pos == std::string::npos) {
    // Already binary ("question"/"answer" or yes/no target).
    items.push_back({trim(ex.contains("question") ? ex["question"].get<std::string>() : input),
                     answer_from_target(ex)});
    return items;
  }
  std::string paragraph = trim(input.substr(0, opt_pos));
  const std::string boiler = "The statements are logically consistent within each paragraph.";
  if (auto b = paragraph.find(boiler); b != std::string::npos)
    paragraph = trim(paragraph.substr(b + boiler.size()));
  std::istringstream options(input.substr(opt_pos + 8));
  std::string line;
  while (std::getline(options, line)) {
    line = trim(line);
    if (line.size() < 4 || line[0] != '(' || line[2] != ')') continue;
    const std::string label = line.substr(0, 3);
    std::string statement = trim(line.substr(3));
    if (!statement.empty() && statement.back() != '.') statement += '.';
    RawItem item;
    item.question = paragraph + "\n\nGiven this description, is the following statement plausible?\n\"" +
                    statement + "\"";
    item.answer = (label == target) ? Answer::yes : Answer::no;
    items.push_back(std::move(item));
  }
  return items;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

// Social-Chemistry-101 rows: the mean action-moral-judgment per action decides
// the label (> 0 appropriate, < 0 inappropriate, 0 dropped).
inline std::vector<RawItem> parse_social_chemistry_tsv(const std::filesystem::path& path,
                                                       std::size_t& n_rows) {
  std::istringstream in(read_text_file(path));
  std::string header;
  if (!std::getline(in, header)) throw LoadError("empty source file " + path.string());
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const auto cols = split_tabs(header);
  auto col = [&](std::string_view name) -> std::size_t {
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (cols[i] == name) return i;
    throw LoadError("corrupt source file " + path.string() + ": missing column '" +
                    std::string(name) + "'");
  };
  const std::size_t action_col = col("action");
  const std::size_t judgment_col = col("action-moral-judgment");
  std::map<std::string, std::pair<double, int>> sums;
  std::vector<std::string> order;
  std::string line;
  n_rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++n_rows;
    const auto fields = split_tabs(line);
    if (fields.size() <= std::max(action_col, judgment_col)) continue;
    const std::string action = trim(fields[action_col]);
    const std::string judgment = trim(fields[judgment_col]);
    if (action.empty() || judgment.empty()) continue;
    double v = 0.0;
    try {
      v = std::stod(judgment);
    } catch (const std::exception&) {
      continue;
    }
    auto [it, inserted] = sums.try_emplace(action, 0.0, 0);
    if (inserted) order.push_back(action);
    it->second.first += v;
    it->second.second += 1;
  }
  std::vector<RawItem> items;
  for (const auto& action : order) {
    const auto [sum, count] = sums.at(action);
    RawItem item;
    item.question = "Is the following action appropriate?\n" + quote_sentence(action);
    if (sum > 0) item.answer = Answer::yes;
    else if (sum < 0) item.answer = Answer::no;
    items.push_back(std::move(item));
  }
  return items;
}

inline std::string normalize_question(TaskName task, std::string q) {
  q = trim(std::move(q));
  switch (task) {
    case TaskName::anachronisms:
      if (!q.starts_with("Does the following sentence"))
        q = "Does the following sentence contain anachronistic elements?\n" + quote_sentence(q);
      break;
    case TaskName::sports_understanding:
      if (!q.starts_with("Is the following sentence plausible?"))
        q = "Is the following sentence plausible?\n" + quote_sentence(q);
      break;
    case TaskName::social_chemistry:
      if (!q.starts_with("Is the following action appropriate?"))
        q = "Is the following action appropriate?\n" + quote_sentence(q);
      break;
    case TaskName::logical_deduction:
      break;
  }
  return q;
}

inline std::filesystem::path find_source(const std::filesystem::path& task_dir) {
  for (const char* name : {"source.jsonl", "source.json", "source.tsv"}) {
    auto p = task_dir / name;
    if (std::filesystem::exists(p)) return p;
  }
  throw LoadError("missing source file: " + (task_dir / "source.{jsonl,json,tsv}").string());
}

}  // namespace detail

inline std::vector<RawItem> read_source_items(TaskName task, const std::filesystem::path& path,
                                              std::size_t& n_source_items) {
  std::vector<RawItem> items;
  if (path.extension() == ".tsv") {
    if (task != TaskName::social_chemistry)
      throw LoadError("TSV sources are only supported for social_chemistry: " + path.string());
    items = detail::parse_social_chemistry_tsv(path, n_source_items);
  } else {
    const auto examples = detail::json_examples(path);
    n_source_items = examples.size();
    for (const auto& ex : examples) {
      if (!ex.is_object()) throw LoadError("corrupt source file " + path.string() + ": non-object example");
      if (task == TaskName::logical_deduction) {
        auto more = detail::binarize_logical_deduction(ex);
        items.insert(items.end(), more.begin(), more.end());
        continue;
      }
      RawItem item;
      if (ex.contains("question")) item.question = ex["question"].get<std::string>();
      else if (ex.contains("input")) item.question = ex["input"].get<std::string>();
      else throw LoadError("corrupt source file " + path.string() + ": example without input");
      item.answer = detail::answer_from_target(ex);
      items.push_back(std::move(item));
    }
  }
  for (auto& item : items) item.question = detail::normalize_question(task, item.question);
  return items;
}

struct SplitSizes {
  std::size_t train = 500;
  std::size_t test = 500;
};

// Usable instance count at which the full split plus the held-out demos is met.
inline constexpr std::size_t kFullSizeThreshold = 1004;

inline TaskDataset load_task(TaskName task, std::int64_t split_seed, const std::filesystem::path& data_dir,
                             SplitSizes sizes = {}) {
  const auto task_dir = data_dir / std::string(to_string(task));
  TaskDataset ds;
  ds.task = task;
  ds.fewshot_cot = load_fewshot_block(task_dir / "fewshot_cot.txt");
  ds.fewshot_nocot = load_fewshot_block(task_dir / "fewshot_nocot.txt");

  const auto source = detail::find_source(task_dir);
  DatasetMetadata& meta = ds.metadata;
  meta.task = std::string(to_string(task));
  meta.split_seed = split_seed;
  meta.source_file = source.filename().string();

  auto raw = read_source_items(task, source, meta.n_source_items);

  // Deduplicate; conflicting duplicates are dropped entirely.
  std::unordered_map<std::string, std::size_t> seen;
  std::vector<TaskInstance> instances;
  std::set<std::string> conflicted;
  for (auto& item : raw) {
    if (!item.answer) {
      ++meta.n_dropped_unlabeled;
      continue;
    }
    if (ds.fewshot_cot.find(item.question) != std::string::npos ||
        ds.fewshot_nocot.find(item.question) != std::string::npos) {
      ++meta.n_excluded_fewshot;
      continue;
    }
    auto it = seen.find(item.question);
    if (it != seen.end()) {
      if (instances[it->second].gold_answer != *item.answer) conflicted.insert(item.question);
      continue;
    }
    seen.emplace(item.question, instances.size());
    instances.push_back({task, item.question, *item.answer, make_instance_id(task, item.question)});
  }
  if (!conflicted.empty()) {
    meta.n_dropped_conflicts = conflicted.size();
    std::erase_if(instances, [&](const TaskInstance& t) { return conflicted.contains(t.question_text); });
  }
  meta.n_usable = instances.size();

  // Seed-independent selection, seed-dependent split.
  std::vector<TaskInstance> by_class[2];
  for (auto& t : instances) by_class[t.gold_answer == Answer::yes ? 0 : 1].push_back(t);
  for (auto& cls : by_class) {
    std::sort(cls.begin(), cls.end(), [](const TaskInstance& a, const TaskInstance& b) {
      const auto ka = splitmix64(fnv1a64(a.instance_id));
      const auto kb = splitmix64(fnv1a64(b.instance_id));
      return ka != kb ? ka < kb : a.instance_id < b.instance_id;
    });
  }
  const std::size_t target = sizes.train + sizes.test;
  std::size_t take[2] = {std::min(by_class[0].size(), target / 2), std::min(by_class[1].size(), target - target / 2)};
  for (int c = 0; c < 2; ++c) {
    const std::size_t room = target - take[0] - take[1];
    take[c] = std::min(by_class[c].size(), take[c] + room);
  }
  const std::size_t total = take[0] + take[1];
  if (meta.n_usable < kFullSizeThreshold) {
    meta.warnings.push_back("truncated: only " + std::to_string(meta.n_usable) +
                            " usable instances (need " + std::to_string(kFullSizeThreshold) +
                            " for full splits)");
  }
  if (total == 0) throw LoadError("no usable instances in " + source.string());

  Rng rng(SeedMixer(static_cast<std::uint64_t>(split_seed)).add("split").add(to_string(task)).value());
  const double train_fraction = static_cast<double>(sizes.train) / static_cast<double>(target);
  for (int c = 0; c < 2; ++c) {
    std::vector<TaskInstance> chosen(by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
    rng.shuffle(chosen);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(chosen.size())));
    ds.train.insert(ds.train.end(), chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.test.insert(ds.test.end(), chosen.begin() + static_cast<std::ptrdiff_t>(n_train), chosen.end());
  }
  rng.shuffle(ds.train);
  rng.shuffle(ds.test);

  auto yes_fraction = [](const std::vector<TaskInstance>& v) {
    if (v.empty()) return 0.0;
    const auto n = std::count_if(v.begin(), v.end(), [](const TaskInstance& t) { return t.gold_answer == Answer::yes; });
    return static_cast<double>(n) / static_cast<double>(v.size());
  };
  meta.train_size = ds.train.size();
  meta.test_size = ds.test.size();
  meta.train_yes_fraction = yes_fraction(ds.train);
  meta.test_yes_fraction = yes_fraction(ds.test);
  auto balanced = [](double f) { return f >= 0.45 && f <= 0.55; };
  if (!balanced(meta.train_yes_fraction) || !balanced(meta.test_yes_fraction)) {
    meta.skewed = true;
    meta.warnings.push_back("class balance outside 45-55%: source data is skewed");
  }
  return ds;
}

// Writes normalized `source.jsonl` toy items for model-free runs. Questions are
// synthetic and carry no world knowledge.
inline void write_synthetic_source(TaskName task, const std::filesystem::path& task_dir, std::size_t count,
                                   std::uint64_t seed) {
  std::filesystem::create_directories(task_dir);
  std::ofstream out(task_dir / "source.jsonl", std::ios::binary);
  if (!out) throw LoadError("cannot write " + (task_dir / "source.jsonl").string());
  Rng rng(SeedMixer(seed).add("synthetic-source").add(to_string(task)).value());
  static const char* subjects[] = {"Player", "Captain", "Rookie", "Veteran", "Striker", "Keeper"};
  static const char* actions[] = {"scored a goal", "hit a home run", "caught the pass", "served an ace",
                                  "made the tackle", "sank the putt"};
  for (std::size_t i = 0; i < count; ++i) {
    const Answer a = (i % 2 == 0) ? Answer::yes : Answer::no;
    const std::string tag = std::to_string(i) + "-" + std::to_string(rng.below(1000000));
    std::string q;
    const char* subj = subjects[rng.below(6)];
    const char* act = actions[rng.below(6)];
    switch (task) {
      case TaskName::anachronisms:
        q = std::string("Does the following sentence contain anachronistic elements?\n\"") + subj + " " + tag +
            " " + act + " in era " + std::to_string(rng.below(40)) + ".\"";
        break;
      case TaskName::logical_deduction:
        q = "Item " + tag + " is left of item " + std::to_string(rng.below(100)) +
            ".\n\nGiven this description, is the following statement plausible?\n\"Item " + tag +
            " is the leftmost.\"";
        break;
      case TaskName::social_chemistry:
        q = "Is the following action appropriate?\n\"" + std::string(subj) + " " + tag + " " + act + ".\"";
        break;
      case TaskName::sports_understanding:
        q = std::string("Is the following sentence plausible? \"") + subj + " " + tag + " " + act + ".\"";
        break;
    }
    nlohmann::json j{{"question", q}, {"answer", to_string(a)}};
    out << j.dump() << '\n';
  }
}

}  // namespace precot
