#pragma once

// Append-only experiment store:
//   <root>/manifest.jsonl        one line per run
//   <root>/runs/<run_id>.jsonl   one line per record
//   <root>/runs/<run_id>.<sidecar>.jsonl   bulky record streams of the same run
// Record lines are {"config_hash", "run_id", "type", "data"} and contain no
// wall-clock values, so identical configs reproduce identical files. The
// creation time lives only in the manifest.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

inline std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a64(config.dump())); }

struct ManifestEntry {
  std::string run_id;
  std::string kind;
  std::string backend;
  std::string task;
  std::string config_hash;
  std::string file;
  std::string created_at;
  nlohmann::json config;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"run_id", e.run_id},   {"kind", e.kind},       {"backend", e.backend},
                     {"task", e.task},       {"config_hash", e.config_hash}, {"file", e.file},
                     {"created_at", e.created_at}, {"config", e.config}};
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.run_id = j.at("run_id").get<std::string>();
  e.kind = j.at("kind").get<std::string>();
  e.backend = j.value("backend", "");
  e.task = j.value("task", "");
  e.config_hash = j.at("config_hash").get<std::string>();
  e.file = j.at("file").get<std::string>();
  e.created_at = j.value("created_at", "");
  e.config = j.value("config", nlohmann::json::object());
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

class RunStore;

// Appends records to one run file. Writers of different runs never share a file.
class RunWriter {
 public:
  const std::string& run_id() const { return entry_.run_id; }
  const ManifestEntry& entry() const { return entry_; }

  void append(std::string_view type, const nlohmann::json& data) { write(out_, type, data); }

  // Appends to runs/<run_id>.<sidecar>.jsonl, opened on first use.
  void append_to(const std::string& sidecar, std::string_view type, const nlohmann::json& data) {
    auto it = sidecars_.find(sidecar);
    if (it == sidecars_.end()) {
      const auto path = dir_ / (entry_.run_id + "." + sidecar + ".jsonl");
      it = sidecars_.emplace(sidecar, std::ofstream(path, std::ios::binary | std::ios::app)).first;
      if (!it->second) throw Error("cannot open run file " + path.string());
    }
    write(it->second, type, data);
  }

  void flush() {
    out_.flush();
    for (auto& [_, f] : sidecars_) f.flush();
  }

 private:
  friend class RunStore;
  RunWriter(ManifestEntry e, const std::filesystem::path& file)
      : entry_(std::move(e)), dir_(file.parent_path()), out_(file, std::ios::binary | std::ios::app) {
    if (!out_) throw Error("cannot open run file " + file.string());
  }

  void write(std::ofstream& out, std::string_view type, const nlohmann::json& data) {
    const nlohmann::json line = {
        {"config_hash", entry_.config_hash}, {"run_id", entry_.run_id}, {"type", type}, {"data", data}};
    out << line.dump() << '\n';
    if (!out) throw Error("failed writing run " + entry_.run_id);
  }

  ManifestEntry entry_;
  std::filesystem::path dir_;
  std::ofstream out_;
  std::map<std::string, std::ofstream> sidecars_;
};

class RunStore {
 public:
  explicit RunStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_ / "runs");
  }

  const std::filesystem::path& root() const { return root_; }

  // Run ids are <kind>-<hash prefix>-<n>, n counting earlier runs of the same
  // kind and config, so a re-run appends rather than overwrites.
  RunWriter create_run(std::string_view kind, std::string_view backend, std::string_view task,
                       const nlohmann::json& config) {
    std::lock_guard lock(mu_);
    ManifestEntry e;
    e.kind = std::string(kind);
    e.backend = std::string(backend);
    e.task = std::string(task);
    e.config = config;
    e.config_hash = config_hash(config);
    std::size_t n = 1;
    for (const auto& m : manifest_unlocked())
      if (m.kind == e.kind && m.config_hash == e.config_hash) ++n;
    char seq[16];
    std::snprintf(seq, sizeof seq, "%03zu", n);
    e.run_id = e.kind + "-" + e.config_hash.substr(0, 12) + "-" + seq;
    e.file = "runs/" + e.run_id + ".jsonl";
    e.created_at = utc_timestamp();
    {
      std::ofstream m(root_ / "manifest.jsonl", std::ios::binary | std::ios::app);
      m << nlohmann::json(e).dump() << '\n';
      if (!m) throw Error("cannot append to manifest");
    }
    return RunWriter(e, root_ / e.file);
  }

  std::vector<ManifestEntry> manifest() const {
    std::lock_guard lock(mu_);
    return manifest_unlocked();
  }

  ManifestEntry find(std::string_view run_id) const {
    for (const auto& e : manifest())
      if (e.run_id == run_id) return e;
    throw LookupError("unknown run id: " + std::string(run_id));
  }

  // Most recent run of a kind, optionally restricted to backend/task.
  std::optional<ManifestEntry> latest(std::string_view kind, std::string_view backend = {},
                                      std::string_view task = {}) const {
    std::optional<ManifestEntry> out;
    for (const auto& e : manifest()) {
      if (e.kind != kind) continue;
      if (!backend.empty() && e.backend != backend) continue;
      if (!task.empty() && e.task != task) continue;
      out = e;
    }
    return out;
  }

  std::vector<ManifestEntry> runs_of_kind(std::string_view kind) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : manifest())
      if (e.kind == kind) out.push_back(e);
    return out;
  }

  // Records of a run, optionally only those of one type; returns the "data"
  // payloads. A sidecar name reads that stream instead of the main file; an
  // absent sidecar holds no records.
  std::vector<nlohmann::json> read(std::string_view run_id, std::string_view type = {},
                                   std::string_view sidecar = {}) const {
    const ManifestEntry e = find(run_id);
    std::string file = e.file;
    if (!sidecar.empty()) {
      file = "runs/" + e.run_id + "." + std::string(sidecar) + ".jsonl";
      if (!std::filesystem::exists(root_ / file)) return {};
    }
    std::vector<nlohmann::json> out;
    for (auto& line : read_jsonl(root_ / file)) {
      if (line.at("config_hash") != e.config_hash) throw LoadError("record with foreign config hash in " + file);
      if (!type.empty() && line.at("type") != type) continue;
      out.push_back(std::move(line.at("data")));
    }
    return out;
  }

 private:
  std::vector<ManifestEntry> manifest_unlocked() const {
    std::vector<ManifestEntry> out;
    const auto path = root_ / "manifest.jsonl";
    if (!std::filesystem::exists(path)) return out;
    for (const auto& j : read_jsonl(path)) out.push_back(j.get<ManifestEntry>());
    return out;
  }

  std::filesystem::path root_;
  mutable std::mutex mu_;
};

}  // namespace precot
