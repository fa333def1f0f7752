#pragma once

// Aggregation of persisted runs into tables and plot data, and deterministic
// CSV/JSON/SVG emission.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/evaluation.hpp"
#include "precot/probe_lab.hpp"
#include "precot/steering_engine.hpp"
#include "precot/trace_judge.hpp"

namespace precot {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string csv_escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : width_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw ConfigError("csv row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_escape(cells[i]);
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::size_t width_;
  std::ostringstream out_;
};

// Parses CSV produced by CsvWriter (quoted fields, doubled quotes).
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    any = true;
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
    } else if (c == '\n') {
      row.push_back(std::move(cell));
      cell.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      cell += c;
    }
  }
  if (any) {
    row.push_back(std::move(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string csv_number(double v) { return format_double(v); }
inline std::string csv_number(std::size_t v) { return std::to_string(v); }
inline std::string csv_bool(bool b) { return b ? "true" : "false"; }
inline std::string csv_optional(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

// ---------------------------------------------------------------------------
// Accuracy tables
// ---------------------------------------------------------------------------

struct EvalSummary {
  std::string backend;
  std::string task;
  PromptMode mode = PromptMode::cot;
  std::size_t n_total = 0;
  std::size_t n_parsed = 0;
  std::size_t n_correct = 0;
};

inline EvalSummary summarize_eval(std::string backend, std::string task, PromptMode mode,
                                  std::span<const EvalRecord> records) {
  EvalSummary s{std::move(backend), std::move(task), mode, records.size(), 0, 0};
  for (const auto& r : records) {
    if (r.parsed()) ++s.n_parsed;
    if (r.correct()) ++s.n_correct;
  }
  return s;
}

struct AccuracyCell {
  std::optional<double> accuracy;  // n_correct / n_total; parse failures count as incorrect
  std::size_t n_total = 0;
  std::size_t n_parsed = 0;
  std::size_t n_correct = 0;
  std::string missing_reason;

  std::size_t parse_failures() const { return n_total - n_parsed; }
};

struct AccuracyRow {
  std::string backend;
  std::string task;
  AccuracyCell cot;
  AccuracyCell no_cot;
};

inline constexpr std::string_view kAccuracyConvention =
    "accuracy = correct parsed answers / all instances; parse failures count as incorrect";
inline constexpr std::string_view kFlipRateConvention =
    "flip_rate = flipped / parsed steered generations; parse failures are excluded from the denominator";

inline std::vector<AccuracyRow> accuracy_table(std::span<const EvalSummary> runs) {
  std::map<std::pair<std::string, std::string>, AccuracyRow> rows;
  for (const auto& s : runs) {
    auto& row = rows[{s.backend, s.task}];
    row.backend = s.backend;
    row.task = s.task;
    AccuracyCell& cell = s.mode == PromptMode::cot ? row.cot : row.no_cot;
    cell.n_total = s.n_total;
    cell.n_parsed = s.n_parsed;
    cell.n_correct = s.n_correct;
    cell.accuracy.reset();
    cell.missing_reason.clear();
    if (s.n_total > 0) cell.accuracy = static_cast<double>(s.n_correct) / static_cast<double>(s.n_total);
    else cell.missing_reason = "evaluation run has no records";
  }
  std::vector<AccuracyRow> out;
  for (auto& [_, row] : rows) {
    for (auto* cell : {&row.cot, &row.no_cot})
      if (!cell->accuracy && cell->missing_reason.empty()) cell->missing_reason = "no evaluation run";
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string accuracy_csv(std::span<const AccuracyRow> rows) {
  CsvWriter w({"backend", "task", "mode", "accuracy", "n_correct", "n_parsed", "n_total", "parse_failures", "note"});
  for (const auto& r : rows) {
    for (auto mode : {PromptMode::cot, PromptMode::no_cot}) {
      const AccuracyCell& c = mode == PromptMode::cot ? r.cot : r.no_cot;
      w.row({r.backend, r.task, std::string(to_string(mode)), csv_optional(c.accuracy), csv_number(c.n_correct),
             csv_number(c.n_parsed), csv_number(c.n_total), csv_number(c.parse_failures()), c.missing_reason});
    }
  }
  return w.str();
}

// ---------------------------------------------------------------------------
// Flip curves
// ---------------------------------------------------------------------------

struct FlipCurveRow {
  std::string backend;
  std::string task;
  DirectionKind direction = DirectionKind::probe_yes;
  double alpha = 0.0;
  double abs_alpha = 0.0;
  std::size_t n_total = 0;
  std::size_t n_parsed = 0;
  std::size_t n_flipped = 0;
  double flip_rate = 0.0;
  double ci_low = 0.0;
  double ci_high = 1.0;
  double parse_failure_rate = 0.0;
  bool omitted = false;  // fewer than min_parsed parsed generations
};

inline std::vector<FlipCurveRow> aggregate_flip_curves(std::string_view backend, std::string_view task,
                                                       std::span<const SweepPoint> points, std::size_t min_parsed = 20) {
  std::vector<FlipCurveRow> rows;
  for (const auto& p : points) {
    FlipCurveRow r;
    r.backend = std::string(backend);
    r.task = std::string(task);
    r.direction = p.kind;
    r.alpha = p.alpha;
    r.abs_alpha = std::abs(p.alpha);
    r.n_total = p.n_total;
    r.n_parsed = p.n_parsed;
    r.n_flipped = p.n_flipped;
    r.flip_rate = p.flip_rate;
    r.ci_low = p.ci_low;
    r.ci_high = p.ci_high;
    r.parse_failure_rate = p.parse_failure_rate();
    r.omitted = p.n_parsed < min_parsed;
    rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const FlipCurveRow& a, const FlipCurveRow& b) {
    if (a.direction != b.direction) return a.direction < b.direction;
    return a.abs_alpha < b.abs_alpha;
  });
  return rows;
}

inline const std::vector<std::string>& flip_curve_header() {
  static const std::vector<std::string> h = {"backend",   "task",     "direction", "alpha",   "abs_alpha",
                                             "n_total",   "n_parsed", "n_flipped", "flip_rate", "ci_low",
                                             "ci_high",   "parse_failure_rate", "omitted"};
  return h;
}

inline std::string flip_curves_csv(std::span<const FlipCurveRow> rows) {
  CsvWriter w(flip_curve_header());
  for (const auto& r : rows)
    w.row({r.backend, r.task, std::string(to_string(r.direction)), csv_number(r.alpha), csv_number(r.abs_alpha),
           csv_number(r.n_total), csv_number(r.n_parsed), csv_number(r.n_flipped), csv_number(r.flip_rate),
           csv_number(r.ci_low), csv_number(r.ci_high), csv_number(r.parse_failure_rate), csv_bool(r.omitted)});
  return w.str();
}

inline std::vector<FlipCurveRow> parse_flip_curves_csv(std::string_view text) {
  auto rows = parse_csv(text);
  if (rows.empty() || rows.front() != flip_curve_header()) throw LoadError("flip curve csv: unexpected header");
  std::vector<FlipCurveRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& c = rows[i];
    if (c.size() != flip_curve_header().size()) throw LoadError("flip curve csv: bad row width");
    FlipCurveRow r;
    r.backend = c[0];
    r.task = c[1];
    r.direction = parse_direction_kind(c[2]);
    r.alpha = std::stod(c[3]);
    r.abs_alpha = std::stod(c[4]);
    r.n_total = std::stoul(c[5]);
    r.n_parsed = std::stoul(c[6]);
    r.n_flipped = std::stoul(c[7]);
    r.flip_rate = std::stod(c[8]);
    r.ci_low = std::stod(c[9]);
    r.ci_high = std::stod(c[10]);
    r.parse_failure_rate = std::stod(c[11]);
    r.omitted = c[12] == "true";
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification series
// ---------------------------------------------------------------------------

// Centered moving average; near the edges the window shrinks to what exists.
inline std::vector<double> moving_average(std::span<const double> y, std::size_t window = 3) {
  if (window == 0 || window % 2 == 0) throw ConfigError("moving average window must be odd and positive");
  const std::size_t half = window / 2;
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(y.size() - 1, i + half);
    double s = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) s += y[k];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

struct LabeledSetting {
  SettingKey key;
  std::vector<TraceLabel> labels;  // classified records only
  std::size_t n_unclassifiable = 0;
};

struct MovingAverageSeries {
  std::size_t window = 3;
  std::vector<double> x;                   // |α|
  std::vector<std::size_t> n;              // failure-labelled traces per |α|
  std::vector<std::size_t> n_sound;        // excluded from the rates
  std::vector<std::size_t> n_unclassifiable;
  std::map<TraceLabel, std::vector<std::size_t>> counts;
  std::map<TraceLabel, std::vector<double>> raw;
  std::map<TraceLabel, std::vector<double>> smoothed;
};

// Relative rates over the three failure labels per |α|, pooling the yes and
// no probe directions, then smoothed.
inline MovingAverageSeries classification_series(std::span<const LabeledSetting> settings, std::size_t window = 3) {
  struct Acc {
    std::map<TraceLabel, std::size_t> c;
    std::size_t sound = 0;
    std::size_t unclassifiable = 0;
  };
  std::map<double, Acc> by_alpha;
  for (const auto& s : settings) {
    if (s.key.direction == DirectionKind::orthogonal) continue;
    Acc& a = by_alpha[std::abs(s.key.alpha)];
    a.unclassifiable += s.n_unclassifiable;
    for (auto l : s.labels) {
      if (l == TraceLabel::sound) ++a.sound;
      else ++a.c[l];
    }
  }
  MovingAverageSeries out;
  out.window = window;
  for (const auto& [x, a] : by_alpha) {
    std::size_t total = 0;
    for (auto l : kFailureLabels) total += a.c.count(l) ? a.c.at(l) : 0;
    if (total == 0) continue;
    out.x.push_back(x);
    out.n.push_back(total);
    out.n_sound.push_back(a.sound);
    out.n_unclassifiable.push_back(a.unclassifiable);
    for (auto l : kFailureLabels) {
      const std::size_t k = a.c.count(l) ? a.c.at(l) : 0;
      out.counts[l].push_back(k);
      out.raw[l].push_back(static_cast<double>(k) / static_cast<double>(total));
    }
  }
  for (auto l : kFailureLabels) out.smoothed[l] = moving_average(out.raw[l], window);
  return out;
}

inline std::string classification_csv(const MovingAverageSeries& s) {
  std::vector<std::string> header = {"abs_alpha", "n", "n_sound", "n_unclassifiable"};
  for (auto l : kFailureLabels) {
    header.push_back("count_" + std::string(to_string(l)));
    header.push_back("rate_" + std::string(to_string(l)));
    header.push_back("smoothed_" + std::string(to_string(l)));
  }
  CsvWriter w(header);
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    std::vector<std::string> row = {csv_number(s.x[i]), csv_number(s.n[i]), csv_number(s.n_sound[i]),
                                    csv_number(s.n_unclassifiable[i])};
    for (auto l : kFailureLabels) {
      row.push_back(csv_number(s.counts.at(l)[i]));
      row.push_back(csv_number(s.raw.at(l)[i]));
      row.push_back(csv_number(s.smoothed.at(l)[i]));
    }
    w.row(row);
  }
  return w.str();
}

// ---------------------------------------------------------------------------
// Logit lens
// ---------------------------------------------------------------------------

inline std::string logit_lens_csv(std::string_view backend, std::string_view task, int layer, const LensResult& lens) {
  CsvWriter w({"backend", "task", "layer", "direction", "rank", "token", "logit"});
  auto emit = [&](std::string_view dir, const std::vector<TokenLogit>& list) {
    for (std::size_t i = 0; i < list.size(); ++i)
      w.row({std::string(backend), std::string(task), std::to_string(layer), std::string(dir), std::to_string(i + 1),
             list[i].token, csv_number(list[i].logit)});
  };
  emit("+w", lens.positive);
  emit("-w", lens.negative);
  return w.str();
}

// ---------------------------------------------------------------------------
// SVG figures
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fx(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Series {
  std::string name;
  std::string color;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> lo;  // empty when no interval
  std::vector<double> hi;
};

class Plot {
 public:
  Plot(std::string title, std::string xlabel, std::string ylabel, double xmax)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)), xmax_(std::max(xmax, 1.0)) {}

  void add(Series s) { series_.push_back(std::move(s)); }
  void notice(std::string text) { notices_.push_back(std::move(text)); }

  std::string render() const {
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title_)
      << "</text>\n";
    // Axes and ticks.
    o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
      const double v = i / 5.0;
      o << "<line x1=\"" << L - 4 << "\" y1=\"" << fx(py(v)) << "\" x2=\"" << L << "\" y2=\"" << fx(py(v))
        << "\" stroke=\"black\"/>";
      o << "<text x=\"" << L - 8 << "\" y=\"" << fx(py(v) + 4) << "\" text-anchor=\"end\">" << fx(v) << "</text>\n";
    }
    const int xticks = 5;
    for (int i = 0; i <= xticks; ++i) {
      const double v = xmax_ * i / xticks;
      o << "<line x1=\"" << fx(px(v)) << "\" y1=\"" << H - B << "\" x2=\"" << fx(px(v)) << "\" y2=\"" << H - B + 4
        << "\" stroke=\"black\"/>";
      o << "<text x=\"" << fx(px(v)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << fx(v)
        << "</text>\n";
    }
    o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">" << xml_escape(xlabel_)
      << "</text>\n";
    o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">" << xml_escape(ylabel_) << "</text>\n";

    for (std::size_t si = 0; si < series_.size(); ++si) {
      const Series& s = series_[si];
      if (!s.x.empty()) {
        o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << fx(px(s.x[i])) << "," << fx(py(s.y[i]));
        o << "\"/>\n";
      }
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        o << "<circle cx=\"" << fx(px(s.x[i])) << "\" cy=\"" << fx(py(s.y[i])) << "\" r=\"3\" fill=\"" << s.color
          << "\"/>";
        if (!s.lo.empty())
          o << "<line x1=\"" << fx(px(s.x[i])) << "\" y1=\"" << fx(py(s.lo[i])) << "\" x2=\"" << fx(px(s.x[i]))
            << "\" y2=\"" << fx(py(s.hi[i])) << "\" stroke=\"" << s.color << "\"/>";
        o << "\n";
      }
      const double ly = T + 14.0 + 16.0 * static_cast<double>(si);
      o << "<line x1=\"" << W - R - 150 << "\" y1=\"" << fx(ly - 4) << "\" x2=\"" << W - R - 130 << "\" y2=\""
        << fx(ly - 4) << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>";
      o << "<text x=\"" << W - R - 125 << "\" y=\"" << fx(ly) << "\">" << xml_escape(s.name) << "</text>\n";
    }
    for (std::size_t i = 0; i < notices_.size(); ++i)
      o << "<text x=\"" << L + 10 << "\" y=\"" << T + 14 + 16 * static_cast<int>(i) << "\" fill=\"#a33\">"
        << xml_escape(notices_[i]) << "</text>\n";
    o << "</svg>\n";
    return o.str();
  }

 private:
  static constexpr int W = 640, H = 420, L = 60, R = 20, T = 40, B = 50;
  double px(double x) const { return L + (W - L - R) * (x / xmax_); }
  double py(double y) const { return (H - B) - (H - B - T) * std::clamp(y, 0.0, 1.0); }

  std::string title_, xlabel_, ylabel_;
  double xmax_;
  std::vector<Series> series_;
  std::vector<std::string> notices_;
};

inline std::string direction_color(DirectionKind k) {
  switch (k) {
    case DirectionKind::probe_yes: return "#1f77b4";
    case DirectionKind::probe_no: return "#d62728";
    case DirectionKind::orthogonal: return "#7f7f7f";
  }
  return "#000000";
}

inline double max_abs_alpha(std::span<const FlipCurveRow> rows) {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.abs_alpha);
  return m;
}

}  // namespace detail

// Flip rate vs |α| per direction with Wilson bars. Omitted rows are not drawn.
inline std::string flip_curve_svg(std::span<const FlipCurveRow> rows, std::string_view title) {
  detail::Plot plot(std::string(title), "|alpha|", "flip rate", detail::max_abs_alpha(rows));
  bool has_baseline = false;
  for (auto kind : {DirectionKind::probe_yes, DirectionKind::probe_no, DirectionKind::orthogonal}) {
    detail::Series s{std::string(to_string(kind)), detail::direction_color(kind), {}, {}, {}, {}};
    bool any = false;
    for (const auto& r : rows) {
      if (r.direction != kind) continue;
      any = true;
      if (r.omitted) continue;
      s.x.push_back(r.abs_alpha);
      s.y.push_back(r.flip_rate);
      s.lo.push_back(r.ci_low);
      s.hi.push_back(r.ci_high);
    }
    if (kind == DirectionKind::orthogonal) has_baseline = any;
    if (any) plot.add(std::move(s));
  }
  if (!has_baseline) plot.notice("orthogonal baseline not available; probe curves only");
  return plot.render();
}

inline std::string parse_failure_svg(std::span<const FlipCurveRow> rows, std::string_view title) {
  detail::Plot plot(std::string(title), "|alpha|", "parse failure rate", detail::max_abs_alpha(rows));
  for (auto kind : {DirectionKind::probe_yes, DirectionKind::probe_no, DirectionKind::orthogonal}) {
    detail::Series s{std::string(to_string(kind)), detail::direction_color(kind), {}, {}, {}, {}};
    for (const auto& r : rows) {
      if (r.direction != kind) continue;
      s.x.push_back(r.abs_alpha);
      s.y.push_back(r.parse_failure_rate);
    }
    if (!s.x.empty()) plot.add(std::move(s));
  }
  return plot.render();
}

inline std::string classification_svg(const MovingAverageSeries& series, std::string_view title) {
  double xmax = 0.0;
  for (double x : series.x) xmax = std::max(xmax, x);
  detail::Plot plot(std::string(title), "|alpha|", "relative rate (moving average)", xmax);
  const std::map<TraceLabel, std::string> colors = {{TraceLabel::non_entailment, "#2ca02c"},
                                                    {TraceLabel::confabulation, "#ff7f0e"},
                                                    {TraceLabel::hallucination, "#9467bd"}};
  for (auto l : kFailureLabels) {
    detail::Series s{std::string(to_string(l)), colors.at(l), series.x, series.smoothed.at(l), {}, {}};
    plot.add(std::move(s));
  }
  if (series.x.empty()) plot.notice("no classified settings");
  return plot.render();
}

}  // namespace precot
