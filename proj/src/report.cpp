#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "plrank/eval_probe.hpp"

namespace plrank {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string num(double v) { return std::isfinite(v) ? fmt("%.12g", v) : ""; }

std::string meta_line(const std::string& config_hash, std::uint64_t seed) {
  return meta_comment({config_hash, seed}) + "\n";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ls(line);
  std::string cell;
  while (std::getline(ls, cell, ',')) f.push_back(cell);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

std::string line_error(int line_no, const std::string& what) {
  return "line " + std::to_string(line_no) + ": " + what;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};

// values[group][series]; NaN bars are skipped.
std::string bar_chart(const std::string& title, const std::string& desc, const std::vector<std::string>& groups,
                      const std::vector<std::string>& series, const std::vector<std::vector<double>>& values,
                      double y_max, const std::string& y_label) {
  const double width = std::max(480.0, 90.0 + 40.0 * static_cast<double>(groups.size() * (series.size() + 1)));
  const double height = 340.0, left = 60.0, right = 20.0, top = 40.0, bottom = 90.0;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const double group_w = plot_w / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bar_w = group_w / static_cast<double>(series.size() + 1);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt("%.0f", width) << "\" height=\""
     << fmt("%.0f", height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<desc>" << xml_escape(desc) << "</desc>\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt("%.1f", width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << xml_escape(title) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = y_max * t / 4.0;
    const double y = top + plot_h - plot_h * t / 4.0;
    os << "<line x1=\"" << fmt("%.1f", left) << "\" x2=\"" << fmt("%.1f", left + plot_w) << "\" y1=\"" << fmt("%.1f", y)
       << "\" y2=\"" << fmt("%.1f", y) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << fmt("%.1f", left - 6) << "\" y=\"" << fmt("%.1f", y + 4) << "\" text-anchor=\"end\">"
       << fmt("%.2f", v) << "</text>\n";
  }
  os << "<text x=\"14\" y=\"" << fmt("%.1f", top + plot_h / 2) << "\" transform=\"rotate(-90 14 "
     << fmt("%.1f", top + plot_h / 2) << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = values[g][s];
      if (!std::isfinite(v)) continue;
      const double h = plot_h * std::clamp(v / y_max, 0.0, 1.0);
      os << "<rect x=\"" << fmt("%.1f", gx + bar_w * (static_cast<double>(s) + 0.5)) << "\" y=\""
         << fmt("%.1f", top + plot_h - h) << "\" width=\"" << fmt("%.1f", bar_w * 0.9) << "\" height=\""
         << fmt("%.1f", h) << "\" fill=\"" << kPalette[s % 6] << "\"><title>" << xml_escape(series[s]) << ": "
         << fmt("%.4f", v) << "</title></rect>\n";
    }
    os << "<text x=\"" << fmt("%.1f", gx + group_w / 2) << "\" y=\"" << fmt("%.1f", top + plot_h + 16)
       << "\" text-anchor=\"middle\">" << xml_escape(groups[g]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double lx = left + 110.0 * static_cast<double>(s);
    const double ly = height - 30.0;
    os << "<rect x=\"" << fmt("%.1f", lx) << "\" y=\"" << fmt("%.1f", ly - 9) << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[s % 6] << "\"/>\n";
    os << "<text x=\"" << fmt("%.1f", lx + 14) << "\" y=\"" << fmt("%.1f", ly) << "\">" << xml_escape(series[s])
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string cutoff_label(int c) { return "NDCG@" + std::to_string(c); }

}  // namespace

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << meta_line(report.config_hash, report.seed);
  if (!report.checkpoint_id.empty()) os << "# checkpoint=" << report.checkpoint_id << "\n";
  os << "# ci95=normal_approximation,excluded=" << report.excluded << "\n";
  os << "metric,cutoff,stratum,mean,ci95,count\n";
  auto rows = [&](const std::string& stratum, const std::vector<CutoffStat>& stats) {
    for (const CutoffStat& c : stats) {
      os << "ndcg," << c.cutoff << "," << stratum << "," << num(c.mean) << "," << (c.count > 0 ? num(c.ci95) : "")
         << "," << c.count << "\n";
    }
  };
  rows("all", report.overall);
  for (const StratumReport& s : report.strata) rows(s.label, s.stats);
  return os.str();
}

std::string per_instance_csv(const EvalReport& report) {
  std::ostringstream os;
  os << meta_line(report.config_hash, report.seed);
  os << "instance_id,cutoff,ndcg,positive_rank,train_frequency,history_length\n";
  for (const InstanceEval& e : report.instances) {
    for (std::size_t c = 0; c < report.cutoffs.size(); ++c) {
      os << e.instance_id << "," << report.cutoffs[c] << "," << fmt("%.17g", e.ndcg[c]) << "," << e.positive_rank
         << "," << e.positive_train_frequency << "," << e.history_length << "\n";
    }
  }
  return os.str();
}

EvalReport parse_per_instance_csv(const std::string& text) {
  EvalReport report;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      static const std::string key = "# config_hash=";
      if (line.rfind(key, 0) == 0) {
        const auto comma = line.find(",seed=");
        if (comma == std::string::npos) throw ParseError(line_error(line_no, "malformed stamp"));
        report.config_hash = line.substr(key.size(), comma - key.size());
        report.seed = std::stoull(line.substr(comma + 6));
      }
      continue;
    }
    if (!header) {
      if (line != "instance_id,cutoff,ndcg,positive_rank,train_frequency,history_length") {
        throw ParseError(line_error(line_no, "unexpected per-instance header"));
      }
      header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 6) throw ParseError(line_error(line_no, "expected 6 fields"));
    int cutoff = 0;
    double value = 0.0;
    try {
      cutoff = std::stoi(f[1]);
      value = std::stod(f[2]);
    } catch (const std::exception&) {
      throw ParseError(line_error(line_no, "non-numeric field"));
    }
    if (report.instances.empty() || report.instances.back().instance_id != f[0]) {
      InstanceEval e;
      e.instance_id = f[0];
      e.positive_rank = std::stoi(f[3]);
      e.positive_train_frequency = std::stoi(f[4]);
      e.history_length = std::stoi(f[5]);
      report.instances.push_back(std::move(e));
    }
    InstanceEval& e = report.instances.back();
    if (report.instances.size() == 1) {
      report.cutoffs.push_back(cutoff);
    } else if (e.ndcg.size() >= report.cutoffs.size() || report.cutoffs[e.ndcg.size()] != cutoff) {
      throw ParseError(line_error(line_no, "cutoffs differ between instances"));
    }
    e.ndcg.push_back(value);
  }
  if (!header) throw ParseError("per-instance CSV has no header");
  for (const InstanceEval& e : report.instances) {
    if (e.ndcg.size() != report.cutoffs.size()) throw ParseError("instance " + e.instance_id + " is missing cutoffs");
  }
  report.overall = aggregate(report.instances, report.cutoffs);
  return report;
}

std::string report_svg(const EvalReport& report, const std::string& title) {
  std::vector<std::string> groups{"all"};
  std::vector<std::vector<double>> values(1);
  for (const CutoffStat& c : report.overall) values[0].push_back(c.mean);
  for (const StratumReport& s : report.strata) {
    groups.push_back(s.label.substr(s.label.find(':') + 1));
    std::vector<double> v;
    for (const CutoffStat& c : s.stats) v.push_back(c.count > 0 ? c.mean : std::nan(""));
    values.push_back(v);
  }
  std::vector<std::string> series;
  for (int c : report.cutoffs) series.push_back(cutoff_label(c));
  return bar_chart(title, "config_hash=" + report.config_hash + ",seed=" + std::to_string(report.seed), groups, series,
                   values, 1.0, "mean NDCG");
}

std::string position_probe_csv(const PositionProbe& probe, const ReportMeta& meta) {
  std::ostringstream os;
  os << meta_line(meta.config_hash, meta.seed);
  os << "position,rank,count\n";
  for (std::size_t p = 0; p < probe.positions.size(); ++p) {
    for (std::size_t r = 0; r < probe.histograms[p].size(); ++r) {
      os << probe.positions[p] << "," << r + 1 << "," << probe.histograms[p][r] << "\n";
    }
  }
  return os.str();
}

std::string position_probe_svg(const PositionProbe& probe, const ReportMeta& meta) {
  std::vector<std::string> groups;
  const std::size_t ranks = probe.histograms.empty() ? 0 : probe.histograms.front().size();
  std::vector<std::vector<double>> values(ranks);
  double peak = 0.0;
  for (std::size_t r = 0; r < ranks; ++r) {
    groups.push_back(std::to_string(r + 1));
    for (std::size_t p = 0; p < probe.positions.size(); ++p) {
      values[r].push_back(probe.histograms[p][r]);
      peak = std::max(peak, static_cast<double>(probe.histograms[p][r]));
    }
  }
  std::vector<std::string> series;
  for (int p : probe.positions) series.push_back("positive at " + std::to_string(p));
  return bar_chart("Achieved rank of the positive by presentation slot",
                   "config_hash=" + meta.config_hash + ",seed=" + std::to_string(meta.seed), groups, series, values,
                   std::max(1.0, peak), "instances");
}

std::string history_rows_csv(const std::vector<HistoryShuffleRow>& rows, const ReportMeta& meta) {
  std::ostringstream os;
  os << meta_line(meta.config_hash, meta.seed);
  os << "instance_id,shuffle,cutoff,ndcg\n";
  for (const HistoryShuffleRow& r : rows) {
    os << r.instance_id << "," << (r.shuffle < 0 ? std::string("original") : std::to_string(r.shuffle)) << ","
       << r.cutoff << "," << fmt("%.17g", r.ndcg) << "\n";
  }
  return os.str();
}

std::vector<HistoryShuffleRow> parse_history_rows_csv(const std::string& text) {
  std::vector<HistoryShuffleRow> rows;
  std::istringstream is(text);
  std::string line;
  bool header = false;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "instance_id,shuffle,cutoff,ndcg") throw ParseError("unexpected history shuffle header");
      header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 4) throw ParseError(line_error(line_no, "expected 4 fields"));
    HistoryShuffleRow r;
    r.instance_id = f[0];
    r.shuffle = f[1] == "original" ? -1 : std::stoi(f[1]);
    r.cutoff = std::stoi(f[2]);
    r.ndcg = std::stod(f[3]);
    rows.push_back(r);
  }
  return rows;
}

std::string history_summary_csv(const std::vector<HistoryShuffleSummary>& summary, const ReportMeta& meta) {
  std::ostringstream os;
  os << meta_line(meta.config_hash, meta.seed);
  os << "cutoff,avg,std,range,original_avg\n";
  for (const HistoryShuffleSummary& s : summary) {
    os << s.cutoff << "," << fmt("%.17g", s.avg) << "," << fmt("%.17g", s.std) << "," << fmt("%.17g", s.range) << ","
       << fmt("%.17g", s.original_avg) << "\n";
  }
  return os.str();
}

std::string history_summary_svg(const std::vector<HistoryShuffleSummary>& summary, const ReportMeta& meta) {
  std::vector<std::string> groups;
  std::vector<std::vector<double>> values;
  for (const HistoryShuffleSummary& s : summary) {
    groups.push_back(cutoff_label(s.cutoff));
    values.push_back({s.avg, s.std, s.range, s.original_avg});
  }
  return bar_chart("NDCG under permuted interaction histories",
                   "config_hash=" + meta.config_hash + ",seed=" + std::to_string(meta.seed), groups,
                   {"Avg", "Std", "Range", "Original Avg"}, values, 1.0, "NDCG");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path);
}

void emit_report(const EvalReport& report, const std::string& path, ReportFormat format) {
  write_text(path, format == ReportFormat::kCsv ? report_csv(report) : report_svg(report, "Candidate-set NDCG"));
}

}  // namespace plrank
