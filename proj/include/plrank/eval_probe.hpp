#pragma once

// Candidate-set evaluation (argmax rationales, rank by score, NDCG at several
// cutoffs), stratified breakdowns, and two sensitivity probes: moving the
// positive across presentation slots, and permuting the interaction history.

#include <functional>
#include <string>
#include <vector>

#include "plrank/artifact.hpp"
#include "plrank/core_rank.hpp"
#include "plrank/instance.hpp"
#include "plrank/policy.hpp"

namespace plrank {

/// Scores the candidates of one instance, in candidate order.
using Scorer = std::function<ScoreVector(const RankingInstance&)>;

struct EvalOptions {
  std::vector<int> cutoffs{1, 5, 10};
  GenMode mode = GenMode::kCot;
  int L = 20;
  int workers = 1;
};

/// Argmax rationale per candidate, then the scoring head.
Scorer policy_scorer(const PolicyParams& params, GenMode mode, int L);
/// Earlier presentation slots score higher; the probe's positive control.
Scorer presentation_order_scorer();

struct InstanceEval {
  std::string instance_id;
  ScoreVector scores;
  Permutation ranking;
  std::vector<double> ndcg;  // one per cutoff
  int positive_rank = 0;     // 1-based
  int positive_train_frequency = 0;
  int history_length = 0;
};

struct CutoffStat {
  int cutoff = 0;
  double mean = 0.0;  // NaN when count is 0
  double ci95 = 0.0;  // normal approximation, 1.96 * sd / sqrt(n)
  int count = 0;
};

struct StratumReport {
  std::string label;
  std::vector<CutoffStat> stats;
};

struct EvalReport {
  std::vector<int> cutoffs;
  std::vector<CutoffStat> overall;
  std::vector<StratumReport> strata;
  std::vector<InstanceEval> instances;
  int excluded = 0;  // all-zero relevance
  std::string config_hash;
  std::string checkpoint_id;
  std::uint64_t seed = 0;

  double mean(int cutoff) const;
};

std::vector<CutoffStat> aggregate(const std::vector<InstanceEval>& evals, const std::vector<int>& cutoffs);

/// Deterministic: instances are scored independently and aggregated in input order.
EvalReport evaluate(const Scorer& scorer, const std::vector<RankingInstance>& instances, const EvalOptions& opts);
EvalReport evaluate(const PolicyParams& params, const std::vector<RankingInstance>& instances,
                    const EvalOptions& opts);

/// Argmax decision vs ground truth over every (instance, candidate) pair.
double decision_accuracy(const PolicyParams& params, const std::vector<RankingInstance>& instances, int L,
                         int workers = 1);

enum class StratumKind { kFreqQuartile, kFreqIndustrial, kHistoryLength, kCustom };

struct StratumSpec {
  StratumKind kind = StratumKind::kFreqIndustrial;
  /// kHistoryLength and kCustom: ascending lower edges; bin i is [edges[i], edges[i+1]).
  /// kCustom bins the positive's train_frequency.
  std::vector<int> edges;
};

std::string to_string(StratumKind kind);

/// Stratum index per evaluated instance; every instance lands in exactly one.
std::vector<int> assign_strata(const std::vector<InstanceEval>& evals, const StratumSpec& spec,
                               std::vector<std::string>* labels);
std::vector<StratumReport> stratify(const std::vector<InstanceEval>& evals, const std::vector<int>& cutoffs,
                                    const StratumSpec& spec);

// -- probes -------------------------------------------------------------------

/// Copy of the instance with the positive moved to `slot` (0-based) and the
/// negatives kept in their relative order.
RankingInstance with_positive_at(const RankingInstance& inst, int slot);

struct PositionProbe {
  std::vector<int> positions;                // 1-based presentation slots
  std::vector<std::vector<int>> histograms;  // [position][achieved rank - 1] -> count
  std::vector<std::vector<int>> ranks;       // [position][instance] -> achieved rank (1-based)

  /// Histograms identical across positions.
  bool invariant() const;
};

PositionProbe probe_position(const Scorer& scorer, const std::vector<RankingInstance>& instances,
                             const std::vector<int>& positions, int workers = 1);

struct HistoryShuffleRow {
  std::string instance_id;
  int shuffle = -1;  // -1 is the original chronological order
  int cutoff = 0;
  double ndcg = 0.0;
};

struct HistoryShuffleSummary {
  int cutoff = 0;
  double avg = 0.0;           // mean over instances and shuffles
  double std = 0.0;           // mean over instances of the per-instance sample std
  double range = 0.0;         // mean over instances of max - min
  double original_avg = 0.0;  // mean over instances of the original order
};

struct HistoryShuffleProbe {
  std::vector<HistoryShuffleRow> rows;
  std::vector<HistoryShuffleSummary> summary;
};

/// Instance with history items permuted; timestamps stay ascending.
RankingInstance with_history_order(const RankingInstance& inst, const std::vector<int>& order);

HistoryShuffleProbe probe_history_shuffle(const Scorer& scorer, const std::vector<RankingInstance>& instances,
                                          int n_shuffles, std::uint64_t seed, const std::vector<int>& cutoffs,
                                          int workers = 1);
/// Recomputes the summary from raw rows; shared by the probe and by verifiers.
std::vector<HistoryShuffleSummary> summarize_history_rows(const std::vector<HistoryShuffleRow>& rows,
                                                          const std::vector<int>& cutoffs);

// -- output -------------------------------------------------------------------

using ReportMeta = ArtifactMeta;

/// metric,cutoff,stratum,mean,ci95,count with a leading "# config_hash=...,seed=..." line.
std::string report_csv(const EvalReport& report);
/// Grouped bar chart of NDCG per stratum and cutoff; self-contained SVG.
std::string report_svg(const EvalReport& report, const std::string& title);
std::string position_probe_csv(const PositionProbe& probe, const ReportMeta& meta);
std::string position_probe_svg(const PositionProbe& probe, const ReportMeta& meta);
std::string history_rows_csv(const std::vector<HistoryShuffleRow>& rows, const ReportMeta& meta);
std::vector<HistoryShuffleRow> parse_history_rows_csv(const std::string& text);
std::string history_summary_csv(const std::vector<HistoryShuffleSummary>& summary, const ReportMeta& meta);
std::string history_summary_svg(const std::vector<HistoryShuffleSummary>& summary, const ReportMeta& meta);
/// Per-instance NDCG values for external significance testing:
/// instance_id,cutoff,ndcg,positive_rank,train_frequency,history_length.
std::string per_instance_csv(const EvalReport& report);
/// Inverse of per_instance_csv: instances (without scores and rankings) plus
/// re-aggregated overall stats, the stamp and the cutoffs.
EvalReport parse_per_instance_csv(const std::string& text);

enum class ReportFormat { kCsv, kSvg };
void emit_report(const EvalReport& report, const std::string& path, ReportFormat format);
void write_text(const std::string& path, const std::string& text);

}  // namespace plrank
