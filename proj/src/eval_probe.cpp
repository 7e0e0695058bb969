#include "plrank/eval_probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "plrank/parallel.hpp"

namespace plrank {

Scorer policy_scorer(const PolicyParams& params, GenMode mode, int L) {
  return [&params, mode, L](const RankingInstance& inst) {
    const Vocab vocab = params.config.vocab();
    const ContextEncoder enc(params, context_tokens(vocab, inst.ctx, L));
    const GenerateOptions opts{1.0, mode, Decoding::kArgmax};
    ScoreVector s(inst.size());
    for (int k = 0; k < inst.size(); ++k) {
      RandomStream unused(0);
      const Rationale r = generate(enc.bound(), enc.cache(),
                                   candidate_tokens(vocab, inst.candidates[static_cast<std::size_t>(k)]), unused, opts);
      s(k) = score(params, r);
    }
    return s;
  };
}

Scorer presentation_order_scorer() {
  return [](const RankingInstance& inst) {
    ScoreVector s(inst.size());
    for (int k = 0; k < inst.size(); ++k) s(k) = static_cast<double>(inst.size() - k);
    return s;
  };
}

double EvalReport::mean(int cutoff) const {
  for (const CutoffStat& c : overall) {
    if (c.cutoff == cutoff) return c.mean;
  }
  throw ContractViolation("cutoff " + std::to_string(cutoff) + " was not evaluated");
}

std::vector<CutoffStat> aggregate(const std::vector<InstanceEval>& evals, const std::vector<int>& cutoffs) {
  std::vector<CutoffStat> out;
  for (std::size_t c = 0; c < cutoffs.size(); ++c) {
    CutoffStat st;
    st.cutoff = cutoffs[c];
    st.count = static_cast<int>(evals.size());
    if (evals.empty()) {
      st.mean = std::numeric_limits<double>::quiet_NaN();
      out.push_back(st);
      continue;
    }
    double sum = 0.0;
    for (const InstanceEval& e : evals) sum += e.ndcg[c];
    st.mean = sum / static_cast<double>(evals.size());
    if (evals.size() > 1) {
      double sq = 0.0;
      for (const InstanceEval& e : evals) sq += (e.ndcg[c] - st.mean) * (e.ndcg[c] - st.mean);
      const double sd = std::sqrt(sq / static_cast<double>(evals.size() - 1));
      st.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(evals.size()));
    }
    out.push_back(st);
  }
  return out;
}

namespace {

InstanceEval evaluate_one(const Scorer& scorer, const RankingInstance& inst, const std::vector<int>& cutoffs) {
  InstanceEval e;
  e.instance_id = inst.instance_id;
  e.scores = scorer(inst);
  PLRANK_EXPECT(e.scores.size() == inst.size(), "scorer returned the wrong number of scores");
  e.ranking = argsort_descending(e.scores);
  for (int c : cutoffs) e.ndcg.push_back(ndcg(e.ranking, inst.relevance, c).value);
  const int pos = inst.positive_index();
  e.positive_rank = e.ranking.ranks()[static_cast<std::size_t>(pos)] + 1;
  e.positive_train_frequency = inst.candidates[static_cast<std::size_t>(pos)].train_frequency;
  e.history_length = static_cast<int>(inst.ctx.history.size());
  return e;
}

}  // namespace

EvalReport evaluate(const Scorer& scorer, const std::vector<RankingInstance>& instances, const EvalOptions& opts) {
  PLRANK_EXPECT(!opts.cutoffs.empty(), "no cutoffs requested");
  EvalReport report;
  report.cutoffs = opts.cutoffs;
  std::vector<const RankingInstance*> usable;
  for (const RankingInstance& inst : instances) {
    if (inst.positive_index() >= 0) usable.push_back(&inst);
    else ++report.excluded;
  }
  report.instances.resize(usable.size());
  parallel_for(static_cast<int>(usable.size()), opts.workers, [&](int i) {
    report.instances[static_cast<std::size_t>(i)] = evaluate_one(scorer, *usable[static_cast<std::size_t>(i)], opts.cutoffs);
  });
  report.overall = aggregate(report.instances, opts.cutoffs);
  return report;
}

EvalReport evaluate(const PolicyParams& params, const std::vector<RankingInstance>& instances,
                    const EvalOptions& opts) {
  return evaluate(policy_scorer(params, opts.mode, opts.L), instances, opts);
}

double decision_accuracy(const PolicyParams& params, const std::vector<RankingInstance>& instances, int L,
                         int workers) {
  const Vocab vocab = params.config.vocab();
  std::vector<int> correct(instances.size(), 0);
  parallel_for(static_cast<int>(instances.size()), workers, [&](int i) {
    const RankingInstance& inst = instances[static_cast<std::size_t>(i)];
    const ContextEncoder enc(params, context_tokens(vocab, inst.ctx, L));
    const GenerateOptions opts{1.0, GenMode::kCot, Decoding::kArgmax};
    for (int k = 0; k < inst.size(); ++k) {
      RandomStream unused(0);
      const Rationale r = generate(enc.bound(), enc.cache(),
                                   candidate_tokens(vocab, inst.candidates[static_cast<std::size_t>(k)]), unused, opts);
      const int truth = inst.relevance[static_cast<std::size_t>(k)] > 0 ? Vocab::kRecommend : Vocab::kNotRecommend;
      if (r.decision() == truth) ++correct[static_cast<std::size_t>(i)];
    }
  });
  long total = 0, hits = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    total += instances[i].size();
    hits += correct[i];
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// -- strata -------------------------------------------------------------------

std::string to_string(StratumKind kind) {
  switch (kind) {
    case StratumKind::kFreqQuartile: return "freq_quartile";
    case StratumKind::kFreqIndustrial: return "freq_industrial";
    case StratumKind::kHistoryLength: return "history_length";
    case StratumKind::kCustom: return "custom";
  }
  return "?";
}

namespace {

std::vector<std::string> edge_labels(const std::vector<int>& edges) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (i + 1 < edges.size()) {
      labels.push_back("[" + std::to_string(edges[i]) + "," + std::to_string(edges[i + 1] - 1) + "]");
    } else {
      labels.push_back("[" + std::to_string(edges[i]) + ",inf)");
    }
  }
  return labels;
}

int bin_of(int value, const std::vector<int>& edges) {
  int bin = 0;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (value >= edges[i]) bin = static_cast<int>(i);
  }
  return bin;
}

}  // namespace

std::vector<int> assign_strata(const std::vector<InstanceEval>& evals, const StratumSpec& spec,
                               std::vector<std::string>* labels) {
  std::vector<int> out(evals.size(), 0);
  std::vector<std::string> names;
  switch (spec.kind) {
    case StratumKind::kFreqQuartile: {
      // Four equal-sized bins over instances sorted by the positive's train frequency.
      std::vector<std::size_t> idx(evals.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return evals[a].positive_train_frequency < evals[b].positive_train_frequency;
      });
      const std::size_t n = evals.size();
      std::vector<int> lo(4, 0), hi(4, 0);
      std::vector<bool> seen(4, false);
      for (std::size_t r = 0; r < n; ++r) {
        const int q = static_cast<int>(r * 4 / n);
        out[idx[r]] = q;
        const int f = evals[idx[r]].positive_train_frequency;
        if (!seen[static_cast<std::size_t>(q)]) lo[static_cast<std::size_t>(q)] = f;
        hi[static_cast<std::size_t>(q)] = f;
        seen[static_cast<std::size_t>(q)] = true;
      }
      for (int q = 0; q < 4; ++q) {
        std::string name = "Q" + std::to_string(q + 1);
        if (seen[static_cast<std::size_t>(q)]) {
          name += "[" + std::to_string(lo[static_cast<std::size_t>(q)]) + "," + std::to_string(hi[static_cast<std::size_t>(q)]) + "]";
        }
        names.push_back(name);
      }
      break;
    }
    case StratumKind::kFreqIndustrial: {
      const std::vector<int> edges{0, 1, 6};
      names = {"[0,0]", "[1,5]", "[6,inf)"};
      for (std::size_t i = 0; i < evals.size(); ++i) out[i] = bin_of(evals[i].positive_train_frequency, edges);
      break;
    }
    case StratumKind::kHistoryLength:
    case StratumKind::kCustom: {
      std::vector<int> edges = spec.edges;
      if (edges.empty()) {
        PLRANK_EXPECT(spec.kind == StratumKind::kHistoryLength, "custom strata need bin edges");
        edges = {0, 5, 10, 15};
      }
      PLRANK_EXPECT(edges.front() == 0, "bin edges must start at 0 so the bins cover every instance");
      PLRANK_EXPECT(std::is_sorted(edges.begin(), edges.end()) &&
                        std::adjacent_find(edges.begin(), edges.end()) == edges.end(),
                    "bin edges must be strictly ascending");
      names = edge_labels(edges);
      for (std::size_t i = 0; i < evals.size(); ++i) {
        const int v = spec.kind == StratumKind::kHistoryLength ? evals[i].history_length : evals[i].positive_train_frequency;
        out[i] = bin_of(v, edges);
      }
      break;
    }
  }
  if (labels != nullptr) *labels = names;
  return out;
}

std::vector<StratumReport> stratify(const std::vector<InstanceEval>& evals, const std::vector<int>& cutoffs,
                                    const StratumSpec& spec) {
  std::vector<std::string> labels;
  const std::vector<int> assignment = assign_strata(evals, spec, &labels);
  std::vector<std::vector<InstanceEval>> members(labels.size());
  for (std::size_t i = 0; i < evals.size(); ++i) members[static_cast<std::size_t>(assignment[i])].push_back(evals[i]);
  std::vector<StratumReport> out;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    out.push_back({to_string(spec.kind) + ":" + labels[s], aggregate(members[s], cutoffs)});
  }
  return out;
}

// -- probes -------------------------------------------------------------------

RankingInstance with_positive_at(const RankingInstance& inst, int slot) {
  const int pos = inst.positive_index();
  PLRANK_EXPECT(pos >= 0, "instance has no positive");
  PLRANK_EXPECT(slot >= 0 && slot < inst.size(), "probe slot out of range");
  RankingInstance out = inst;
  out.candidates.clear();
  out.relevance.clear();
  for (int k = 0; k < inst.size(); ++k) {
    if (k == pos) continue;
    out.candidates.push_back(inst.candidates[static_cast<std::size_t>(k)]);
    out.relevance.push_back(inst.relevance[static_cast<std::size_t>(k)]);
  }
  out.candidates.insert(out.candidates.begin() + slot, inst.candidates[static_cast<std::size_t>(pos)]);
  out.relevance.insert(out.relevance.begin() + slot, inst.relevance[static_cast<std::size_t>(pos)]);
  return out;
}

bool PositionProbe::invariant() const {
  for (const auto& h : histograms) {
    if (h != histograms.front()) return false;
  }
  return true;
}

PositionProbe probe_position(const Scorer& scorer, const std::vector<RankingInstance>& instances,
                             const std::vector<int>& positions, int workers) {
  PositionProbe probe;
  probe.positions = positions;
  int max_k = 0;
  for (const RankingInstance& inst : instances) max_k = std::max(max_k, inst.size());
  for (int p : positions) {
    std::vector<int> ranks(instances.size(), 0);
    parallel_for(static_cast<int>(instances.size()), workers, [&](int i) {
      const RankingInstance& inst = instances[static_cast<std::size_t>(i)];
      const RankingInstance moved = with_positive_at(inst, p - 1);
      const ScoreVector s = scorer(moved);
      ranks[static_cast<std::size_t>(i)] = argsort_descending(s).ranks()[static_cast<std::size_t>(p - 1)] + 1;
    });
    std::vector<int> hist(static_cast<std::size_t>(max_k), 0);
    for (int r : ranks) ++hist[static_cast<std::size_t>(r - 1)];
    probe.histograms.push_back(std::move(hist));
    probe.ranks.push_back(std::move(ranks));
  }
  return probe;
}

RankingInstance with_history_order(const RankingInstance& inst, const std::vector<int>& order) {
  PLRANK_EXPECT(order.size() == inst.ctx.history.size(), "history order has the wrong length");
  RankingInstance out = inst;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.ctx.history[i] = inst.ctx.history[static_cast<std::size_t>(order[i])];
    out.ctx.history[i].t = inst.ctx.history[i].t;
  }
  return out;
}

std::vector<HistoryShuffleSummary> summarize_history_rows(const std::vector<HistoryShuffleRow>& rows,
                                                          const std::vector<int>& cutoffs) {
  std::vector<HistoryShuffleSummary> out;
  for (int cutoff : cutoffs) {
    // instance order of first appearance
    std::vector<std::string> ids;
    std::map<std::string, std::vector<double>> shuffled;
    std::map<std::string, double> original;
    for (const HistoryShuffleRow& r : rows) {
      if (r.cutoff != cutoff) continue;
      if (!shuffled.contains(r.instance_id) && !original.contains(r.instance_id)) ids.push_back(r.instance_id);
      if (r.shuffle < 0) original[r.instance_id] = r.ndcg;
      else shuffled[r.instance_id].push_back(r.ndcg);
    }
    HistoryShuffleSummary s;
    s.cutoff = cutoff;
    double sum_all = 0.0, sum_std = 0.0, sum_range = 0.0, sum_orig = 0.0;
    std::size_t n_all = 0;
    for (const std::string& id : ids) {
      const std::vector<double>& v = shuffled[id];
      PLRANK_EXPECT(v.size() >= 2, "instance " + id + " has fewer than two shuffles");
      double mean = 0.0;
      for (double x : v) mean += x;
      for (double x : v) sum_all += x;
      n_all += v.size();
      mean /= static_cast<double>(v.size());
      const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
      double sq = 0.0;
      if (*lo != *hi) {
        for (double x : v) sq += (x - mean) * (x - mean);
      }
      sum_std += std::sqrt(sq / static_cast<double>(v.size() - 1));
      sum_range += *hi - *lo;
      sum_orig += original.at(id);
    }
    const double n = static_cast<double>(ids.size());
    if (!ids.empty()) {
      s.avg = sum_all / static_cast<double>(n_all);
      s.std = sum_std / n;
      s.range = sum_range / n;
      s.original_avg = sum_orig / n;
    }
    out.push_back(s);
  }
  return out;
}

HistoryShuffleProbe probe_history_shuffle(const Scorer& scorer, const std::vector<RankingInstance>& instances,
                                          int n_shuffles, std::uint64_t seed, const std::vector<int>& cutoffs,
                                          int workers) {
  PLRANK_EXPECT(n_shuffles >= 2, "history shuffle probe needs n_shuffles >= 2");
  std::vector<std::vector<HistoryShuffleRow>> per_instance(instances.size());
  parallel_for(static_cast<int>(instances.size()), workers, [&](int i) {
    const RankingInstance& inst = instances[static_cast<std::size_t>(i)];
    if (inst.positive_index() < 0) return;
    RandomStream rng = RandomStream::keyed(seed, "history_shuffle", inst.instance_id);
    std::vector<int> order(inst.ctx.history.size());
    for (int s = -1; s < n_shuffles; ++s) {
      std::iota(order.begin(), order.end(), 0);
      if (s >= 0) rng.shuffle(order);
      const RankingInstance variant = with_history_order(inst, order);
      const Permutation ranking = argsort_descending(scorer(variant));
      for (int c : cutoffs) {
        per_instance[static_cast<std::size_t>(i)].push_back({inst.instance_id, s, c, ndcg(ranking, variant.relevance, c).value});
      }
    }
  });
  HistoryShuffleProbe probe;
  for (auto& rows : per_instance) probe.rows.insert(probe.rows.end(), rows.begin(), rows.end());
  probe.summary = summarize_history_rows(probe.rows, cutoffs);
  return probe;
}

}  // namespace plrank
