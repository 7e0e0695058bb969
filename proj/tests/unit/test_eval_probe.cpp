#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "plrank/eval_probe.hpp"
#include "plrank/synth_world.hpp"

using namespace plrank;

namespace {

const InstanceSet& default_instances() {
  static const InstanceSet s = build_all_instances(generate_world(WorldConfig{}), 20, 20);
  return s;
}

Scorer oracle_scorer() {
  return [](const RankingInstance& inst) {
    ScoreVector s = ScoreVector::Zero(inst.size());
    for (int k = 0; k < inst.size(); ++k) s(k) = inst.relevance[k];
    return s;
  };
}

Scorer random_scorer(std::uint64_t seed) {
  return [seed](const RankingInstance& inst) {
    RandomStream rng = RandomStream::keyed(seed, "random_scorer", inst.instance_id);
    ScoreVector s(inst.size());
    for (int k = 0; k < inst.size(); ++k) s(k) = rng.uniform();
    return s;
  };
}

// Scores each candidate from its own attributes only, so it is pointwise by
// construction; the item-id term removes ties.
Scorer attribute_scorer() {
  return [](const RankingInstance& inst) {
    ScoreVector s(inst.size());
    for (int k = 0; k < inst.size(); ++k) {
      double v = 0.0;
      for (std::size_t d = 0; d < inst.candidates[k].tokens.size(); ++d) {
        v += (d + 1.0) * inst.candidates[k].tokens[d] * (inst.ctx.profile_tokens[d] - 1.5);
      }
      s(k) = v + 1e-6 * static_cast<double>(hash_string(inst.candidates[k].item_id) % 1000);
    }
    return s;
  };
}

// Order-sensitive in the history: weights recent events more.
Scorer recency_scorer() {
  return [](const RankingInstance& inst) {
    ScoreVector s = ScoreVector::Zero(inst.size());
    for (int k = 0; k < inst.size(); ++k) {
      for (std::size_t h = 0; h < inst.ctx.history.size(); ++h) {
        for (std::size_t d = 0; d < inst.ctx.history[h].tokens.size(); ++d) {
          s(k) += (h + 1.0) * (inst.ctx.history[h].tokens[d] == inst.candidates[k].tokens[d]);
        }
      }
    }
    return s;
  };
}

PolicyParams tiny_policy() {
  ModelConfig mc;
  mc.d_model = 16;
  mc.ffn = 16;
  mc.head_hidden = 8;
  RandomStream rng(4);
  mc.init_std = 0.3;
  PolicyParams p = PolicyParams::init(mc, rng);
  return p;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("plrank_ep_" + name)).string();
}

}  // namespace

TEST_CASE("an oracle scorer gets NDCG 1 at every cutoff") {
  const auto& test = default_instances().test;
  const EvalReport r = evaluate(oracle_scorer(), test, EvalOptions{});
  for (const CutoffStat& c : r.overall) {
    CHECK(c.mean == 1.0);
    CHECK(c.count == static_cast<int>(test.size()));
  }
  CHECK(r.cutoffs == std::vector<int>{1, 5, 10});
}

TEST_CASE("a random scorer matches the uniform-rank closed form") {
  const InstanceSet& set = default_instances();
  std::vector<RankingInstance> all = set.train;
  all.insert(all.end(), set.valid.begin(), set.valid.end());
  all.resize(2000 - set.test.size());
  all.insert(all.end(), set.test.begin(), set.test.end());
  const EvalReport r = evaluate(random_scorer(5), all, EvalOptions{});
  REQUIRE(r.overall[2].count == 2000);
  const double expected = oracle::uniform_single_positive_ndcg(20, 10);
  CHECK(expected == doctest::Approx(0.227178).epsilon(1e-5));
  const double se = r.overall[2].ci95 / 1.96;
  CHECK(std::abs(r.overall[2].mean - expected) < 3.0 * se);
  CHECK(std::abs(r.overall[0].mean - 1.0 / 20.0) < 3.0 * r.overall[0].ci95 / 1.96);
}

TEST_CASE("confidence half-widths use the sample standard deviation") {
  std::vector<InstanceEval> evals(4);
  const double v[] = {0.0, 0.5, 1.0, 0.5};
  for (int i = 0; i < 4; ++i) evals[i].ndcg = {v[i]};
  const auto st = aggregate(evals, {10});
  CHECK(st[0].mean == 0.5);
  CHECK(st[0].ci95 == doctest::Approx(1.96 * std::sqrt(0.5 / 3.0) / 2.0).epsilon(1e-14));
  const auto empty = aggregate({}, {10});
  CHECK(empty[0].count == 0);
  CHECK(std::isnan(empty[0].mean));
}

TEST_CASE("ties break toward the lower candidate index") {
  RankingInstance inst = default_instances().test.front();
  const int pos = inst.positive_index();
  const Scorer flat = [](const RankingInstance& i) { return ScoreVector::Zero(i.size()); };
  const EvalReport r = evaluate(flat, {inst}, EvalOptions{});
  CHECK(r.instances[0].ranking == Permutation::identity(20));
  CHECK(r.instances[0].positive_rank == pos + 1);
  const RankingInstance first = with_positive_at(inst, 0);
  CHECK(evaluate(flat, {first}, EvalOptions{}).overall[0].mean == 1.0);
}

TEST_CASE("all-zero relevance instances are excluded and counted") {
  std::vector<RankingInstance> v(default_instances().test.begin(), default_instances().test.begin() + 5);
  std::fill(v[2].relevance.begin(), v[2].relevance.end(), 0);
  const EvalReport r = evaluate(oracle_scorer(), v, EvalOptions{});
  CHECK(r.excluded == 1);
  CHECK(r.overall[0].count == 4);
}

TEST_CASE("evaluation is deterministic across runs and worker counts") {
  const PolicyParams p = tiny_policy();
  const std::vector<RankingInstance> v(default_instances().test.begin(), default_instances().test.begin() + 12);
  EvalOptions one;
  EvalOptions three;
  three.workers = 3;
  const EvalReport a = evaluate(p, v, one);
  const EvalReport b = evaluate(p, v, one);
  const EvalReport c = evaluate(p, v, three);
  CHECK(per_instance_csv(a) == per_instance_csv(b));
  CHECK(per_instance_csv(a) == per_instance_csv(c));
  for (std::size_t i = 0; i < a.instances.size(); ++i) CHECK(a.instances[i].scores == c.instances[i].scores);
}

TEST_CASE("strata partition the instances and reaggregate to the global mean") {
  const EvalReport r = evaluate(random_scorer(8), default_instances().test, EvalOptions{});
  for (StratumKind kind : {StratumKind::kFreqQuartile, StratumKind::kFreqIndustrial, StratumKind::kHistoryLength}) {
    const auto strata = stratify(r.instances, r.cutoffs, StratumSpec{kind, {}});
    for (std::size_t c = 0; c < r.cutoffs.size(); ++c) {
      int total = 0;
      double weighted = 0.0;
      for (const StratumReport& s : strata) {
        total += s.stats[c].count;
        if (s.stats[c].count > 0) weighted += s.stats[c].mean * s.stats[c].count;
      }
      CHECK(total == static_cast<int>(r.instances.size()));
      CHECK(std::abs(weighted / total - r.overall[c].mean) <= 1e-12);
    }
    for (const StratumReport& s : strata) CHECK(s.label.rfind(to_string(kind) + ":", 0) == 0);
  }
}

TEST_CASE("industrial tiers match a brute-force recount") {
  const EvalReport r = evaluate(random_scorer(8), default_instances().test, EvalOptions{});
  int cold = 0, mid = 0, hot = 0;
  for (const InstanceEval& e : r.instances) {
    if (e.positive_train_frequency == 0) {
      ++cold;
    } else if (e.positive_train_frequency <= 5) {
      ++mid;
    } else {
      ++hot;
    }
  }
  const auto strata = stratify(r.instances, r.cutoffs, StratumSpec{StratumKind::kFreqIndustrial, {}});
  REQUIRE(strata.size() == 3);
  CHECK(strata[0].label == "freq_industrial:[0,0]");
  CHECK(strata[0].stats[0].count == cold);
  CHECK(strata[1].stats[0].count == mid);
  CHECK(strata[2].stats[0].count == hot);

  int by_len[4] = {0, 0, 0, 0};
  for (const InstanceEval& e : r.instances) ++by_len[std::min(3, e.history_length / 5)];
  const auto hist = stratify(r.instances, r.cutoffs, StratumSpec{StratumKind::kHistoryLength, {}});
  REQUIRE(hist.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(hist[i].stats[0].count == by_len[i]);
}

TEST_CASE("quartiles hold a quarter each and empty strata have no mean") {
  std::vector<InstanceEval> evals(103);
  for (std::size_t i = 0; i < evals.size(); ++i) {
    evals[i].ndcg = {0.5};
    evals[i].positive_train_frequency = static_cast<int>(i % 7);
  }
  const auto q = stratify(evals, {10}, StratumSpec{StratumKind::kFreqQuartile, {}});
  REQUIRE(q.size() == 4);
  for (const StratumReport& s : q) CHECK(std::abs(s.stats[0].count - 103.0 / 4.0) <= 1.0);

  const auto custom = stratify(evals, {10}, StratumSpec{StratumKind::kCustom, {0, 3, 100}});
  REQUIRE(custom.size() == 3);
  CHECK(custom[2].stats[0].count == 0);
  CHECK(std::isnan(custom[2].stats[0].mean));
  CHECK(custom[0].stats[0].count + custom[1].stats[0].count == 103);
}

TEST_CASE("with_positive_at keeps the negatives in order") {
  const RankingInstance& inst = default_instances().test.front();
  for (int slot : {0, 9, 19}) {
    const RankingInstance moved = with_positive_at(inst, slot);
    CHECK(moved.positive_index() == slot);
    std::vector<std::string> before, after;
    for (int k = 0; k < 20; ++k) {
      if (inst.relevance[k] == 0) before.push_back(inst.candidates[k].item_id);
      if (moved.relevance[k] == 0) after.push_back(moved.candidates[k].item_id);
    }
    CHECK(before == after);
  }
}

TEST_CASE("position probe: pointwise scorers are immune, order-sensitive ones are caught") {
  const std::vector<RankingInstance> v(default_instances().test.begin(), default_instances().test.begin() + 8);
  const PolicyParams p = tiny_policy();
  const PositionProbe policy = probe_position(policy_scorer(p, GenMode::kCot, 20), v, {1, 10, 20}, 2);
  CHECK(policy.invariant());
  CHECK(policy.histograms[0] == policy.histograms[1]);
  CHECK(policy.histograms[0] == policy.histograms[2]);
  CHECK(policy.ranks[0] == policy.ranks[2]);

  const PositionProbe attr = probe_position(attribute_scorer(), default_instances().test, {1, 10, 20});
  CHECK(attr.invariant());

  const PositionProbe order = probe_position(presentation_order_scorer(), v, {1, 10, 20});
  CHECK_FALSE(order.invariant());
  for (std::size_t i = 0; i < order.positions.size(); ++i) {
    for (int rank : order.ranks[i]) CHECK(rank == order.positions[i]);
  }
}

TEST_CASE("history shuffle probe") {
  const auto& test = default_instances().test;
  const std::vector<RankingInstance> v(test.begin(), test.begin() + 40);
  const std::vector<int> cutoffs{1, 5, 10};

  SUBCASE("shuffled histories keep ascending timestamps") {
    const RankingInstance& inst = *std::find_if(v.begin(), v.end(), [](const RankingInstance& i) {
      return i.ctx.history.size() >= 3;
    });
    std::vector<int> order(inst.ctx.history.size());
    std::iota(order.rbegin(), order.rend(), 0);
    const RankingInstance rev = with_history_order(inst, order);
    for (std::size_t h = 0; h < order.size(); ++h) {
      CHECK(rev.ctx.history[h].item_id == inst.ctx.history[order[h]].item_id);
      CHECK(rev.ctx.history[h].t == inst.ctx.history[h].t);
    }
  }
  SUBCASE("single-event histories have zero spread") {
    std::vector<RankingInstance> single;
    for (const RankingInstance& inst : test) {
      if (inst.ctx.history.size() <= 1) single.push_back(inst);
    }
    REQUIRE(!single.empty());
    const auto probe = probe_history_shuffle(recency_scorer(), single, 10, 3, cutoffs);
    for (const auto& s : probe.summary) {
      CHECK(s.std == 0.0);
      CHECK(s.range == 0.0);
    }
  }
  SUBCASE("summary recomputes exactly from the raw CSV") {
    const auto probe = probe_history_shuffle(recency_scorer(), v, 10, 3, cutoffs, 2);
    CHECK(probe.rows.size() == v.size() * 11 * cutoffs.size());
    const std::string csv = history_rows_csv(probe.rows, {"cafe", 3});
    const auto back = summarize_history_rows(parse_history_rows_csv(csv), cutoffs);
    REQUIRE(back.size() == probe.summary.size());
    bool any_spread = false;
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].avg == probe.summary[i].avg);
      CHECK(back[i].std == probe.summary[i].std);
      CHECK(back[i].range == probe.summary[i].range);
      CHECK(back[i].original_avg == probe.summary[i].original_avg);
      any_spread = any_spread || probe.summary[i].range > 0.0;
    }
    CHECK(any_spread);

    // Independent recomputation of Avg / Std / Range for NDCG@10.
    std::map<std::string, std::vector<double>> per;
    double orig = 0.0;
    for (const auto& row : probe.rows) {
      if (row.cutoff != 10) continue;
      if (row.shuffle < 0) {
        orig += row.ndcg;
      } else {
        per[row.instance_id].push_back(row.ndcg);
      }
    }
    double avg = 0.0, sd = 0.0, range = 0.0;
    for (const auto& [id, xs] : per) {
      const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
      double ss = 0.0;
      for (double x : xs) ss += (x - m) * (x - m);
      avg += m;
      sd += std::sqrt(ss / (xs.size() - 1));
      range += *std::max_element(xs.begin(), xs.end()) - *std::min_element(xs.begin(), xs.end());
    }
    const double n = static_cast<double>(per.size());
    CHECK(probe.summary[2].avg == doctest::Approx(avg / n).epsilon(1e-12));
    CHECK(probe.summary[2].std == doctest::Approx(sd / n).epsilon(1e-12));
    CHECK(probe.summary[2].range == doctest::Approx(range / n).epsilon(1e-12));
    CHECK(probe.summary[2].original_avg == doctest::Approx(orig / n).epsilon(1e-12));
  }
  SUBCASE("the probe is deterministic") {
    const auto a = probe_history_shuffle(recency_scorer(), v, 4, 9, cutoffs, 1);
    const auto b = probe_history_shuffle(recency_scorer(), v, 4, 9, cutoffs, 3);
    CHECK(history_rows_csv(a.rows, {}) == history_rows_csv(b.rows, {}));
  }
}

TEST_CASE("report outputs") {
  EvalReport r = evaluate(random_scorer(2), default_instances().test, EvalOptions{});
  r.strata = stratify(r.instances, r.cutoffs, StratumSpec{StratumKind::kFreqIndustrial, {}});
  r.config_hash = "0123abcd";
  r.seed = 42;
  r.checkpoint_id = "rl.ckpt";

  const std::string csv = report_csv(r);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "# config_hash=0123abcd,seed=42");
  while (std::getline(is, line) && line[0] == '#') {
  }
  CHECK(line == "metric,cutoff,stratum,mean,ci95,count");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 3 * (1 + 3));

  const std::string svg = report_svg(r, "t");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg == report_svg(r, "t"));

  const std::string path = temp_path("report.csv");
  emit_report(r, path, ReportFormat::kCsv);
  CHECK(read_artifact_meta(path) == ArtifactMeta{"0123abcd", 42});
  const std::string svg_path = temp_path("report.svg");
  emit_report(r, svg_path, ReportFormat::kSvg);
  CHECK(read_artifact_meta(svg_path) == ArtifactMeta{"0123abcd", 42});
  CHECK_THROWS_AS(emit_report(r, "/nonexistent-dir/x.csv", ReportFormat::kCsv), IoError);

  const EvalReport back = parse_per_instance_csv(per_instance_csv(r));
  CHECK(back.config_hash == r.config_hash);
  CHECK(back.seed == r.seed);
  REQUIRE(back.instances.size() == r.instances.size());
  for (std::size_t c = 0; c < r.cutoffs.size(); ++c) {
    CHECK(back.overall[c].mean == r.overall[c].mean);
    CHECK(back.overall[c].ci95 == r.overall[c].ci95);
  }
  CHECK(back.instances[3].positive_train_frequency == r.instances[3].positive_train_frequency);
}

TEST_CASE("probe outputs are stamped") {
  const std::vector<RankingInstance> v(default_instances().test.begin(), default_instances().test.begin() + 5);
  const PositionProbe probe = probe_position(presentation_order_scorer(), v, {1, 10, 20});
  const std::string csv = position_probe_csv(probe, {"beef", 7});
  CHECK(csv.rfind("# config_hash=beef,seed=7\nposition,rank,count\n", 0) == 0);
  CHECK(position_probe_svg(probe, {"beef", 7}).find("config_hash=beef,seed=7") != std::string::npos);
  const auto hs = probe_history_shuffle(recency_scorer(), v, 2, 1, {10});
  CHECK(history_summary_csv(hs.summary, {"beef", 7}).find("cutoff,avg,std,range,original_avg") != std::string::npos);
}
