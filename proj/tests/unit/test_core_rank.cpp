#include <cmath>
#include <map>

#include "doctest.h"
#include "oracles.hpp"
#include "plrank/core_rank.hpp"

using plrank::Permutation;
using plrank::RandomStream;
using plrank::RelevanceVector;
using plrank::ScoreVector;

namespace {

ScoreVector vec(std::initializer_list<double> xs) {
  ScoreVector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

ScoreVector random_scores(RandomStream& rng, int k, double spread = 1.5) {
  ScoreVector s(k);
  for (int i = 0; i < k; ++i) s(i) = rng.normal(0.0, spread);
  return s;
}

}  // namespace

TEST_CASE("permutation validates bijection") {
  CHECK_NOTHROW(Permutation({2, 0, 1}));
  CHECK_THROWS_AS(Permutation({0, 0, 1}), plrank::ContractViolation);
  CHECK_THROWS_AS(Permutation({0, 3, 1}), plrank::ContractViolation);
  CHECK_THROWS_AS(Permutation(std::vector<int>{}), plrank::ContractViolation);
  CHECK(Permutation({2, 0, 1}).ranks() == std::vector<int>{1, 2, 0});
}

TEST_CASE("dcg worked values") {
  CHECK(plrank::dcg(Permutation({0, 1, 2}), {1, 0, 0}, 3) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(plrank::dcg(Permutation({1, 0, 2}), {1, 0, 0}, 3) == doctest::Approx(0.63093).epsilon(1e-5));
  CHECK(plrank::dcg(Permutation({1, 0}), {3, 2}, 2) == doctest::Approx(7.41650).epsilon(1e-5));
  CHECK(plrank::dcg(Permutation({1, 0}), {3, 2}, 2) == doctest::Approx(oracle::dcg({1, 0}, {3, 2}, 2)));
}

TEST_CASE("dcg contract violations") {
  CHECK_THROWS_AS(plrank::dcg(Permutation({0, 1}), {1, 0, 0}, 2), plrank::ContractViolation);
  CHECK_THROWS_AS(plrank::dcg(Permutation({0, 1}), {1, 0}, 0), plrank::ContractViolation);
}

TEST_CASE("ndcg worked values and errors") {
  CHECK(plrank::ndcg(Permutation({0, 1, 2}), {1, 0, 0}, 3).value == 1.0);
  // 7.41650 / 8.89279
  CHECK(plrank::ndcg(Permutation({1, 0}), {3, 2}, 2).value == doctest::Approx(0.833991).epsilon(1e-6));

  std::vector<int> order(20);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[0], order[9]);  // positive (candidate 0) lands at rank 10
  RelevanceVector rel(20, 0);
  rel[0] = 1;
  const auto reward = plrank::ndcg(Permutation(order), rel, 10);
  CHECK(reward.value == doctest::Approx(1.0 / std::log2(11.0)).epsilon(1e-12));
  CHECK(reward.value == doctest::Approx(0.28906).epsilon(1e-4));
  CHECK(reward.cutoff == 10);

  CHECK_THROWS_AS(plrank::ndcg(Permutation({0, 1}), {0, 0}, 2), plrank::AllZeroRelevance);
}

TEST_CASE("ndcg is 1 exactly for ideal orderings up to ties") {
  // ties: candidates 0 and 2 share a grade; both orders are ideal
  CHECK(plrank::ndcg(Permutation({0, 2, 1}), {1, 0, 1}, 3).value == 1.0);
  CHECK(plrank::ndcg(Permutation({2, 0, 1}), {1, 0, 1}, 3).value == 1.0);
  CHECK(plrank::ndcg(Permutation({2, 1, 0}), {1, 0, 1}, 3).value < 1.0);
  // truncation: anything below the cutoff is ignored
  CHECK(plrank::ndcg(Permutation({0, 2, 1}), {2, 1, 0}, 1).value == 1.0);
}

TEST_CASE("ndcg matches brute-force ideal over random graded lists") {
  RandomStream rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(5));
    RelevanceVector rel(static_cast<std::size_t>(k));
    for (auto& g : rel) g = static_cast<int>(rng.below(4));
    rel[rng.below(static_cast<std::size_t>(k))] = 1 + static_cast<int>(rng.below(3));
    std::vector<int> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const int cutoff = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(k)));
    const double expect = oracle::dcg(order, rel, cutoff) / oracle::ideal_dcg(rel, cutoff);
    CHECK(plrank::ndcg(Permutation(order), rel, cutoff).value == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("dcg and ndcg are permutation covariant") {
  RandomStream rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(8));
    RelevanceVector rel(static_cast<std::size_t>(k));
    for (auto& g : rel) g = static_cast<int>(rng.below(3));
    rel[0] = 2;
    std::vector<int> order(static_cast<std::size_t>(k)), relabel(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::iota(relabel.begin(), relabel.end(), 0);
    rng.shuffle(order);
    rng.shuffle(relabel);
    // candidate c is renamed relabel[c]
    RelevanceVector rel2(rel.size());
    std::vector<int> order2(order.size());
    for (std::size_t c = 0; c < rel.size(); ++c) rel2[static_cast<std::size_t>(relabel[c])] = rel[c];
    for (std::size_t r = 0; r < order.size(); ++r) order2[r] = relabel[static_cast<std::size_t>(order[r])];
    const int cutoff = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(k)));
    CHECK(plrank::dcg(Permutation(order), rel, cutoff) == plrank::dcg(Permutation(order2), rel2, cutoff));
    CHECK(plrank::ndcg(Permutation(order), rel, cutoff).value ==
          plrank::ndcg(Permutation(order2), rel2, cutoff).value);
  }
}

TEST_CASE("pl_log_prob worked values") {
  for (const auto& o : oracle::all_orders(3)) {
    CHECK(plrank::pl_log_prob(Permutation(o), vec({0, 0, 0})) == doctest::Approx(std::log(1.0 / 6.0)).epsilon(1e-12));
  }
  CHECK(plrank::pl_log_prob(Permutation({0, 1}), vec({std::log(2.0), 0})) ==
        doctest::Approx(std::log(2.0 / 3.0)).epsilon(1e-12));
  // ln[(e / (e + 1 + 1/e)) * (1 / (1 + 1/e))]
  CHECK(plrank::pl_log_prob(Permutation({0, 1, 2}), vec({1, 0, -1})) == doctest::Approx(-0.720868).epsilon(1e-6));
  CHECK(plrank::pl_log_prob(Permutation({0}), vec({3.0})) == 0.0);
}

TEST_CASE("pl_log_prob matches the literal product and normalizes") {
  RandomStream rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(5));
    const ScoreVector s = random_scores(rng, k);
    double total = 0.0;
    for (const auto& o : oracle::all_orders(k)) {
      const double lp = plrank::pl_log_prob(Permutation(o), s);
      CHECK(lp == doctest::Approx(std::log(oracle::pl_probability(o, s))).epsilon(1e-12));
      total += std::exp(lp);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("pl_log_prob survives adversarial magnitudes") {
  const ScoreVector s = vec({800.0, -800.0, 0.0});
  const double lp = plrank::pl_log_prob(Permutation({0, 2, 1}), s);
  CHECK(std::isfinite(lp));
  CHECK(lp == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(plrank::pl_log_prob(Permutation({1, 0, 2}), s) == doctest::Approx(-1600.0 - std::log1p(std::exp(-800.0))));
}

TEST_CASE("pl_log_prob is invariant to a common shift") {
  RandomStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(6));
    const ScoreVector s = random_scores(rng, k);
    const double c = rng.uniform(-5.0, 5.0);
    const ScoreVector shifted = (s.array() + c).matrix();
    std::vector<int> o(static_cast<std::size_t>(k));
    std::iota(o.begin(), o.end(), 0);
    rng.shuffle(o);
    CHECK(std::abs(plrank::pl_log_prob(Permutation(o), s) - plrank::pl_log_prob(Permutation(o), shifted)) < 1e-12);
  }
}

TEST_CASE("pl_log_prob rejects bad input") {
  CHECK_THROWS_AS(plrank::pl_log_prob(Permutation({0, 1}), vec({1, 2, 3})), plrank::ContractViolation);
  CHECK_THROWS_AS(plrank::pl_log_prob(Permutation({0, 1}), vec({1, NAN})), plrank::ContractViolation);
}

TEST_CASE("pl_sample frequency for two items") {
  RandomStream rng(2024);
  const ScoreVector s = vec({std::log(2.0), 0.0});
  int first = 0;
  const int n = 60000;
  for (int i = 0; i < n; ++i) first += plrank::pl_sample(s, rng)[0] == 0;
  CHECK(std::abs(first / static_cast<double>(n) - 2.0 / 3.0) < 0.01);
}

TEST_CASE("pl_sample is uniform under equal scores") {
  RandomStream rng(99);
  const ScoreVector s = ScoreVector::Zero(4);
  std::map<std::vector<int>, int> counts;
  const int n = 120000;
  for (int i = 0; i < n; ++i) counts[plrank::pl_sample(s, rng).order()]++;
  CHECK(counts.size() == 24);
  for (const auto& [order, c] : counts) CHECK(std::abs(c / static_cast<double>(n) - 1.0 / 24.0) < 0.005);
}

TEST_CASE("pl_sample concentrates on the modal ranking") {
  RandomStream rng(7);
  const ScoreVector s = vec({50, 0, -50});
  int modal = 0;
  for (int i = 0; i < 10000; ++i) modal += plrank::pl_sample(s, rng) == Permutation({0, 1, 2});
  CHECK(modal / 10000.0 > 0.999);
}

TEST_CASE("pl_grad_scores worked values") {
  const auto g = plrank::pl_grad_scores(Permutation({0, 1}), vec({0, 0}));
  CHECK(g(0) == doctest::Approx(0.5));
  CHECK(g(1) == doctest::Approx(-0.5));
  CHECK(plrank::pl_grad_scores(Permutation({0}), vec({1.7}))(0) == 0.0);
}

TEST_CASE("pl_grad_scores matches finite differences") {
  RandomStream rng(123);
  auto check = [](const Permutation& perm, const ScoreVector& s) {
    const auto analytic = plrank::pl_grad_scores(perm, s);
    const auto fd = oracle::central_diff(
        [&](const Eigen::VectorXd& x) { return std::log(oracle::pl_probability(perm.order(), x)); }, s, 1e-6);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const double denom = std::max({std::abs(fd(i)), std::abs(analytic(i)), 1e-3});
      CHECK(std::abs(fd(i) - analytic(i)) / denom < 1e-6);
    }
  };
  check(Permutation({0, 1, 2}), vec({1, 0, -1}));
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(6));
    const ScoreVector s = random_scores(rng, k);
    std::vector<int> o(static_cast<std::size_t>(k));
    std::iota(o.begin(), o.end(), 0);
    rng.shuffle(o);
    check(Permutation(o), s);
  }
}

TEST_CASE("enumerate_expected_reward worked values") {
  const auto two = plrank::enumerate_expected_reward(vec({0, 0}), {1, 0}, 2);
  CHECK(two.value == doctest::Approx(0.81546).epsilon(1e-5));
  CHECK(two.gradient(0) == doctest::Approx(0.09227).epsilon(1e-4));
  CHECK(two.gradient(1) == doctest::Approx(-0.09227).epsilon(1e-4));

  const auto peaked = plrank::enumerate_expected_reward(vec({10, 0, -10}), {1, 0, 0}, 3);
  CHECK(std::abs(peaked.value - 1.0) < 1e-4);

  CHECK_THROWS_AS(plrank::enumerate_expected_reward(ScoreVector::Zero(9), RelevanceVector(9, 1), 3),
                  plrank::OracleTooLarge);
}

TEST_CASE("enumerate_expected_reward agrees with independent routes") {
  RandomStream rng(31);
  for (int trial = 0; trial < 15; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(4));
    const ScoreVector s = random_scores(rng, k);
    RelevanceVector rel(static_cast<std::size_t>(k), 0);
    for (auto& g : rel) g = static_cast<int>(rng.below(3));
    rel[0] = 1;
    const int cutoff = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(k)));
    const auto exact = plrank::enumerate_expected_reward(s, rel, cutoff);
    CHECK(exact.value == doctest::Approx(oracle::expected_ndcg(s, rel, cutoff)).epsilon(1e-12));
    const auto fd = oracle::central_diff(
        [&](const Eigen::VectorXd& x) { return oracle::expected_ndcg(x, rel, cutoff); }, s, 1e-6);
    for (Eigen::Index i = 0; i < k; ++i) CHECK(exact.gradient(i) == doctest::Approx(fd(i)).epsilon(1e-6));
  }
}

TEST_CASE("Monte Carlo reward and REINFORCE gradient agree with enumeration") {
  RandomStream rng(77);
  const int draws = 100000;
  for (int inst = 0; inst < 4; ++inst) {
    const ScoreVector s = random_scores(rng, 4, 1.0);
    RelevanceVector rel{0, 0, 0, 0};
    rel[rng.below(4)] = 1;
    const auto exact = plrank::enumerate_expected_reward(s, rel, 3);
    double sum = 0, sum_sq = 0;
    Eigen::VectorXd g_sum = Eigen::VectorXd::Zero(4), g_sq = Eigen::VectorXd::Zero(4);
    for (int i = 0; i < draws; ++i) {
      const auto tau = plrank::pl_sample(s, rng);
      const double r = plrank::ndcg(tau, rel, 3).value;
      sum += r;
      sum_sq += r * r;
      const Eigen::VectorXd g = r * plrank::pl_grad_scores(tau, s);
      g_sum += g;
      g_sq += g.cwiseProduct(g);
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
    CHECK(std::abs(mean - exact.value) < 3.0 * se + 1e-12);
    for (int j = 0; j < 4; ++j) {
      const double gm = g_sum(j) / draws;
      const double gse = std::sqrt((g_sq(j) / draws - gm * gm) / draws);
      CHECK(std::abs(gm - exact.gradient(j)) < 3.0 * gse + 1e-12);
    }
  }
}

TEST_CASE("argsort and ideal ranking break ties by index") {
  CHECK(plrank::argsort_descending(vec({1, 3, 3, 0})) == Permutation({1, 2, 0, 3}));
  CHECK(plrank::ideal_ranking({0, 2, 1, 2}) == Permutation({1, 3, 2, 0}));
}
