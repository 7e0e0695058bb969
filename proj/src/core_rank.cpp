#include "plrank/core_rank.hpp"

#include <cmath>

namespace plrank {

Permutation::Permutation(std::vector<int> order) : order_(std::move(order)) {
  const auto k = order_.size();
  PLRANK_EXPECT(k >= 1, "permutation must hold at least one candidate");
  std::vector<char> seen(k, 0);
  for (int c : order_) {
    PLRANK_EXPECT(c >= 0 && static_cast<std::size_t>(c) < k,
                  "permutation entry " + std::to_string(c) + " out of range");
    PLRANK_EXPECT(!seen[static_cast<std::size_t>(c)],
                  "permutation repeats candidate " + std::to_string(c));
    seen[static_cast<std::size_t>(c)] = 1;
  }
}

Permutation Permutation::identity(int k) {
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  return Permutation(std::move(order));
}

std::vector<int> Permutation::ranks() const {
  std::vector<int> r(order_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) r[static_cast<std::size_t>(order_[i])] = static_cast<int>(i);
  return r;
}

Permutation ideal_ranking(const RelevanceVector& rel) {
  PLRANK_EXPECT(!rel.empty(), "empty relevance vector");
  std::vector<int> idx(rel.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return rel[static_cast<std::size_t>(a)] > rel[static_cast<std::size_t>(b)];
  });
  return Permutation(std::move(idx));
}

double dcg(const Permutation& perm, const RelevanceVector& rel, int cutoff) {
  PLRANK_EXPECT(cutoff >= 1, "cutoff must be >= 1");
  PLRANK_EXPECT(static_cast<std::size_t>(perm.size()) == rel.size(),
                "permutation and relevance lengths differ");
  const int depth = std::min(cutoff, perm.size());
  double total = 0.0;
  for (int r = 0; r < depth; ++r) {
    const int grade = rel[static_cast<std::size_t>(perm[r])];
    PLRANK_EXPECT(grade >= 0, "negative relevance grade");
    if (grade == 0) continue;
    total += (std::exp2(static_cast<double>(grade)) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return total;
}

RankReward ndcg(const Permutation& perm, const RelevanceVector& rel, int cutoff) {
  const double actual = dcg(perm, rel, cutoff);
  if (std::none_of(rel.begin(), rel.end(), [](int g) { return g > 0; })) throw AllZeroRelevance();
  const double ideal = dcg(ideal_ranking(rel), rel, cutoff);
  return RankReward{std::clamp(actual / ideal, 0.0, 1.0), cutoff};
}

ExpectedReward enumerate_expected_reward(const ScoreVector& s, const RelevanceVector& rel,
                                         int cutoff) {
  const int k = static_cast<int>(s.size());
  if (k > kMaxEnumerationSize) {
    throw OracleTooLarge("enumeration oracle limited to K <= " + std::to_string(kMaxEnumerationSize) +
                         ", got " + std::to_string(k));
  }
  PLRANK_EXPECT(k >= 1 && static_cast<std::size_t>(k) == rel.size(), "score and relevance lengths differ");
  ExpectedReward out{0.0, ScoreVector::Zero(k)};
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  do {
    const Permutation perm(order);
    const double p = std::exp(pl_log_prob(perm, s));
    const double reward = ndcg(perm, rel, cutoff).value;
    out.value += p * reward;
    out.gradient += (p * reward) * pl_grad_scores(perm, s);
  } while (std::next_permutation(order.begin(), order.end()));
  return out;
}

}  // namespace plrank
