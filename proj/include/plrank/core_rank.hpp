#pragma once

// Exact ranking mathematics: permutations, DCG/NDCG, and the Plackett-Luce
// distribution over rankings (log-probability, sampling, score gradient).

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "plrank/errors.hpp"
#include "plrank/random.hpp"

namespace plrank {

using ScoreVector = Eigen::VectorXd;
using RelevanceVector = std::vector<int>;

/// An ordering of K candidates: order()[r] is the candidate index placed at
/// rank r (0-based). Construction validates the bijection.
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<int> order);

  static Permutation identity(int k);

  int size() const { return static_cast<int>(order_.size()); }
  int operator[](int rank) const { return order_[static_cast<std::size_t>(rank)]; }
  const std::vector<int>& order() const { return order_; }

  /// Rank (0-based) at which each candidate is placed.
  std::vector<int> ranks() const;

  bool operator==(const Permutation&) const = default;

 private:
  std::vector<int> order_;
};

struct RankReward {
  double value = 0.0;
  int cutoff = 1;
};

/// Indices sorted by score descending; ties go to the lower index.
template <typename Derived>
Permutation argsort_descending(const Eigen::DenseBase<Derived>& scores) {
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return scores(a) > scores(b); });
  return Permutation(std::move(idx));
}

/// Ideal ranking: grades descending, stable by ascending candidate index.
Permutation ideal_ranking(const RelevanceVector& rel);

double dcg(const Permutation& perm, const RelevanceVector& rel, int cutoff);

/// Truncated NDCG. Throws AllZeroRelevance when no grade is positive.
RankReward ndcg(const Permutation& perm, const RelevanceVector& rel, int cutoff);

namespace detail {

template <typename Derived>
void check_scores(const Permutation& perm, const Eigen::DenseBase<Derived>& s) {
  PLRANK_EXPECT(perm.size() == s.size(), "permutation and score lengths differ");
  PLRANK_EXPECT(perm.size() >= 1, "empty permutation");
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    PLRANK_EXPECT(std::isfinite(static_cast<double>(s(i))), "non-finite score");
  }
}

template <typename Scalar>
Scalar log_add_exp(Scalar a, Scalar b) {
  const Scalar hi = std::max(a, b);
  const Scalar lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

/// suffix[k] = logsumexp(s[tau(k)], ..., s[tau(K-1)]).
template <typename Derived>
std::vector<typename Derived::Scalar> suffix_logsumexp(const Permutation& perm,
                                                       const Eigen::DenseBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  const int k = perm.size();
  std::vector<Scalar> suffix(static_cast<std::size_t>(k));
  suffix[k - 1] = s(perm[k - 1]);
  for (int r = k - 2; r >= 0; --r) {
    suffix[r] = log_add_exp<Scalar>(s(perm[r]), suffix[r + 1]);
  }
  return suffix;
}

}  // namespace detail

/// log P(perm | s) under Plackett-Luce.
template <typename Derived>
typename Derived::Scalar pl_log_prob(const Permutation& perm, const Eigen::DenseBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  detail::check_scores(perm, s);
  const auto suffix = detail::suffix_logsumexp(perm, s);
  Scalar total = 0;
  for (int r = 0; r < perm.size(); ++r) total += s(perm[r]) - suffix[r];
  return total;
}

/// d log P(perm | s) / d s, closed form.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> pl_grad_scores(
    const Permutation& perm, const Eigen::DenseBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  detail::check_scores(perm, s);
  const auto suffix = detail::suffix_logsumexp(perm, s);
  const int k = perm.size();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> grad(k);
  for (int i = 0; i < k; ++i) {
    const Scalar si = s(perm[i]);
    Scalar mass = 0;
    for (int r = 0; r <= i; ++r) mass += std::exp(si - suffix[r]);
    grad(perm[i]) = Scalar(1) - mass;
  }
  return grad;
}

/// Sequential softmax sampling over the remaining candidates.
template <typename Derived>
Permutation pl_sample(const Eigen::DenseBase<Derived>& s, RandomStream& rng) {
  const int k = static_cast<int>(s.size());
  PLRANK_EXPECT(k >= 1, "empty score vector");
  std::vector<int> remaining(static_cast<std::size_t>(k));
  std::iota(remaining.begin(), remaining.end(), 0);
  std::vector<int> order;
  order.reserve(remaining.size());
  std::vector<double> weights;
  while (!remaining.empty()) {
    double hi = -std::numeric_limits<double>::infinity();
    for (int c : remaining) hi = std::max(hi, static_cast<double>(s(c)));
    PLRANK_EXPECT(std::isfinite(hi), "non-finite score");
    weights.resize(remaining.size());
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      weights[i] = std::exp(static_cast<double>(s(remaining[i])) - hi);
    }
    const std::size_t pick = rng.categorical(weights);
    order.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return Permutation(std::move(order));
}

struct ExpectedReward {
  double value = 0.0;
  ScoreVector gradient;
};

/// Largest K accepted by the enumeration oracle.
inline constexpr int kMaxEnumerationSize = 8;

/// E_{tau ~ PL(s)}[ndcg(tau)] and its exact gradient w.r.t. s, by enumerating
/// all K! permutations.
ExpectedReward enumerate_expected_reward(const ScoreVector& s, const RelevanceVector& rel,
                                         int cutoff);

}  // namespace plrank
