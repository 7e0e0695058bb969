#pragma once

// Ranking data shared by the world generator, the policy serializer, training
// and evaluation. Attribute "tokens" here are bucket indices, one per latent
// dimension; the policy vocabulary maps (dimension, bucket) to token ids.

#include <cstdint>
#include <string>
#include <vector>

#include "plrank/core_rank.hpp"

namespace plrank {

struct HistoryEvent {
  std::string item_id;
  std::vector<int> tokens;
  std::int64_t t = 0;

  bool operator==(const HistoryEvent&) const = default;
};

struct UserContext {
  std::string user_id;
  std::vector<int> profile_tokens;
  std::vector<HistoryEvent> history;  // ascending t

  bool operator==(const UserContext&) const = default;
};

struct CandidateItem {
  std::string item_id;
  std::vector<int> tokens;
  int train_frequency = 0;

  bool operator==(const CandidateItem&) const = default;
};

struct RankingInstance {
  std::string instance_id;
  UserContext ctx;
  std::vector<CandidateItem> candidates;
  RelevanceVector relevance;

  int size() const { return static_cast<int>(candidates.size()); }
  /// Index of the first candidate with a positive grade, or -1.
  int positive_index() const;

  bool operator==(const RankingInstance&) const = default;
};

}  // namespace plrank
