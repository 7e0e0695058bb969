#pragma once

// Synthetic recommendation universe with known relevance. Users and items get
// latent vectors in [-1, 1]^m; observable tokens are per-dimension buckets of
// those latents. A user's relevant items are the top fraction of an exposure
// pool by z.w / sqrt(m).

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "plrank/artifact.hpp"
#include "plrank/instance.hpp"
#include "plrank/policy.hpp"
#include "plrank/random.hpp"

namespace plrank {

enum class NegativeSampling { kPopularity, kUniform };
enum class Split { kTrain, kValid, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& s);
std::string to_string(NegativeSampling ns);
NegativeSampling parse_negative_sampling(const std::string& s);

struct WorldConfig {
  int m = 8;
  int buckets = 4;
  int n_users = 2000;
  int n_items = 1000;
  double zipf_s = 1.1;
  double history_geom_p = 0.08;
  int exposure_pool = 300;
  double relevant_fraction = 0.1;
  int K = 20;
  int L = 20;
  NegativeSampling negatives = NegativeSampling::kPopularity;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const WorldConfig&) const = default;
};

struct World {
  WorldConfig config;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  Eigen::MatrixXd user_latents;  // n_users x m
  Eigen::MatrixXd item_latents;  // n_items x m
  std::vector<std::vector<int>> user_tokens;
  std::vector<std::vector<int>> item_tokens;
  std::vector<double> popularity;  // normalized, item i has rank i + 1

  bool operator==(const World&) const = default;
};

/// Equal-width bucket of x in [-1, 1]; the right edge falls in the last bucket.
int bucketize(double x, int buckets);
double bucket_center(int bucket, int buckets);

World generate_world(const WorldConfig& cfg);

/// Deterministic 8:1:1 assignment from the seed and user id.
Split split_of(std::uint64_t seed, const std::string& user_id);

struct SkipStats {
  int no_positive = 0;
  int too_few_negatives = 0;
  int total() const { return no_positive + too_few_negatives; }
};

struct InstanceSet {
  std::vector<RankingInstance> train, valid, test;
  SkipStats skipped;

  const std::vector<RankingInstance>& split(Split s) const;
};

/// One instance per user; train_frequency counts positives over the train split.
InstanceSet build_all_instances(const World& world, int K, int L);
std::vector<RankingInstance> build_instances(const World& world, Split split, int K, int L,
                                             SkipStats* skipped = nullptr);

struct SftExample {
  std::string instance_id;
  std::string item_id;
  std::vector<int> prefix;  // context tokens followed by candidate tokens
  int context_length = 0;   // prefix[0, context_length) is shared by the instance's items
  std::vector<int> target;
  int teacher_decision = Vocab::kNotRecommend;
  int ground_truth = Vocab::kNotRecommend;
};

/// Templated three-section rationale for one (context, candidate) pair:
///   SEC_REASON   candidate attributes also seen in the history at that dimension
///   SEC_SELFCHECK candidate attributes on the two dimensions where profile and
///                 candidate disagree most (smallest product of bucket centers)
///   SEC_CONCLUDE decision EOS
/// The decision equals ground_truth, flipped with probability noise_rate.
SftExample oracle_teacher(const Vocab& vocab, const UserContext& ctx, const CandidateItem& item, bool ground_truth,
                          double noise_rate, RandomStream& rng, int max_history);

struct SftCorpus {
  std::vector<SftExample> examples;
  int kept = 0;
  int rejected = 0;
};

/// Runs the teacher over every (instance, candidate) pair and keeps only the
/// examples whose decision matches the ground truth.
SftCorpus build_sft_corpus(const Vocab& vocab, const std::vector<RankingInstance>& instances, double noise_rate,
                           std::uint64_t seed, int max_history);

// -- JSONL ingestion ----------------------------------------------------------

/// First line {"schema": 1} (plus the stamp when given), then one instance per line.
void save_jsonl(const std::vector<RankingInstance>& instances, const std::string& path,
                const ArtifactMeta& meta = {});
std::vector<RankingInstance> load_jsonl(const std::string& path);

void save_sft_jsonl(const SftCorpus& corpus, const std::string& path, const ArtifactMeta& meta = {});
SftCorpus load_sft_jsonl(const std::string& path);

}  // namespace plrank
