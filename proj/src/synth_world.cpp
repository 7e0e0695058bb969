#include "plrank/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_map>

namespace plrank {

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "'");
}

std::string to_string(NegativeSampling ns) { return ns == NegativeSampling::kUniform ? "uniform" : "popularity"; }

NegativeSampling parse_negative_sampling(const std::string& s) {
  if (s == "popularity") return NegativeSampling::kPopularity;
  if (s == "uniform") return NegativeSampling::kUniform;
  throw ConfigError("unknown negative sampling '" + s + "'");
}

void WorldConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (m < 1) fail("m must be >= 1");
  if (buckets < 2) fail("buckets must be >= 2");
  if (n_users < 1 || n_items < 1 || exposure_pool < 1) fail("user, item and pool counts must be positive");
  if (!(zipf_s >= 0.0)) fail("zipf_s must be non-negative");
  if (!(history_geom_p > 0.0 && history_geom_p <= 1.0)) fail("history_geom_p must be in (0, 1]");
  if (!(relevant_fraction > 0.0 && relevant_fraction < 1.0)) fail("relevant_fraction must be in (0, 1)");
  if (K < 2) fail("K must be >= 2");
  if (L < 1) fail("L must be >= 1");
}

int bucketize(double x, int buckets) {
  const int b = static_cast<int>(std::floor((x + 1.0) * 0.5 * buckets));
  return std::clamp(b, 0, buckets - 1);
}

double bucket_center(int bucket, int buckets) { return -1.0 + (bucket + 0.5) * 2.0 / buckets; }

namespace {

std::string padded(char prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%05d", prefix, i);
  return buf;
}

// Weighted sampling without replacement (Efraimidis-Spirakis): the n largest
// log(u) / w keys. Zero-weight entries are never chosen.
std::vector<int> weighted_sample(RandomStream& rng, const std::vector<int>& ids, const std::vector<double>& weights,
                                 std::size_t n) {
  std::vector<std::pair<double, int>> keyed;
  keyed.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    if (weights[i] > 0.0) keyed.emplace_back(std::log(u) / weights[i], ids[i]);
  }
  n = std::min(n, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(n), keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = keyed[i].second;
  return out;
}

std::vector<int> bucket_tokens(const Eigen::RowVectorXd& latent, int buckets) {
  std::vector<int> out(static_cast<std::size_t>(latent.size()));
  for (Eigen::Index d = 0; d < latent.size(); ++d) out[static_cast<std::size_t>(d)] = bucketize(latent(d), buckets);
  return out;
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  w.user_latents.resize(cfg.n_users, cfg.m);
  w.item_latents.resize(cfg.n_items, cfg.m);
  for (int u = 0; u < cfg.n_users; ++u) {
    w.user_ids.push_back(padded('u', u));
    RandomStream rng = RandomStream::keyed(cfg.seed, "user_latent", w.user_ids.back());
    for (int d = 0; d < cfg.m; ++d) w.user_latents(u, d) = rng.uniform(-1.0, 1.0);
    w.user_tokens.push_back(bucket_tokens(w.user_latents.row(u), cfg.buckets));
  }
  double total = 0.0;
  for (int i = 0; i < cfg.n_items; ++i) {
    w.item_ids.push_back(padded('i', i));
    RandomStream rng = RandomStream::keyed(cfg.seed, "item_latent", w.item_ids.back());
    for (int d = 0; d < cfg.m; ++d) w.item_latents(i, d) = rng.uniform(-1.0, 1.0);
    w.item_tokens.push_back(bucket_tokens(w.item_latents.row(i), cfg.buckets));
    w.popularity.push_back(std::pow(static_cast<double>(i + 1), -cfg.zipf_s));
    total += w.popularity.back();
  }
  for (double& p : w.popularity) p /= total;
  return w;
}

Split split_of(std::uint64_t seed, const std::string& user_id) {
  const std::uint64_t h = derive_seed(seed, "split", user_id);
  const std::uint64_t bucket = h % 10;
  if (bucket < 8) return Split::kTrain;
  return bucket == 8 ? Split::kValid : Split::kTest;
}

const std::vector<RankingInstance>& InstanceSet::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kValid: return valid;
    case Split::kTest: return test;
  }
  return test;
}

InstanceSet build_all_instances(const World& world, int K, int L) {
  const WorldConfig& cfg = world.config;
  PLRANK_EXPECT(K >= 2, "K must be >= 2");
  PLRANK_EXPECT(L >= 1, "L must be >= 1");
  const double norm = std::sqrt(static_cast<double>(cfg.m));
  const int n_items = static_cast<int>(world.item_ids.size());
  std::vector<int> all_items(static_cast<std::size_t>(n_items));
  std::iota(all_items.begin(), all_items.end(), 0);

  InstanceSet out;
  for (std::size_t u = 0; u < world.user_ids.size(); ++u) {
    const std::string& uid = world.user_ids[u];
    RandomStream rng = RandomStream::keyed(cfg.seed, "user_events", uid);

    std::vector<int> pool =
        weighted_sample(rng, all_items, world.popularity, static_cast<std::size_t>(cfg.exposure_pool));
    std::vector<double> dot(static_cast<std::size_t>(n_items), 0.0);
    for (int i : pool) dot[static_cast<std::size_t>(i)] = world.user_latents.row(static_cast<Eigen::Index>(u)).dot(world.item_latents.row(i)) / norm;
    std::sort(pool.begin(), pool.end(), [&](int a, int b) {
      const double da = dot[static_cast<std::size_t>(a)];
      const double db = dot[static_cast<std::size_t>(b)];
      return da > db || (da == db && a < b);
    });
    const auto n_relevant = static_cast<std::size_t>(
        std::lround(cfg.relevant_fraction * static_cast<double>(pool.size())));
    if (n_relevant == 0) {
      ++out.skipped.no_positive;
      continue;
    }
    std::vector<int> relevant(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_relevant));
    std::vector<int> non_relevant(pool.begin() + static_cast<std::ptrdiff_t>(n_relevant), pool.end());
    if (non_relevant.size() < static_cast<std::size_t>(K - 1)) {
      ++out.skipped.too_few_negatives;
      continue;
    }

    // Interaction sequence: distinct relevant items, oldest first. The last is held out.
    const std::size_t n_events = std::min(1 + rng.geometric(cfg.history_geom_p), relevant.size());
    rng.shuffle(relevant);
    const int positive = relevant[n_events - 1];
    const std::size_t first = n_events - 1 > static_cast<std::size_t>(L) ? n_events - 1 - static_cast<std::size_t>(L) : 0;

    RankingInstance inst;
    inst.instance_id = "inst-" + uid;
    inst.ctx.user_id = uid;
    inst.ctx.profile_tokens = world.user_tokens[u];
    for (std::size_t e = first; e + 1 < n_events; ++e) {
      const int item = relevant[e];
      inst.ctx.history.push_back({world.item_ids[static_cast<std::size_t>(item)], world.item_tokens[static_cast<std::size_t>(item)],
                                  static_cast<std::int64_t>(e)});
    }

    std::vector<int> negatives;
    if (cfg.negatives == NegativeSampling::kPopularity) {
      std::vector<double> weights;
      for (int i : non_relevant) weights.push_back(world.popularity[static_cast<std::size_t>(i)]);
      negatives = weighted_sample(rng, non_relevant, weights, static_cast<std::size_t>(K - 1));
    } else {
      rng.shuffle(non_relevant);
      negatives.assign(non_relevant.begin(), non_relevant.begin() + (K - 1));
    }

    std::vector<std::pair<int, int>> cands{{positive, 1}};
    for (int n : negatives) cands.emplace_back(n, 0);
    rng.shuffle(cands);
    for (const auto& [item, grade] : cands) {
      inst.candidates.push_back({world.item_ids[static_cast<std::size_t>(item)], world.item_tokens[static_cast<std::size_t>(item)], 0});
      inst.relevance.push_back(grade);
    }

    switch (split_of(cfg.seed, uid)) {
      case Split::kTrain: out.train.push_back(std::move(inst)); break;
      case Split::kValid: out.valid.push_back(std::move(inst)); break;
      case Split::kTest: out.test.push_back(std::move(inst)); break;
    }
  }

  std::unordered_map<std::string, int> freq;
  for (const RankingInstance& inst : out.train) {
    ++freq[inst.candidates[static_cast<std::size_t>(inst.positive_index())].item_id];
  }
  for (auto* split : {&out.train, &out.valid, &out.test}) {
    for (RankingInstance& inst : *split) {
      for (CandidateItem& c : inst.candidates) {
        const auto it = freq.find(c.item_id);
        c.train_frequency = it == freq.end() ? 0 : it->second;
      }
    }
  }
  return out;
}

std::vector<RankingInstance> build_instances(const World& world, Split split, int K, int L, SkipStats* skipped) {
  InstanceSet all = build_all_instances(world, K, L);
  if (skipped != nullptr) *skipped = all.skipped;
  switch (split) {
    case Split::kTrain: return std::move(all.train);
    case Split::kValid: return std::move(all.valid);
    case Split::kTest: return std::move(all.test);
  }
  return {};
}

// -- teacher ------------------------------------------------------------------

SftExample oracle_teacher(const Vocab& vocab, const UserContext& ctx, const CandidateItem& item, bool ground_truth,
                          double noise_rate, RandomStream& rng, int max_history) {
  PLRANK_EXPECT(noise_rate >= 0.0 && noise_rate < 1.0, "noise_rate must be in [0, 1)");
  PLRANK_EXPECT(static_cast<int>(item.tokens.size()) == vocab.dims() &&
                    static_cast<int>(ctx.profile_tokens.size()) == vocab.dims(),
                "attribute token count differs from the vocab's dimension count");
  SftExample ex;
  ex.item_id = item.item_id;
  ex.prefix = context_tokens(vocab, ctx, max_history);
  ex.context_length = static_cast<int>(ex.prefix.size());
  const std::vector<int> cand = candidate_tokens(vocab, item);
  ex.prefix.insert(ex.prefix.end(), cand.begin(), cand.end());

  const int m = vocab.dims();
  ex.target.push_back(Vocab::kSecReason);
  for (int d = 0; d < m; ++d) {
    const int b = item.tokens[static_cast<std::size_t>(d)];
    const bool shared = std::any_of(ctx.history.begin(), ctx.history.end(),
                                    [&](const HistoryEvent& e) { return e.tokens[static_cast<std::size_t>(d)] == b; });
    if (shared) ex.target.push_back(vocab.attr(d, b));
  }

  ex.target.push_back(Vocab::kSecSelfcheck);
  std::vector<std::pair<double, int>> agreement;
  for (int d = 0; d < m; ++d) {
    agreement.emplace_back(bucket_center(ctx.profile_tokens[static_cast<std::size_t>(d)], vocab.buckets()) *
                               bucket_center(item.tokens[static_cast<std::size_t>(d)], vocab.buckets()),
                           d);
  }
  std::sort(agreement.begin(), agreement.end());
  for (const auto& [product, d] : agreement) {
    if (product >= 0.0) break;
    ex.target.push_back(vocab.attr(d, item.tokens[static_cast<std::size_t>(d)]));
  }

  ex.ground_truth = ground_truth ? Vocab::kRecommend : Vocab::kNotRecommend;
  const bool flip = rng.bernoulli(noise_rate);
  ex.teacher_decision = (ground_truth != flip) ? Vocab::kRecommend : Vocab::kNotRecommend;
  ex.target.push_back(Vocab::kSecConclude);
  ex.target.push_back(ex.teacher_decision);
  ex.target.push_back(Vocab::kEos);
  return ex;
}

SftCorpus build_sft_corpus(const Vocab& vocab, const std::vector<RankingInstance>& instances, double noise_rate,
                           std::uint64_t seed, int max_history) {
  SftCorpus corpus;
  for (const RankingInstance& inst : instances) {
    for (int k = 0; k < inst.size(); ++k) {
      const CandidateItem& item = inst.candidates[static_cast<std::size_t>(k)];
      RandomStream rng = RandomStream::keyed(seed, "teacher", inst.instance_id, item.item_id);
      SftExample ex = oracle_teacher(vocab, inst.ctx, item, inst.relevance[static_cast<std::size_t>(k)] > 0,
                                     noise_rate, rng, max_history);
      ex.instance_id = inst.instance_id;
      if (ex.teacher_decision == ex.ground_truth) {
        corpus.examples.push_back(std::move(ex));
        ++corpus.kept;
      } else {
        ++corpus.rejected;
      }
    }
  }
  return corpus;
}

}  // namespace plrank
