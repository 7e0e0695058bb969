#include <cmath>
#include <map>

#include "doctest.h"
#include "oracles.hpp"
#include "plrank/eval_probe.hpp"
#include "plrank/synth_world.hpp"
#include "plrank/training.hpp"

using namespace plrank;

namespace {

struct Fixture {
  WorldConfig world_cfg;
  ModelConfig model_cfg;
  World world;
  InstanceSet set;
  PolicyParams params;

  explicit Fixture(int K = 4, std::uint64_t seed = 11) {
    world_cfg.m = 2;
    world_cfg.buckets = 2;
    world_cfg.n_users = 120;
    world_cfg.n_items = 80;
    world_cfg.exposure_pool = 60;
    world_cfg.K = K;
    world_cfg.L = 5;
    world_cfg.seed = seed;
    model_cfg.dims = 2;
    model_cfg.buckets = 2;
    model_cfg.d_model = 16;
    model_cfg.ffn = 16;
    model_cfg.head_hidden = 8;
    model_cfg.max_len = 48;
    model_cfg.max_gen = 10;
    world = generate_world(world_cfg);
    set = build_all_instances(world, K, 5);
    RandomStream rng(seed);
    params = PolicyParams::init(model_cfg, rng);
  }

  TrainConfig train_cfg() const {
    TrainConfig cfg;
    cfg.L = 5;
    cfg.batch_size = 2;
    cfg.steps_rl = 3;
    cfg.sft_batch_size = 2;
    return cfg;
  }
};

std::vector<Matrix> theta_values(PolicyParams& p) {
  std::vector<Matrix> out;
  for (auto& [name, m] : p.named_theta()) out.push_back(*m);
  return out;
}

std::vector<Matrix> phi_values(PolicyParams& p) {
  std::vector<Matrix> out;
  for (auto& [name, m] : p.named_phi()) out.push_back(*m);
  return out;
}

// New-policy token log-probs for every rationale of a record, on a tape.
std::vector<ad::Tensor> relog(ad::Tape& tape, const PolicyParams& params, const RankingInstance& inst,
                              const RolloutRecord& rec, int L) {
  const BoundParams bound = bind(tape, params, true, false);
  const Vocab vocab = params.config.vocab();
  DecoderCache cache;
  extend(bound, cache, context_tokens(vocab, inst.ctx, L));
  std::vector<ad::Tensor> out;
  for (int k = 0; k < inst.size(); ++k) {
    out.push_back(teacher_force(bound, cache, candidate_tokens(vocab, inst.candidates[k]), rec.rationales[k].tokens,
                                GenMode::kCot, 1.0)
                      .log_probs);
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.baseline = Baseline::kLoo;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.rankings_per_instance = 2;
  CHECK_NOTHROW(cfg.validate());
  cfg = {};
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.reward_cutoff = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_stage("rl") == Stage::kRl);
  CHECK_THROWS_AS(parse_baseline("mean"), ConfigError);
}

TEST_CASE("Adam first step and global norm") {
  Matrix p(1, 2);
  p << 1.0, -2.0;
  Matrix g(1, 2);
  g << 0.5, -4.0;
  Adam adam(0.1);
  adam.step({&p}, {g});
  // After one step m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps).
  CHECK(p(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
  CHECK(global_norm({g, g}) == doctest::Approx(std::sqrt(2.0 * (0.25 + 16.0))));
}

TEST_CASE("PPO clip cases") {
  CHECK(ppo_clip_term(1.3, 0.8, 0.2) == 0.96);
  CHECK(ppo_clip_term(0.5, 0.8, 0.2) == 0.40);
  CHECK(ppo_clip_term(1.0, 0.8, 0.2) == 0.8);
  // Negative reward: the pessimistic bound takes the clipped side the other way.
  CHECK(ppo_clip_term(1.3, -1.0, 0.2) == doctest::Approx(-1.3));
  CHECK(ppo_clip_term(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
}

TEST_CASE("tape Plackett-Luce log-prob matches the closed form") {
  RandomStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd s(5);
    for (int i = 0; i < 5; ++i) s(i) = rng.normal();
    const Permutation perm = pl_sample(s, rng);
    ad::Tape tape;
    const ad::Tensor st = tape.parameter(Matrix(s));
    const ad::Tensor lp = pl_log_prob(perm, st);
    CHECK(lp.item() == doctest::Approx(pl_log_prob(perm, s)).epsilon(1e-13));
    const Matrix g = tape.backward(lp).of(st);
    const Eigen::VectorXd expected = pl_grad_scores(perm, s);
    for (int i = 0; i < 5; ++i) CHECK(g(i, 0) == doctest::Approx(expected(i)).epsilon(1e-12));
  }
}

TEST_CASE("REINFORCE weights and zero-gradient cases") {
  CHECK(reinforce_weights({0.3, 0.6}, Baseline::kNone) == std::vector<double>{0.15, 0.3});
  const auto loo = reinforce_weights({0.2, 0.5, 0.8}, Baseline::kLoo);
  CHECK(loo[0] == doctest::Approx((0.2 - 0.65) / 3));
  CHECK(loo[1] == doctest::Approx((0.5 - 0.5) / 3));
  CHECK(loo[2] == doctest::Approx((0.8 - 0.35) / 3));

  RolloutRecord rec;
  rec.scores = Eigen::VectorXd::LinSpaced(3, -1.0, 1.0);
  rec.rankings = {Permutation({2, 0, 1}), Permutation({0, 1, 2})};
  Eigen::VectorXd grad;

  rec.rewards = {0.0, 0.0};
  head_objective(rec, rec.scores, Baseline::kNone, &grad);
  CHECK(grad.norm() == 0.0);

  rec.rewards = {0.63, 0.63};
  head_objective(rec, rec.scores, Baseline::kLoo, &grad);
  CHECK(grad.norm() == 0.0);

  rec.rewards = {0.4, 0.9};
  ad::Tape tape;
  const ad::Tensor st = tape.parameter(Matrix(rec.scores));
  const ad::Tensor obj = head_objective(rec, st, Baseline::kLoo);
  const double value = head_objective(rec, rec.scores, Baseline::kLoo, &grad);
  CHECK(obj.item() == doctest::Approx(value).epsilon(1e-14));
  const Matrix tg = tape.backward(obj).of(st);
  for (int i = 0; i < 3; ++i) CHECK(tg(i, 0) == doctest::Approx(grad(i)).epsilon(1e-13));
}

TEST_CASE("K=2 REINFORCE estimator converges to the enumerated gradient") {
  const Eigen::VectorXd s = Eigen::VectorXd::Zero(2);
  const RelevanceVector rel{1, 0};
  const ExpectedReward exact = enumerate_expected_reward(s, rel, 2);
  CHECK(exact.gradient(0) == doctest::Approx(0.09227).epsilon(1e-4));
  CHECK(exact.gradient(1) == doctest::Approx(-0.09227).epsilon(1e-4));

  RandomStream rng(17);
  const int n = 100000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(2), sq = Eigen::VectorXd::Zero(2);
  RolloutRecord rec;
  rec.scores = s;
  for (int i = 0; i < n; ++i) {
    rec.rankings = {pl_sample(s, rng)};
    rec.rewards = {ndcg(rec.rankings[0], rel, 2).value};
    Eigen::VectorXd g;
    head_objective(rec, s, Baseline::kNone, &g);
    sum += g;
    sq += g.cwiseProduct(g);
  }
  const Eigen::VectorXd mean = sum / n;
  for (int i = 0; i < 2; ++i) {
    const double se = std::sqrt((sq(i) / n - mean(i) * mean(i)) / n);
    CHECK(std::abs(mean(i) - exact.gradient(i)) < 3.0 * se);
  }
}

TEST_CASE("PPO ratio identity at the snapshot and clip monotonicity") {
  Fixture fx;
  const TrainConfig cfg = fx.train_cfg();
  const RankingInstance& inst = fx.set.train.front();
  const PolicySnapshot snapshot(fx.params);
  const RolloutRecord rec = rollout(snapshot, inst, 5, 1, cfg);

  {
    ad::Tape tape;
    const auto lps = relog(tape, fx.params, inst, rec, cfg.L);
    for (int k = 0; k < inst.size(); ++k) {
      for (std::size_t t = 0; t < rec.rationales[k].token_logprobs.size(); ++t) {
        CHECK(std::abs(lps[k].value()(static_cast<Eigen::Index>(t), 0) - rec.rationales[k].token_logprobs[t]) <= 1e-10);
      }
    }
    CHECK(std::abs(ppo_objective(rec, lps, cfg.epsilon).item() - rec.mean_reward()) <= 1e-10);
  }

  RandomStream rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    PolicyParams moved = fx.params;
    for (auto& [name, m] : moved.named_theta()) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += rng.normal(0.0, 0.05);
    }
    ad::Tape tape;
    const auto lps = relog(tape, moved, inst, rec, cfg.L);
    CHECK(ppo_objective(rec, lps, cfg.epsilon).item() <= ppo_unclipped(rec, lps));
  }
}

TEST_CASE("rollout records are consistent") {
  Fixture fx;
  TrainConfig cfg = fx.train_cfg();
  cfg.rankings_per_instance = 3;
  const RankingInstance& inst = fx.set.train.front();
  const RolloutRecord rec = rollout(PolicySnapshot(fx.params), inst, 5, 1, cfg);
  CHECK(rec.instance_id == inst.instance_id);
  REQUIRE(rec.rationales.size() == 4);
  CHECK(rec.scores.size() == 4);
  REQUIRE(rec.rankings.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(rec.rewards[j] == ndcg(rec.rankings[j], inst.relevance, cfg.reward_cutoff).value);
    CHECK(rec.rewards[j] >= 0.0);
    CHECK(rec.rewards[j] <= 1.0);
  }
  for (int k = 0; k < 4; ++k) CHECK(rec.scores(k) == score(fx.params, rec.rationales[k]));
}

TEST_CASE("rollout is invariant to candidate presentation order") {
  Fixture fx;
  const TrainConfig cfg = fx.train_cfg();
  const RankingInstance& inst = fx.set.train.front();
  RankingInstance reversed = inst;
  std::reverse(reversed.candidates.begin(), reversed.candidates.end());
  std::reverse(reversed.relevance.begin(), reversed.relevance.end());
  const PolicySnapshot snap(fx.params);
  const RolloutRecord a = rollout(snap, inst, 9, 4, cfg);
  const RolloutRecord b = rollout(snap, reversed, 9, 4, cfg);
  for (int k = 0; k < 4; ++k) {
    CHECK(a.scores(k) == b.scores(3 - k));
    CHECK(a.rationales[k].tokens == b.rationales[3 - k].tokens);
  }
}

TEST_CASE("equal scores give uniform rankings and the enumerated mean reward") {
  Fixture fx;
  for (auto& [name, m] : fx.params.named_phi()) m->setZero();
  const TrainConfig cfg = fx.train_cfg();
  const RankingInstance& inst = fx.set.train.front();
  const PolicySnapshot snap(fx.params);
  const double exact = enumerate_expected_reward(Eigen::VectorXd::Zero(4), inst.relevance, cfg.reward_cutoff).value;
  CHECK(exact == doctest::Approx(oracle::uniform_single_positive_ndcg(4, 10)).epsilon(1e-12));
  const int n = 10000;
  double sum = 0.0, sq = 0.0;
  std::map<std::vector<int>, int> counts;
  for (int i = 0; i < n; ++i) {
    const RolloutRecord rec = rollout(snap, inst, 1, i, cfg);
    sum += rec.rewards[0];
    sq += rec.rewards[0] * rec.rewards[0];
    ++counts[rec.rankings[0].order()];
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - exact) < 3.0 * se);
  CHECK(counts.size() == 24);
}

TEST_CASE("SFT loss starts near log|V| and decreases") {
  WorldConfig wc;
  wc.n_users = 150;
  const World w = generate_world(wc);
  const InstanceSet set = build_all_instances(w, 20, 20);
  const std::vector<RankingInstance> train(set.train.begin(), set.train.begin() + 100);
  SftCorpus corpus = build_sft_corpus(Vocab(8, 4), train, 0.0, 1, 20);
  REQUIRE(corpus.examples.size() == 2000);
  ModelConfig mc;
  RandomStream rng(2);
  PolicyParams p = PolicyParams::init(mc, rng);

  std::vector<const SftExample*> all;
  for (const SftExample& ex : corpus.examples) all.push_back(&ex);
  const double initial = sft_loss(p, all);
  CHECK(initial == doctest::Approx(std::log(40.0)).epsilon(0.05));

  const std::vector<Matrix> phi_before = phi_values(p);
  TrainConfig cfg;
  cfg.steps_sft = 200;
  cfg.sft_batch_size = 2;
  const MetricsLog log = sft_train(p, corpus, cfg);
  CHECK(log.rows().size() == 200);
  const double after = sft_loss(p, all);
  INFO("initial " << initial << " after " << after);
  CHECK(after < 0.7 * initial);
  CHECK(phi_values(p) == phi_before);

  const std::vector<RankingInstance> held(set.valid.begin(), set.valid.begin() + 10);
  CHECK(decision_accuracy(p, held, 20) > 0.8);
}

TEST_CASE("decision-only SFT fits the decision tail") {
  Fixture fx;
  const SftCorpus corpus = build_sft_corpus(fx.model_cfg.vocab(), fx.set.train, 0.0, 1, 5);
  std::vector<const SftExample*> all;
  for (const SftExample& ex : corpus.examples) all.push_back(&ex);
  const double initial = sft_loss(fx.params, all, GenMode::kDecisionOnly);
  CHECK(initial == doctest::Approx(std::log(3.0)).epsilon(0.1));

  TrainConfig cfg = fx.train_cfg();
  cfg.cot = false;
  cfg.steps_sft = 60;
  cfg.sft_batch_size = 4;
  const MetricsLog log = sft_train(fx.params, corpus, cfg);
  CHECK(log.rows().back().sft_loss < log.rows().front().sft_loss);
  CHECK(sft_loss(fx.params, all, GenMode::kDecisionOnly) < 0.6 * initial);
}

TEST_CASE("non-finite SFT loss aborts") {
  Fixture fx;
  const SftCorpus corpus = build_sft_corpus(fx.model_cfg.vocab(), fx.set.train, 0.0, 1, 5);
  fx.params.output(0, 0) = std::nan("");
  TrainConfig cfg = fx.train_cfg();
  cfg.steps_sft = 1;
  CHECK_THROWS_AS(sft_train(fx.params, corpus, cfg), NonFiniteLoss);
}

TEST_CASE("ablation switches") {
  SUBCASE("joint=false leaves theta bit-identical and moves phi") {
    Fixture fx;
    TrainConfig cfg = fx.train_cfg();
    cfg.joint = false;
    const auto theta = theta_values(fx.params);
    const auto phi = phi_values(fx.params);
    const MetricsLog log = rl_train(fx.params, fx.set.train, cfg);
    CHECK(theta_values(fx.params) == theta);
    CHECK_FALSE(phi_values(fx.params) == phi);
    for (const MetricsRow& r : log.rows()) CHECK(r.grad_norm_theta == 0.0);
  }
  SUBCASE("joint=true moves both") {
    Fixture fx;
    const auto theta = theta_values(fx.params);
    rl_train(fx.params, fx.set.train, fx.train_cfg());
    CHECK_FALSE(theta_values(fx.params) == theta);
  }
  SUBCASE("cot=false rollouts have at most two tokens") {
    Fixture fx;
    TrainConfig cfg = fx.train_cfg();
    cfg.cot = false;
    const PolicySnapshot snap(fx.params);
    for (int i = 0; i < 20; ++i) {
      const RolloutRecord rec = rollout(snap, fx.set.train[static_cast<std::size_t>(i)], 3, i, cfg);
      for (const Rationale& r : rec.rationales) CHECK(r.tokens.size() <= 2);
    }
    CHECK_NOTHROW(rl_train(fx.params, fx.set.train, cfg));
  }
}

TEST_CASE("rl_train is deterministic across runs and worker counts") {
  Fixture a, b, c;
  TrainConfig cfg = a.train_cfg();
  cfg.checkpoint_every = 2;
  long checkpoints = 0;
  TrainHooks hooks;
  hooks.checkpoint = [&](long, const PolicyParams&) { ++checkpoints; };
  const MetricsLog la = rl_train(a.params, a.set.train, cfg, hooks);
  const MetricsLog lb = rl_train(b.params, b.set.train, cfg);
  cfg.workers = 3;
  const MetricsLog lc = rl_train(c.params, c.set.train, cfg);
  CHECK(checkpoints == 1);
  CHECK(la.to_csv(false) == lb.to_csv(false));
  CHECK(la.to_csv(false) == lc.to_csv(false));
  CHECK(theta_values(a.params) == theta_values(b.params));
  CHECK(phi_values(a.params) == phi_values(c.params));
  CHECK(theta_values(a.params) == theta_values(c.params));
  CHECK(la.to_csv().rfind("step,stage,mean_reward,ppo_obj,head_obj,grad_norm_theta,grad_norm_phi,wallclock_ms", 0) == 0);
}
