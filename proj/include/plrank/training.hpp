#pragma once

// Two-stage optimization: supervised warm start on teacher rationales, then
// reinforcement learning where a Plackett-Luce ranking sampled from the head's
// scores is rewarded with NDCG. The head (phi) follows REINFORCE on the
// ranking's log-probability; the decoder (theta) follows a clipped PPO
// objective with the ranking reward applied to every token.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "plrank/autodiff.hpp"
#include "plrank/core_rank.hpp"
#include "plrank/instance.hpp"
#include "plrank/parallel.hpp"
#include "plrank/policy.hpp"
#include "plrank/synth_world.hpp"

namespace plrank {

enum class Stage { kSft, kRl };
enum class Baseline { kNone, kLoo };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);
std::string to_string(Baseline b);
Baseline parse_baseline(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kRl;
  int L = 20;  // history cap used when serializing contexts
  int reward_cutoff = 10;
  double epsilon = 0.2;
  int inner_epochs = 2;
  int rankings_per_instance = 1;  // M
  double lr_policy = 3e-4;
  double lr_head = 1e-3;
  double lr_sft = 3e-3;
  int batch_size = 4;      // instances per RL step
  int sft_batch_size = 16;  // instances (all their kept examples) per SFT step
  int steps_sft = 2000;
  int steps_rl = 3000;
  Baseline baseline = Baseline::kNone;
  bool joint = true;
  bool cot = true;
  bool sft_init = true;
  bool head_grad_to_theta = true;  // with joint: let the head objective reach theta through the score
  double temperature = 1.0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  int workers = 1;
  std::uint64_t seed = 1;

  void validate() const;
  GenMode mode() const { return cot ? GenMode::kCot : GenMode::kDecisionOnly; }
  bool operator==(const TrainConfig&) const = default;
};

// -- optimizer ----------------------------------------------------------------

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Descent step: params -= lr * m_hat / (sqrt(v_hat) + eps).
  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

double global_norm(const std::vector<Matrix>& grads);

// -- differentiable ranking terms ---------------------------------------------

/// log P(perm | s) on the tape; s is K x 1.
ad::Tensor pl_log_prob(const Permutation& perm, const ad::Tensor& scores);

/// min(gamma * rho, clip(gamma, 1 - eps, 1 + eps) * rho) for one token.
double ppo_clip_term(double gamma, double rho, double epsilon);

// -- SFT ----------------------------------------------------------------------

struct SftStepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Teacher-forced mean per-token NLL of the batch's targets, then one Adam step
/// on theta. Consecutive examples of one instance share a single context encoding.
/// In decision-only mode only the (decision, EOS) tail of each target is fitted.
SftStepResult sft_step(PolicyParams& params, std::span<const SftExample* const> batch, Adam& adam,
                       GenMode mode = GenMode::kCot);

/// Per-token NLL without updating anything.
double sft_loss(const PolicyParams& params, std::span<const SftExample* const> batch,
                GenMode mode = GenMode::kCot);

// -- RL -----------------------------------------------------------------------

struct RolloutRecord {
  std::string instance_id;
  std::vector<Rationale> rationales;  // per candidate, in candidate order
  ScoreVector scores;
  std::vector<Permutation> rankings;  // M samples
  std::vector<double> rewards;

  double mean_reward() const;
};

/// Generates one rationale per candidate with substreams keyed by
/// (step, instance_id, item_id), scores them, samples M rankings from the
/// Plackett-Luce model over the scores and rewards each with NDCG@cutoff.
RolloutRecord rollout(const PolicySnapshot& snapshot, const RankingInstance& instance, std::uint64_t seed,
                      long step, const TrainConfig& cfg);

/// Baseline-adjusted REINFORCE weights (rho_j - b_j) / M for each ranking.
std::vector<double> reinforce_weights(const std::vector<double>& rewards, Baseline baseline);

/// (1/M) sum_j (rho_j - b_j) log P(tau_j | s) with s on the tape.
ad::Tensor head_objective(const RolloutRecord& record, const ad::Tensor& scores, Baseline baseline);
/// Same value with its gradient w.r.t. s, off the tape.
double head_objective(const RolloutRecord& record, const ScoreVector& scores, Baseline baseline,
                      Eigen::VectorXd* grad = nullptr);

/// Token-level clipped objective: the record's mean reward weights every
/// token; the sum runs over all tokens of all rationales and is divided by
/// the total token count. new_log_probs[k] is T_k x 1.
ad::Tensor ppo_objective(const RolloutRecord& record, std::span<const ad::Tensor> new_log_probs, double epsilon);

/// Unclipped sum of gamma * rho / T, for the clip monotonicity check.
double ppo_unclipped(const RolloutRecord& record, std::span<const ad::Tensor> new_log_probs);

struct MetricsRow {
  long step = 0;
  Stage stage = Stage::kRl;
  double mean_reward = 0.0;
  double ppo_obj = 0.0;
  double head_obj = 0.0;
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;
  double wallclock_ms = 0.0;
  double sft_loss = 0.0;  // per-token NLL; SFT rows only
};

class MetricsLog {
 public:
  void add(const MetricsRow& row) { rows_.push_back(row); }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  /// step,stage,mean_reward,ppo_obj,head_obj,grad_norm_theta,grad_norm_phi,wallclock_ms,sft_loss
  /// Without wallclock the column is written as 0 so logs compare byte for byte.
  std::string to_csv(bool include_wallclock = true) const;
  void write(const std::string& path) const;

 private:
  std::vector<MetricsRow> rows_;
};

struct TrainHooks {
  /// Called every cfg.checkpoint_every steps and never for step 0.
  std::function<void(long step, const PolicyParams&)> checkpoint;
  /// Where the offending record is written when a loss turns non-finite.
  std::string diagnostic_path;
  /// Progress callback after every step.
  std::function<void(const MetricsRow&)> on_step;
};

/// Supervised warm start over a corpus; theta only.
MetricsLog sft_train(PolicyParams& params, const SftCorpus& corpus, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

/// Reinforcement learning over train instances. With joint=false theta is
/// left untouched and only the head learns.
MetricsLog rl_train(PolicyParams& params, const std::vector<RankingInstance>& instances, const TrainConfig& cfg,
                    const TrainHooks& hooks = {});

}  // namespace plrank
