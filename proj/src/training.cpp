#include "plrank/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace plrank {

std::string to_string(Stage s) { return s == Stage::kSft ? "sft" : "rl"; }

Stage parse_stage(const std::string& s) {
  if (s == "sft") return Stage::kSft;
  if (s == "rl") return Stage::kRl;
  throw ConfigError("unknown stage '" + s + "' (expected sft or rl)");
}

std::string to_string(Baseline b) { return b == Baseline::kLoo ? "loo" : "none"; }

Baseline parse_baseline(const std::string& s) {
  if (s == "none") return Baseline::kNone;
  if (s == "loo") return Baseline::kLoo;
  throw ConfigError("unknown baseline '" + s + "' (expected none or loo)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(epsilon > 0.0 && epsilon < 1.0)) fail("epsilon must be in (0, 1)");
  if (rankings_per_instance < 1) fail("rankings_per_instance must be >= 1");
  if (reward_cutoff < 1) fail("reward_cutoff must be >= 1");
  if (inner_epochs < 1) fail("inner_epochs must be >= 1");
  if (L < 1) fail("L must be >= 1");
  if (!(lr_policy > 0.0 && lr_head > 0.0 && lr_sft > 0.0)) fail("learning rates must be positive");
  if (batch_size < 1 || sft_batch_size < 1) fail("batch sizes must be >= 1");
  if (steps_sft < 0 || steps_rl < 0) fail("step counts must be non-negative");
  if (baseline == Baseline::kLoo && rankings_per_instance < 2) {
    fail("baseline loo needs rankings_per_instance >= 2");
  }
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  if (workers < 1) fail("workers must be >= 1");
}

// -- optimizer ----------------------------------------------------------------

void Adam::step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
  PLRANK_EXPECT(params.size() == grads.size(), "Adam: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  PLRANK_EXPECT(m_.size() == params.size(), "Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    PLRANK_EXPECT(grads[i].rows() == params[i]->rows() && grads[i].cols() == params[i]->cols(),
                  "Adam: gradient shape mismatch");
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
    params[i]->array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

double global_norm(const std::vector<Matrix>& grads) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

namespace {

std::vector<Matrix*> theta_ptrs(PolicyParams& p) {
  std::vector<Matrix*> out;
  for (auto& [name, m] : p.named_theta()) out.push_back(m);
  return out;
}

std::vector<Matrix*> phi_ptrs(PolicyParams& p) {
  std::vector<Matrix*> out;
  for (auto& [name, m] : p.named_phi()) out.push_back(m);
  return out;
}

std::vector<Matrix> grads_of(const ad::Gradients& g, const std::vector<ad::Tensor>& ts) {
  std::vector<Matrix> out;
  out.reserve(ts.size());
  for (const ad::Tensor& t : ts) out.push_back(g.of(t));
  return out;
}

bool all_finite(const std::vector<Matrix>& ms) {
  for (const Matrix& m : ms) {
    if (!m.allFinite()) return false;
  }
  return true;
}

}  // namespace

// -- ranking terms ------------------------------------------------------------

ad::Tensor pl_log_prob(const Permutation& perm, const ad::Tensor& scores) {
  PLRANK_EXPECT(scores.cols() == 1, "pl_log_prob expects a K x 1 score column");
  const Eigen::VectorXd s = scores.value().col(0);
  Matrix value(1, 1);
  value(0, 0) = plrank::pl_log_prob(perm, s);
  const int id = scores.node_id();
  const ad::Tensor parents[] = {scores};
  return scores.tape()->record(std::move(value), parents, [perm, s, id](const Matrix& g, ad::Tape::Accumulator& acc) {
    acc.grad(id).col(0) += g(0, 0) * pl_grad_scores(perm, s);
  });
}

double ppo_clip_term(double gamma, double rho, double epsilon) {
  return std::min(gamma * rho, std::clamp(gamma, 1.0 - epsilon, 1.0 + epsilon) * rho);
}

// -- SFT ----------------------------------------------------------------------

namespace {

struct SftForward {
  ad::Tensor loss;
  std::size_t tokens = 0;
};

// Decision-only mode fits the (decision, EOS) tail of each target.
SftForward sft_forward(const BoundParams& bound, std::span<const SftExample* const> batch, GenMode mode) {
  PLRANK_EXPECT(!batch.empty(), "empty SFT batch");
  ad::Tensor total;
  SftForward out;
  std::size_t i = 0;
  while (i < batch.size()) {
    const SftExample& head = *batch[i];
    const std::span<const int> context(head.prefix.data(), static_cast<std::size_t>(head.context_length));
    DecoderCache cache;
    if (!context.empty()) extend(bound, cache, context);
    for (; i < batch.size() && batch[i]->instance_id == head.instance_id &&
           batch[i]->context_length == head.context_length &&
           std::equal(context.begin(), context.end(), batch[i]->prefix.begin());
         ++i) {
      const SftExample& ex = *batch[i];
      const std::span<const int> suffix(ex.prefix.data() + ex.context_length,
                                        ex.prefix.size() - static_cast<std::size_t>(ex.context_length));
      std::span<const int> target(ex.target);
      if (mode == GenMode::kDecisionOnly) {
        PLRANK_EXPECT(target.size() >= 2, "SFT target shorter than decision + EOS");
        target = target.last(2);
      }
      const TeacherForced tf = teacher_force(bound, cache, suffix, target, mode);
      const ad::Tensor ll = ad::sum(tf.log_probs);
      total = total.valid() ? total + ll : ll;
      out.tokens += target.size();
    }
  }
  out.loss = ad::scale(total, -1.0 / static_cast<double>(out.tokens));
  return out;
}

}  // namespace

SftStepResult sft_step(PolicyParams& params, std::span<const SftExample* const> batch, Adam& adam, GenMode mode) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, params, true, false);
  const SftForward fwd = sft_forward(bound, batch, mode);
  const ad::Gradients g = tape.backward(fwd.loss);
  const std::vector<Matrix> grads = grads_of(g, bound.theta());
  SftStepResult r{fwd.loss.item(), global_norm(grads)};
  if (!std::isfinite(r.loss) || !all_finite(grads)) {
    throw NonFiniteLoss("non-finite SFT loss or gradient (loss " + std::to_string(r.loss) + ")");
  }
  adam.step(theta_ptrs(params), grads);
  return r;
}

double sft_loss(const PolicyParams& params, std::span<const SftExample* const> batch, GenMode mode) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, params, false, false);
  return sft_forward(bound, batch, mode).loss.item();
}

// -- rollout ------------------------------------------------------------------

double RolloutRecord::mean_reward() const {
  double s = 0.0;
  for (double r : rewards) s += r;
  return rewards.empty() ? 0.0 : s / static_cast<double>(rewards.size());
}

RolloutRecord rollout(const PolicySnapshot& snapshot, const RankingInstance& instance, std::uint64_t seed,
                      long step, const TrainConfig& cfg) {
  const PolicyParams& params = snapshot.params();
  const Vocab vocab = params.config.vocab();
  PLRANK_EXPECT(instance.size() >= 1, "instance without candidates");
  RolloutRecord rec;
  rec.instance_id = instance.instance_id;
  rec.scores.resize(instance.size());

  const std::vector<int> context = context_tokens(vocab, instance.ctx, cfg.L);
  const ContextEncoder enc(params, context);
  const std::string gen_tag = "rollout/" + std::to_string(step);
  const GenerateOptions opts{cfg.temperature, cfg.mode(), Decoding::kSample};
  for (int k = 0; k < instance.size(); ++k) {
    const CandidateItem& item = instance.candidates[static_cast<std::size_t>(k)];
    RandomStream rng = RandomStream::keyed(seed, gen_tag, instance.instance_id, item.item_id);
    Rationale r = generate(enc.bound(), enc.cache(), candidate_tokens(vocab, item), rng, opts);
    rec.scores(k) = score(params, r);
    rec.rationales.push_back(std::move(r));
  }

  RandomStream rank_rng = RandomStream::keyed(seed, "ranking/" + std::to_string(step), instance.instance_id);
  for (int j = 0; j < cfg.rankings_per_instance; ++j) {
    Permutation tau = pl_sample(rec.scores, rank_rng);
    rec.rewards.push_back(ndcg(tau, instance.relevance, cfg.reward_cutoff).value);
    rec.rankings.push_back(std::move(tau));
  }
  return rec;
}

std::vector<double> reinforce_weights(const std::vector<double>& rewards, Baseline baseline) {
  const std::size_t m = rewards.size();
  PLRANK_EXPECT(m >= 1, "no sampled rankings");
  if (baseline == Baseline::kLoo && m < 2) throw ConfigError("baseline loo needs at least two sampled rankings");
  double total = 0.0;
  for (double r : rewards) total += r;
  std::vector<double> w(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double b = baseline == Baseline::kLoo ? (total - rewards[j]) / static_cast<double>(m - 1) : 0.0;
    w[j] = (rewards[j] - b) / static_cast<double>(m);
  }
  return w;
}

ad::Tensor head_objective(const RolloutRecord& record, const ad::Tensor& scores, Baseline baseline) {
  const std::vector<double> w = reinforce_weights(record.rewards, baseline);
  ad::Tensor total;
  for (std::size_t j = 0; j < w.size(); ++j) {
    const ad::Tensor term = ad::scale(pl_log_prob(record.rankings[j], scores), w[j]);
    total = total.valid() ? total + term : term;
  }
  return total;
}

double head_objective(const RolloutRecord& record, const ScoreVector& scores, Baseline baseline,
                      Eigen::VectorXd* grad) {
  const std::vector<double> w = reinforce_weights(record.rewards, baseline);
  double total = 0.0;
  if (grad != nullptr) *grad = Eigen::VectorXd::Zero(scores.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    total += w[j] * plrank::pl_log_prob(record.rankings[j], scores);
    if (grad != nullptr) *grad += w[j] * pl_grad_scores(record.rankings[j], scores);
  }
  return total;
}

namespace {

std::size_t total_tokens(const RolloutRecord& record) {
  std::size_t n = 0;
  for (const Rationale& r : record.rationales) n += r.tokens.size();
  return n;
}

void check_log_prob_shapes(const RolloutRecord& record, std::span<const ad::Tensor> new_log_probs) {
  PLRANK_EXPECT(new_log_probs.size() == record.rationales.size(), "one log-prob column per rationale expected");
  for (std::size_t k = 0; k < new_log_probs.size(); ++k) {
    PLRANK_EXPECT(new_log_probs[k].rows() == static_cast<Eigen::Index>(record.rationales[k].tokens.size()) &&
                      new_log_probs[k].cols() == 1,
                  "log-prob column length differs from the rationale length");
  }
}

ad::Tensor ratio(const Rationale& r, const ad::Tensor& new_lp) {
  Matrix old(static_cast<Eigen::Index>(r.token_logprobs.size()), 1);
  for (std::size_t t = 0; t < r.token_logprobs.size(); ++t) old(static_cast<Eigen::Index>(t), 0) = r.token_logprobs[t];
  return ad::exp(new_lp - new_lp.tape()->constant(std::move(old)));
}

}  // namespace

ad::Tensor ppo_objective(const RolloutRecord& record, std::span<const ad::Tensor> new_log_probs, double epsilon) {
  check_log_prob_shapes(record, new_log_probs);
  const double rho = record.mean_reward();
  ad::Tensor total;
  for (std::size_t k = 0; k < new_log_probs.size(); ++k) {
    const ad::Tensor gamma = ratio(record.rationales[k], new_log_probs[k]);
    const ad::Tensor clipped = ad::minimum(ad::scale(gamma, rho), ad::scale(ad::clamp(gamma, 1.0 - epsilon, 1.0 + epsilon), rho));
    const ad::Tensor term = ad::sum(clipped);
    total = total.valid() ? total + term : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(total_tokens(record)));
}

double ppo_unclipped(const RolloutRecord& record, std::span<const ad::Tensor> new_log_probs) {
  check_log_prob_shapes(record, new_log_probs);
  // ppo_objective without the clip, op for op.
  const double rho = record.mean_reward();
  ad::Tensor total;
  for (std::size_t k = 0; k < new_log_probs.size(); ++k) {
    const ad::Tensor term = ad::sum(ad::scale(ratio(record.rationales[k], new_log_probs[k]), rho));
    total = total.valid() ? total + term : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(total_tokens(record))).item();
}

// -- metrics ------------------------------------------------------------------

std::string MetricsLog::to_csv(bool include_wallclock) const {
  std::ostringstream os;
  os << "step,stage,mean_reward,ppo_obj,head_obj,grad_norm_theta,grad_norm_phi,wallclock_ms,sft_loss\n";
  char buf[512];
  for (const MetricsRow& r : rows_) {
    std::snprintf(buf, sizeof buf, "%ld,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f,%.17g\n", r.step, to_string(r.stage).c_str(),
                  r.mean_reward, r.ppo_obj, r.head_obj, r.grad_norm_theta, r.grad_norm_phi,
                  include_wallclock ? r.wallclock_ms : 0.0, r.sft_loss);
    os << buf;
  }
  return os.str();
}

void MetricsLog::write(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << to_csv();
  if (!os) throw IoError("failed writing " + path);
}

// -- loops --------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Cycles through a shuffled index order, reshuffling with a keyed stream per pass.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed, std::string tag) : n_(n), seed_(seed), tag_(std::move(tag)) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      RandomStream rng = RandomStream::keyed(seed_, tag_, std::to_string(epoch_++));
      rng.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::string tag_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  long epoch_ = 0;
};

void dump_record(const RolloutRecord& rec, const std::string& path) {
  if (path.empty()) return;
  nlohmann::json j;
  j["instance_id"] = rec.instance_id;
  j["scores"] = std::vector<double>(rec.scores.data(), rec.scores.data() + rec.scores.size());
  j["rewards"] = rec.rewards;
  for (const Permutation& p : rec.rankings) j["rankings"].push_back(p.order());
  for (const Rationale& r : rec.rationales) {
    j["rationales"].push_back({{"tokens", r.tokens}, {"token_logprobs", r.token_logprobs}, {"truncated", r.truncated}});
  }
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(1) << '\n';
}

}  // namespace

MetricsLog sft_train(PolicyParams& params, const SftCorpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  MetricsLog log;
  if (cfg.steps_sft == 0) return log;
  PLRANK_EXPECT(!corpus.examples.empty(), "SFT corpus is empty");
  std::vector<std::vector<const SftExample*>> groups;
  for (const SftExample& ex : corpus.examples) {
    if (groups.empty() || groups.back().front()->instance_id != ex.instance_id) groups.emplace_back();
    groups.back().push_back(&ex);
  }
  EpochSampler sampler(groups.size(), cfg.seed, "sft_order");
  Adam adam(cfg.lr_sft);
  const auto start = Clock::now();
  for (long step = 1; step <= cfg.steps_sft; ++step) {
    std::vector<const SftExample*> batch;
    for (int b = 0; b < cfg.sft_batch_size; ++b) {
      const auto& g = groups[sampler.next()];
      batch.insert(batch.end(), g.begin(), g.end());
    }
    const SftStepResult r = sft_step(params, batch, adam, cfg.mode());
    MetricsRow row;
    row.step = step;
    row.stage = Stage::kSft;
    row.grad_norm_theta = r.grad_norm;
    row.sft_loss = r.loss;
    row.wallclock_ms = elapsed_ms(start);
    log.add(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) hooks.checkpoint(step, params);
  }
  return log;
}

MetricsLog rl_train(PolicyParams& params, const std::vector<RankingInstance>& instances, const TrainConfig& cfg,
                    const TrainHooks& hooks) {
  cfg.validate();
  std::vector<const RankingInstance*> usable;
  for (const RankingInstance& inst : instances) {
    if (inst.positive_index() >= 0) usable.push_back(&inst);
  }
  MetricsLog log;
  if (cfg.steps_rl == 0) return log;
  PLRANK_EXPECT(!usable.empty(), "no training instance has a positive");
  const Vocab vocab = params.config.vocab();
  EpochSampler sampler(usable.size(), cfg.seed, "rl_order");
  Adam theta_opt(cfg.lr_policy);
  Adam phi_opt(cfg.lr_head);
  const auto start = Clock::now();

  for (long step = 1; step <= cfg.steps_rl; ++step) {
    std::vector<const RankingInstance*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(usable[sampler.next()]);

    const PolicySnapshot snapshot(params);
    std::vector<RolloutRecord> records(batch.size());
    parallel_for(static_cast<int>(batch.size()), cfg.workers, [&](int b) {
      records[static_cast<std::size_t>(b)] = rollout(snapshot, *batch[static_cast<std::size_t>(b)], cfg.seed, step, cfg);
    });

    MetricsRow row;
    row.step = step;
    row.stage = Stage::kRl;
    for (const RolloutRecord& r : records) row.mean_reward += r.mean_reward() / static_cast<double>(records.size());

    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
      ad::Tape tape;
      const BoundParams bound = bind(tape, params, cfg.joint, true);
      ad::Tensor ppo_total, head_total;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const RankingInstance& inst = *batch[b];
        const RolloutRecord& rec = records[b];
        std::vector<ad::Tensor> scores;
        if (cfg.joint) {
          DecoderCache cache;
          extend(bound, cache, context_tokens(vocab, inst.ctx, cfg.L));
          std::vector<ad::Tensor> log_probs;
          for (int k = 0; k < inst.size(); ++k) {
            const std::vector<int> suffix = candidate_tokens(vocab, inst.candidates[static_cast<std::size_t>(k)]);
            const TeacherForced tf = teacher_force(bound, cache, suffix, rec.rationales[static_cast<std::size_t>(k)].tokens,
                                                   cfg.mode(), cfg.temperature);
            log_probs.push_back(tf.log_probs);
            scores.push_back(score(bound, cfg.head_grad_to_theta ? tf.final_hidden : ad::detach(tf.final_hidden)));
          }
          const ad::Tensor ppo = ppo_objective(rec, log_probs, cfg.epsilon);
          ppo_total = ppo_total.valid() ? ppo_total + ppo : ppo;
        } else {
          for (const Rationale& r : rec.rationales) {
            scores.push_back(score(bound, tape.constant(r.final_hidden.transpose())));
          }
        }
        const ad::Tensor head = head_objective(rec, ad::concat(scores, 0), cfg.baseline);
        head_total = head_total.valid() ? head_total + head : head;
      }
      const double inv_batch = 1.0 / static_cast<double>(batch.size());
      ad::Tensor objective = ad::scale(head_total, inv_batch);
      if (ppo_total.valid()) objective = objective + ad::scale(ppo_total, inv_batch);
      const ad::Gradients g = tape.backward(ad::neg(objective));

      const std::vector<Matrix> g_phi = grads_of(g, bound.phi());
      std::vector<Matrix> g_theta;
      if (cfg.joint) g_theta = grads_of(g, bound.theta());
      const double head_value = head_total.item() * inv_batch;
      const double ppo_value = ppo_total.valid() ? ppo_total.item() * inv_batch : 0.0;
      if (!std::isfinite(head_value) || !std::isfinite(ppo_value) || !all_finite(g_phi) || !all_finite(g_theta)) {
        std::size_t worst = 0;
        for (std::size_t b = 0; b < records.size(); ++b) {
          if (!records[b].scores.allFinite()) worst = b;
        }
        dump_record(records[worst], hooks.diagnostic_path);
        throw NonFiniteLoss("non-finite objective at RL step " + std::to_string(step) + " (instance " +
                            records[worst].instance_id + ")" +
                            (hooks.diagnostic_path.empty() ? "" : "; record dumped to " + hooks.diagnostic_path));
      }
      const double inv_epochs = 1.0 / cfg.inner_epochs;
      row.head_obj += head_value * inv_epochs;
      row.ppo_obj += ppo_value * inv_epochs;
      row.grad_norm_phi += global_norm(g_phi) * inv_epochs;
      if (cfg.joint) {
        row.grad_norm_theta += global_norm(g_theta) * inv_epochs;
        theta_opt.step(theta_ptrs(params), g_theta);
      }
      phi_opt.step(phi_ptrs(params), g_phi);
    }
    row.wallclock_ms = elapsed_ms(start);
    log.add(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) hooks.checkpoint(step, params);
  }
  return log;
}

}  // namespace plrank
