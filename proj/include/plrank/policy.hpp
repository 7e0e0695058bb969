#pragma once

// Toy rationale policy and scoring head: a small causal decoder that reads a
// serialized (user context, candidate) pair, generates a structured rationale
// token by token, and maps the last hidden state to a scalar score.

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "plrank/autodiff.hpp"
#include "plrank/instance.hpp"
#include "plrank/random.hpp"

namespace plrank {

/// Token inventory: structural tokens, two decision tokens, and one attribute
/// token per (dimension, bucket).
class Vocab {
 public:
  enum Special : int {
    kBos = 0,
    kEos,
    kSep,
    kSecReason,
    kSecSelfcheck,
    kSecConclude,
    kRecommend,
    kNotRecommend,
    kNumSpecial
  };

  Vocab(int dims, int buckets);

  int size() const { return kNumSpecial + dims_ * buckets_; }
  int dims() const { return dims_; }
  int buckets() const { return buckets_; }

  int attr(int dim, int bucket) const;
  bool is_attr(int token) const { return token >= kNumSpecial && token < size(); }
  int attr_dim(int token) const { return (token - kNumSpecial) / buckets_; }
  int attr_bucket(int token) const { return (token - kNumSpecial) % buckets_; }
  static bool is_decision(int token) { return token == kRecommend || token == kNotRecommend; }

  std::string name(int token) const;

 private:
  int dims_;
  int buckets_;
};

struct ModelConfig {
  int dims = 8;
  int buckets = 4;
  int layers = 2;
  int d_model = 32;
  int heads = 2;
  int ffn = 64;
  int max_len = 256;
  int max_gen = 24;
  int head_hidden = 32;
  double init_std = 0.02;

  Vocab vocab() const { return Vocab(dims, buckets); }
  /// Stable hash of every architectural field.
  std::uint64_t hash() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

using ad::Matrix;

struct LayerParams {
  std::vector<Matrix> wq, wk, wv, wo;  // one per head; wo maps head -> model
  Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// theta (decoder) and phi (scoring head); the two sets are disjoint.
struct PolicyParams {
  ModelConfig config;
  Matrix token_embedding;     // |V| x d
  Matrix position_embedding;  // max_len x d
  std::vector<LayerParams> layers;
  Matrix output;              // d x |V|
  Matrix head_w1, head_b1;    // d x h, 1 x h
  Matrix head_w2, head_b2;    // h x 1, 1 x 1

  /// N(0, init_std) weights, zero biases.
  static PolicyParams init(const ModelConfig& config, RandomStream& rng);

  std::vector<std::pair<std::string, Matrix*>> named_theta();
  std::vector<std::pair<std::string, Matrix*>> named_phi();
  std::vector<std::pair<std::string, Matrix*>> named_all();
  std::vector<std::pair<std::string, const Matrix*>> named_all() const;

  bool operator==(const PolicyParams& other) const;
};

/// Frozen copy of the parameters taken before a rollout (theta_old).
class PolicySnapshot {
 public:
  explicit PolicySnapshot(const PolicyParams& live) : params_(live) {}
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

enum class GenMode { kCot, kDecisionOnly };
enum class Decoding { kSample, kArgmax };

struct Rationale {
  std::vector<int> tokens;
  std::vector<double> token_logprobs;
  Eigen::VectorXd final_hidden;
  bool truncated = false;

  /// Exactly one decision token and EOS last.
  bool well_formed() const;
  /// The decision token if well formed, else -1.
  int decision() const;
};

// -- serialization ------------------------------------------------------------

/// [profile] (SEP [history item])* SEP: everything that does not depend on the
/// candidate.
std::vector<int> context_tokens(const Vocab& vocab, const UserContext& ctx, int max_history);
/// [candidate attributes] BOS.
std::vector<int> candidate_tokens(const Vocab& vocab, const CandidateItem& item);
/// context_tokens followed by candidate_tokens.
std::vector<int> serialize_context(const Vocab& vocab, const UserContext& ctx, const CandidateItem& item,
                                   int max_history);

// -- differentiable forward ---------------------------------------------------

/// The parameters as tensors on one tape.
struct BoundParams {
  ModelConfig config;
  ad::Tensor token_embedding, position_embedding, output;
  struct Layer {
    std::vector<ad::Tensor> wq, wk, wv, wo;
    ad::Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  std::vector<Layer> layers;
  ad::Tensor head_w1, head_b1, head_w2, head_b2;

  /// Tensors in PolicyParams::named_theta / named_phi order.
  std::vector<ad::Tensor> theta() const;
  std::vector<ad::Tensor> phi() const;
};

BoundParams bind(ad::Tape& tape, const PolicyParams& params, bool grad_theta, bool grad_phi);
/// Wraps tensors given in PolicyParams::named_all order.
BoundParams bind_tensors(const ModelConfig& config, std::span<const ad::Tensor> tensors);

/// Keys and values of every position processed so far, per layer and head,
/// stored as row blocks. Copying a cache is cheap (tensor handles only), which
/// lets many candidates branch off one encoded context.
struct DecoderCache {
  std::vector<std::vector<std::vector<ad::Tensor>>> keys, values;  // [layer][head][block]
  int length = 0;
};

/// Runs tokens at positions cache.length.. and appends their keys/values.
/// Returns the last-layer hidden states of the new rows (n x d).
ad::Tensor extend(const BoundParams& bound, DecoderCache& cache, std::span<const int> tokens);

/// Per-row log-probabilities of the next token. In decision-only mode the
/// support is {RECOMMEND, NOT_RECOMMEND, EOS} (columns in that order).
ad::Tensor next_token_log_probs(const BoundParams& bound, const ad::Tensor& hidden, GenMode mode,
                                double temperature = 1.0);

/// Maps a vocabulary token to its column in next_token_log_probs.
int support_column(int token, GenMode mode);
int support_token(int column, GenMode mode);

/// f_phi: tanh MLP over one hidden row (1 x d) -> 1 x 1.
ad::Tensor score(const BoundParams& bound, const ad::Tensor& final_hidden);

struct TeacherForced {
  ad::Tensor log_probs;     // T x 1
  ad::Tensor final_hidden;  // 1 x d
};

/// Teacher-forced pass over candidate_suffix followed by generated, branching
/// off an encoded context.
TeacherForced teacher_force(const BoundParams& bound, const DecoderCache& context,
                            std::span<const int> candidate_suffix, std::span<const int> generated, GenMode mode,
                            double temperature = 1.0);

// -- generation and scoring ---------------------------------------------------

struct GenerateOptions {
  double temperature = 1.0;
  GenMode mode = GenMode::kCot;
  Decoding decoding = Decoding::kSample;
};

/// Autoregressive generation branching off an encoded context.
Rationale generate(const BoundParams& bound, const DecoderCache& context, std::span<const int> candidate_suffix,
                   RandomStream& rng, const GenerateOptions& options);

/// Self-contained generation from a full prefix.
Rationale generate(const PolicyParams& params, std::span<const int> prefix, RandomStream& rng,
                   const GenerateOptions& options);

/// Scalar f_phi(final_hidden) without recording gradients.
double score(const PolicyParams& params, const Rationale& r);

/// log pi(tokens[t] | prefix, tokens[<t]) for every t.
std::vector<double> token_log_probs(const PolicyParams& params, std::span<const int> prefix,
                                    std::span<const int> tokens, GenMode mode = GenMode::kCot,
                                    double temperature = 1.0);

/// Encodes a context once for many candidates; owns its tape.
class ContextEncoder {
 public:
  ContextEncoder(const PolicyParams& params, std::span<const int> context);
  const BoundParams& bound() const { return bound_; }
  const DecoderCache& cache() const { return cache_; }

 private:
  ad::Tape tape_;
  BoundParams bound_;
  DecoderCache cache_;
};

// -- checkpoints --------------------------------------------------------------

/// Binary layout (little-endian): magic "PLRK", u32 version, u64 config hash,
/// u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
/// u64 dims[rank], row-major f64 data.
void save_checkpoint(const PolicyParams& params, const std::string& path);
PolicyParams load_checkpoint(const ModelConfig& config, const std::string& path);

}  // namespace plrank
