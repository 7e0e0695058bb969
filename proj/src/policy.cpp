#include "plrank/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace plrank {

int RankingInstance::positive_index() const {
  for (std::size_t i = 0; i < relevance.size(); ++i) {
    if (relevance[i] > 0) return static_cast<int>(i);
  }
  return -1;
}

// -- vocabulary ---------------------------------------------------------------

Vocab::Vocab(int dims, int buckets) : dims_(dims), buckets_(buckets) {
  PLRANK_EXPECT(dims >= 1, "vocab needs at least one attribute dimension");
  PLRANK_EXPECT(buckets >= 2, "vocab needs at least two buckets");
}

int Vocab::attr(int dim, int bucket) const {
  PLRANK_EXPECT(dim >= 0 && dim < dims_, "attribute dimension " + std::to_string(dim) + " out of range");
  PLRANK_EXPECT(bucket >= 0 && bucket < buckets_,
                "unknown attribute bucket " + std::to_string(bucket) + " in dimension " + std::to_string(dim));
  return kNumSpecial + dim * buckets_ + bucket;
}

std::string Vocab::name(int token) const {
  static const char* kNames[] = {"BOS", "EOS", "SEP", "SEC_REASON", "SEC_SELFCHECK", "SEC_CONCLUDE", "RECOMMEND",
                                 "NOT_RECOMMEND"};
  if (token >= 0 && token < kNumSpecial) return kNames[token];
  if (is_attr(token)) return "ATTR(" + std::to_string(attr_dim(token)) + "," + std::to_string(attr_bucket(token)) + ")";
  return "<" + std::to_string(token) + ">";
}

// -- config / params ----------------------------------------------------------

std::uint64_t ModelConfig::hash() const {
  std::ostringstream os;
  os << "dims=" << dims << ";buckets=" << buckets << ";layers=" << layers << ";d_model=" << d_model
     << ";heads=" << heads << ";ffn=" << ffn << ";max_len=" << max_len << ";max_gen=" << max_gen
     << ";head_hidden=" << head_hidden;
  return mix64(hash_string(os.str()));
}

void ModelConfig::validate() const {
  PLRANK_EXPECT(dims >= 1 && buckets >= 2, "model vocab sizes invalid");
  PLRANK_EXPECT(layers >= 1 && d_model >= 1 && heads >= 1 && ffn >= 1 && head_hidden >= 1,
                "model sizes must be positive");
  PLRANK_EXPECT(d_model % heads == 0, "d_model must be divisible by heads");
  PLRANK_EXPECT(max_gen >= 2 && max_len > max_gen, "max_len must exceed max_gen >= 2");
  PLRANK_EXPECT(init_std > 0.0, "init_std must be positive");
}

namespace {

Matrix normal_matrix(RandomStream& rng, Eigen::Index r, Eigen::Index c, double sd) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

}  // namespace

PolicyParams PolicyParams::init(const ModelConfig& config, RandomStream& rng) {
  config.validate();
  const int v = config.vocab().size();
  const int d = config.d_model;
  const int dh = d / config.heads;
  const double sd = config.init_std;
  PolicyParams p;
  p.config = config;
  p.token_embedding = normal_matrix(rng, v, d, sd);
  p.position_embedding = normal_matrix(rng, config.max_len, d, sd);
  for (int l = 0; l < config.layers; ++l) {
    LayerParams layer;
    for (int h = 0; h < config.heads; ++h) {
      layer.wq.push_back(normal_matrix(rng, d, dh, sd));
      layer.wk.push_back(normal_matrix(rng, d, dh, sd));
      layer.wv.push_back(normal_matrix(rng, d, dh, sd));
      layer.wo.push_back(normal_matrix(rng, dh, d, sd));
    }
    layer.ffn_w1 = normal_matrix(rng, d, config.ffn, sd);
    layer.ffn_b1 = Matrix::Zero(1, config.ffn);
    layer.ffn_w2 = normal_matrix(rng, config.ffn, d, sd);
    layer.ffn_b2 = Matrix::Zero(1, d);
    p.layers.push_back(std::move(layer));
  }
  p.output = normal_matrix(rng, d, v, sd);
  p.head_w1 = normal_matrix(rng, d, config.head_hidden, sd);
  p.head_b1 = Matrix::Zero(1, config.head_hidden);
  p.head_w2 = normal_matrix(rng, config.head_hidden, 1, sd);
  p.head_b2 = Matrix::Zero(1, 1);
  return p;
}

std::vector<std::pair<std::string, Matrix*>> PolicyParams::named_theta() {
  std::vector<std::pair<std::string, Matrix*>> out{{"tok_emb", &token_embedding}, {"pos_emb", &position_embedding}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    LayerParams& layer = layers[l];
    for (std::size_t h = 0; h < layer.wq.size(); ++h) {
      const std::string hs = "." + std::to_string(h);
      out.emplace_back(base + "attn.wq" + hs, &layer.wq[h]);
      out.emplace_back(base + "attn.wk" + hs, &layer.wk[h]);
      out.emplace_back(base + "attn.wv" + hs, &layer.wv[h]);
      out.emplace_back(base + "attn.wo" + hs, &layer.wo[h]);
    }
    out.emplace_back(base + "ffn.w1", &layer.ffn_w1);
    out.emplace_back(base + "ffn.b1", &layer.ffn_b1);
    out.emplace_back(base + "ffn.w2", &layer.ffn_w2);
    out.emplace_back(base + "ffn.b2", &layer.ffn_b2);
  }
  out.emplace_back("output", &output);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> PolicyParams::named_phi() {
  return {{"head.w1", &head_w1}, {"head.b1", &head_b1}, {"head.w2", &head_w2}, {"head.b2", &head_b2}};
}

std::vector<std::pair<std::string, Matrix*>> PolicyParams::named_all() {
  auto out = named_theta();
  for (auto& entry : named_phi()) out.push_back(entry);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> PolicyParams::named_all() const {
  auto mutable_view = const_cast<PolicyParams*>(this)->named_all();
  return {mutable_view.begin(), mutable_view.end()};
}

bool PolicyParams::operator==(const PolicyParams& other) const {
  if (!(config == other.config)) return false;
  const auto a = named_all();
  const auto b = other.named_all();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second->rows() != b[i].second->rows() ||
        a[i].second->cols() != b[i].second->cols() || *a[i].second != *b[i].second) {
      return false;
    }
  }
  return true;
}

// -- rationale ----------------------------------------------------------------

bool Rationale::well_formed() const {
  if (tokens.empty() || tokens.back() != Vocab::kEos) return false;
  return std::count_if(tokens.begin(), tokens.end(), Vocab::is_decision) == 1;
}

int Rationale::decision() const {
  if (!well_formed()) return -1;
  return *std::find_if(tokens.begin(), tokens.end(), Vocab::is_decision);
}

// -- serialization ------------------------------------------------------------

namespace {

void append_attrs(const Vocab& vocab, const std::vector<int>& buckets, std::vector<int>& out) {
  for (std::size_t d = 0; d < buckets.size(); ++d) out.push_back(vocab.attr(static_cast<int>(d), buckets[d]));
}

}  // namespace

std::vector<int> context_tokens(const Vocab& vocab, const UserContext& ctx, int max_history) {
  PLRANK_EXPECT(static_cast<int>(ctx.history.size()) <= max_history,
                "history length " + std::to_string(ctx.history.size()) + " exceeds L_max " +
                    std::to_string(max_history));
  std::vector<int> out;
  out.reserve(ctx.profile_tokens.size() + ctx.history.size() * (static_cast<std::size_t>(vocab.dims()) + 1) + 1);
  append_attrs(vocab, ctx.profile_tokens, out);
  for (const HistoryEvent& event : ctx.history) {
    out.push_back(Vocab::kSep);
    append_attrs(vocab, event.tokens, out);
  }
  out.push_back(Vocab::kSep);
  return out;
}

std::vector<int> candidate_tokens(const Vocab& vocab, const CandidateItem& item) {
  std::vector<int> out;
  out.reserve(item.tokens.size() + 1);
  append_attrs(vocab, item.tokens, out);
  out.push_back(Vocab::kBos);
  return out;
}

std::vector<int> serialize_context(const Vocab& vocab, const UserContext& ctx, const CandidateItem& item,
                                   int max_history) {
  std::vector<int> out = context_tokens(vocab, ctx, max_history);
  const std::vector<int> cand = candidate_tokens(vocab, item);
  out.insert(out.end(), cand.begin(), cand.end());
  return out;
}

// -- forward ------------------------------------------------------------------

BoundParams bind(ad::Tape& tape, const PolicyParams& params, bool grad_theta, bool grad_phi) {
  std::vector<ad::Tensor> tensors;
  for (const auto& [name, m] : params.named_all()) {
    const bool is_phi = name.starts_with("head.");
    tensors.push_back((is_phi ? grad_phi : grad_theta) ? tape.parameter(*m) : tape.constant(*m));
  }
  return bind_tensors(params.config, tensors);
}

BoundParams bind_tensors(const ModelConfig& config, std::span<const ad::Tensor> tensors) {
  const std::size_t expected = 3 + static_cast<std::size_t>(config.layers) * (4 * config.heads + 4) + 4;
  PLRANK_EXPECT(tensors.size() == expected, "bind got " + std::to_string(tensors.size()) + " tensors, expected " +
                                                std::to_string(expected));
  std::size_t i = 0;
  auto next = [&] { return tensors[i++]; };
  BoundParams b;
  b.config = config;
  b.token_embedding = next();
  b.position_embedding = next();
  for (int l = 0; l < config.layers; ++l) {
    BoundParams::Layer bl;
    for (int h = 0; h < config.heads; ++h) {
      bl.wq.push_back(next());
      bl.wk.push_back(next());
      bl.wv.push_back(next());
      bl.wo.push_back(next());
    }
    bl.ffn_w1 = next();
    bl.ffn_b1 = next();
    bl.ffn_w2 = next();
    bl.ffn_b2 = next();
    b.layers.push_back(std::move(bl));
  }
  b.output = next();
  b.head_w1 = next();
  b.head_b1 = next();
  b.head_w2 = next();
  b.head_b2 = next();
  return b;
}

std::vector<ad::Tensor> BoundParams::theta() const {
  std::vector<ad::Tensor> out{token_embedding, position_embedding};
  for (const Layer& layer : layers) {
    for (std::size_t h = 0; h < layer.wq.size(); ++h) {
      out.push_back(layer.wq[h]);
      out.push_back(layer.wk[h]);
      out.push_back(layer.wv[h]);
      out.push_back(layer.wo[h]);
    }
    out.push_back(layer.ffn_w1);
    out.push_back(layer.ffn_b1);
    out.push_back(layer.ffn_w2);
    out.push_back(layer.ffn_b2);
  }
  out.push_back(output);
  return out;
}

std::vector<ad::Tensor> BoundParams::phi() const { return {head_w1, head_b1, head_w2, head_b2}; }

ad::Tensor extend(const BoundParams& bound, DecoderCache& cache, std::span<const int> tokens) {
  const ModelConfig& cfg = bound.config;
  PLRANK_EXPECT(!tokens.empty(), "extend with no tokens");
  const int n = static_cast<int>(tokens.size());
  PLRANK_EXPECT(cache.length + n <= cfg.max_len,
                "sequence length " + std::to_string(cache.length + n) + " exceeds max_len " +
                    std::to_string(cfg.max_len));
  const int vocab_size = cfg.vocab().size();
  for (int t : tokens) {
    PLRANK_EXPECT(t >= 0 && t < vocab_size, "token id " + std::to_string(t) + " out of vocab");
  }
  if (cache.keys.empty()) {
    cache.keys.assign(static_cast<std::size_t>(cfg.layers), std::vector<std::vector<ad::Tensor>>(static_cast<std::size_t>(cfg.heads)));
    cache.values = cache.keys;
  }
  std::vector<int> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), cache.length);

  ad::Tensor x = index_select(bound.token_embedding, tokens) + index_select(bound.position_embedding, positions);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / cfg.heads));
  for (std::size_t l = 0; l < bound.layers.size(); ++l) {
    const BoundParams::Layer& layer = bound.layers[l];
    ad::Tensor attn;
    for (std::size_t h = 0; h < layer.wq.size(); ++h) {
      const ad::Tensor q = matmul(x, layer.wq[h]);
      cache.keys[l][h].push_back(matmul(x, layer.wk[h]));
      cache.values[l][h].push_back(matmul(x, layer.wv[h]));
      const ad::Tensor head = matmul(block_attention(q, cache.keys[l][h], cache.values[l][h], att_scale), layer.wo[h]);
      attn = attn.valid() ? attn + head : head;
    }
    x = x + attn;
    const ad::Tensor hidden = relu(add_rowwise(matmul(x, layer.ffn_w1), layer.ffn_b1));
    x = x + add_rowwise(matmul(hidden, layer.ffn_w2), layer.ffn_b2);
  }
  cache.length += n;
  return x;
}

namespace {

constexpr int kDecisionSupport[] = {Vocab::kRecommend, Vocab::kNotRecommend, Vocab::kEos};

}  // namespace

int support_column(int token, GenMode mode) {
  if (mode == GenMode::kCot) return token;
  for (int c = 0; c < 3; ++c) {
    if (kDecisionSupport[c] == token) return c;
  }
  throw ContractViolation("token " + std::to_string(token) + " outside the decision-only support");
}

int support_token(int column, GenMode mode) {
  if (mode == GenMode::kCot) return column;
  PLRANK_EXPECT(column >= 0 && column < 3, "decision-only column out of range");
  return kDecisionSupport[column];
}

ad::Tensor next_token_log_probs(const BoundParams& bound, const ad::Tensor& hidden, GenMode mode,
                                double temperature) {
  PLRANK_EXPECT(temperature > 0.0, "temperature must be positive");
  ad::Tensor logits = matmul(hidden, bound.output);
  if (temperature != 1.0) logits = scale(logits, 1.0 / temperature);
  if (mode == GenMode::kDecisionOnly) {
    Matrix select = Matrix::Zero(logits.cols(), 3);
    for (int c = 0; c < 3; ++c) select(kDecisionSupport[c], c) = 1.0;
    logits = matmul(logits, hidden.tape()->constant(std::move(select)));
  }
  return log_softmax_rows(logits);
}

ad::Tensor score(const BoundParams& bound, const ad::Tensor& final_hidden) {
  PLRANK_EXPECT(final_hidden.rows() == 1 && final_hidden.cols() == bound.config.d_model,
                "score expects one hidden row of width d_model");
  const ad::Tensor h = tanh(add_rowwise(matmul(final_hidden, bound.head_w1), bound.head_b1));
  return matmul(h, bound.head_w2) + bound.head_b2;
}

TeacherForced teacher_force(const BoundParams& bound, const DecoderCache& context,
                            std::span<const int> candidate_suffix, std::span<const int> generated, GenMode mode,
                            double temperature) {
  PLRANK_EXPECT(!candidate_suffix.empty(), "teacher_force needs a non-empty candidate suffix");
  PLRANK_EXPECT(!generated.empty(), "teacher_force needs at least one target token");
  DecoderCache cache = context;
  std::vector<int> input(candidate_suffix.begin(), candidate_suffix.end());
  input.insert(input.end(), generated.begin(), generated.end());
  const ad::Tensor hidden = extend(bound, cache, input);

  // Row r of the block predicts token r + 1, so the targets start at the last suffix row.
  const int first = static_cast<int>(candidate_suffix.size()) - 1;
  std::vector<int> rows(generated.size());
  std::vector<int> cols(generated.size());
  for (std::size_t t = 0; t < generated.size(); ++t) {
    rows[t] = first + static_cast<int>(t);
    cols[t] = support_column(generated[t], mode);
  }
  const ad::Tensor predictors = index_select(hidden, rows);
  TeacherForced out;
  out.log_probs = pick(next_token_log_probs(bound, predictors, mode, temperature), cols);
  const int last = static_cast<int>(input.size()) - 1;
  out.final_hidden = index_select(hidden, std::span<const int>(&last, 1));
  return out;
}

// -- generation ---------------------------------------------------------------

Rationale generate(const BoundParams& bound, const DecoderCache& context, std::span<const int> candidate_suffix,
                   RandomStream& rng, const GenerateOptions& options) {
  PLRANK_EXPECT(options.temperature > 0.0, "temperature must be positive");
  PLRANK_EXPECT(!candidate_suffix.empty(), "generate needs a non-empty prefix");
  const int max_steps = options.mode == GenMode::kDecisionOnly ? 2 : bound.config.max_gen;
  PLRANK_EXPECT(context.length + static_cast<int>(candidate_suffix.size()) + max_steps <= bound.config.max_len,
                "prefix length + max_gen exceeds max_len");

  DecoderCache cache = context;
  ad::Tensor hidden = extend(bound, cache, candidate_suffix);
  int last_row = static_cast<int>(candidate_suffix.size()) - 1;
  ad::Tensor last = index_select(hidden, std::span<const int>(&last_row, 1));

  Rationale r;
  std::vector<double> weights;
  for (int step = 0; step < max_steps; ++step) {
    const Matrix lp = next_token_log_probs(bound, last, options.mode, options.temperature).value();
    int col = 0;
    if (options.decoding == Decoding::kArgmax) {
      lp.row(0).maxCoeff(&col);
    } else {
      const double hi = lp.maxCoeff();
      weights.resize(static_cast<std::size_t>(lp.cols()));
      for (Eigen::Index c = 0; c < lp.cols(); ++c) weights[static_cast<std::size_t>(c)] = std::exp(lp(0, c) - hi);
      col = static_cast<int>(rng.categorical(weights));
    }
    const int token = support_token(col, options.mode);
    r.tokens.push_back(token);
    r.token_logprobs.push_back(lp(0, col));
    last = extend(bound, cache, std::span<const int>(&token, 1));
    if (token == Vocab::kEos) break;
  }
  r.truncated = r.tokens.back() != Vocab::kEos;
  r.final_hidden = last.value().row(0).transpose();
  return r;
}

Rationale generate(const PolicyParams& params, std::span<const int> prefix, RandomStream& rng,
                   const GenerateOptions& options) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, params, false, false);
  return generate(bound, DecoderCache{}, prefix, rng, options);
}

double score(const PolicyParams& params, const Rationale& r) {
  PLRANK_EXPECT(r.final_hidden.size() == params.config.d_model, "final_hidden width differs from d_model");
  const Matrix h = (r.final_hidden.transpose() * params.head_w1 + params.head_b1).array().tanh().matrix();
  return (h * params.head_w2)(0, 0) + params.head_b2(0, 0);
}

std::vector<double> token_log_probs(const PolicyParams& params, std::span<const int> prefix,
                                    std::span<const int> tokens, GenMode mode, double temperature) {
  PLRANK_EXPECT(!tokens.empty(), "token_log_probs needs at least one token");
  ad::Tape tape;
  const BoundParams bound = bind(tape, params, false, false);
  const TeacherForced tf = teacher_force(bound, DecoderCache{}, prefix, tokens, mode, temperature);
  const Matrix& v = tf.log_probs.value();
  return std::vector<double>(v.data(), v.data() + v.size());
}

ContextEncoder::ContextEncoder(const PolicyParams& params, std::span<const int> context)
    : bound_(bind(tape_, params, false, false)) {
  if (!context.empty()) extend(bound_, cache_, context);
}

}  // namespace plrank
