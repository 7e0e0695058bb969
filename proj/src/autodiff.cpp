#include "plrank/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace plrank::ad {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Tape& tape_of(const Tensor& a) {
  PLRANK_EXPECT(a.valid(), "operation on an empty tensor");
  return *a.tape();
}

Tape& common_tape(const Tensor& a, const Tensor& b) {
  PLRANK_EXPECT(a.valid() && b.valid(), "operation on an empty tensor");
  PLRANK_EXPECT(a.tape() == b.tape(), "tensors recorded on different tapes");
  return *a.tape();
}

enum class Broadcast { kNone, kScalarA, kScalarB };

Broadcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kNone;
  if (a.size() == 1) return Broadcast::kScalarA;
  if (b.size() == 1) return Broadcast::kScalarB;
  throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

// -- Tensor / Gradients / Tape -----------------------------------------------

const Matrix& Tensor::value() const {
  PLRANK_EXPECT(valid(), "value() on an empty tensor");
  return tape_->value(id_);
}

double Tensor::item() const {
  PLRANK_EXPECT(is_scalar(), "item() requires a 1x1 tensor, got " + shape_str(value()));
  return value()(0, 0);
}

bool Tensor::requires_grad() const { return valid() && tape_->requires_grad(id_); }

Matrix Gradients::of(const Tensor& t) const {
  const auto id = static_cast<std::size_t>(t.node_id());
  if (id < grads_.size() && grads_[id].size() > 0) return grads_[id];
  return Matrix::Zero(t.rows(), t.cols());
}

bool Gradients::has(const Tensor& t) const {
  const auto id = static_cast<std::size_t>(t.node_id());
  return id < grads_.size() && grads_[id].size() > 0;
}

Matrix& Tape::Accumulator::grad(int id) {
  Matrix& g = grads_[static_cast<std::size_t>(id)];
  if (g.size() == 0) g = Matrix::Zero(tape_.value(id).rows(), tape_.value(id).cols());
  return g;
}

const Matrix& Tape::Accumulator::value(int id) const { return tape_.value(id); }

bool Tape::Accumulator::wants(int id) const { return tape_.requires_grad(id); }

Tensor Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Tensor Tape::record(Matrix value, std::span<const Tensor> parents, BackwardRule rule) {
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.requires_grad();
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(rule) : BackwardRule{}});
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Gradients Tape::backward(const Tensor& loss) const {
  PLRANK_EXPECT(loss.valid() && loss.tape() == this, "loss is not on this tape");
  PLRANK_EXPECT(loss.is_scalar(), "backward requires a scalar loss, got " + shape_str(loss.value()));
  std::vector<Matrix> grads(nodes_.size());
  Accumulator acc(grads, *this);
  grads[static_cast<std::size_t>(loss.node_id())] = Matrix::Ones(1, 1);
  for (int id = loss.node_id(); id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    Matrix& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0 || !node.rule) continue;
    node.rule(g, acc);
    g.resize(0, 0);  // interior gradients are not kept
  }
  return Gradients(std::move(grads));
}

// -- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "add");
  Matrix out;
  switch (kind) {
    case Broadcast::kNone: out = av + bv; break;
    case Broadcast::kScalarA: out = bv.array() + av(0, 0); break;
    case Broadcast::kScalarB: out = av.array() + bv(0, 0); break;
  }
  const int ia = a.node_id(), ib = b.node_id();
  const Tensor parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib, kind](const Matrix& g, Tape::Accumulator& acc) {
    if (acc.wants(ia)) {
      if (kind == Broadcast::kScalarA) acc.grad(ia)(0, 0) += g.sum();
      else acc.grad(ia) += g;
    }
    if (acc.wants(ib)) {
      if (kind == Broadcast::kScalarB) acc.grad(ib)(0, 0) += g.sum();
      else acc.grad(ib) += g;
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "mul");
  Matrix out;
  switch (kind) {
    case Broadcast::kNone: out = av.cwiseProduct(bv); break;
    case Broadcast::kScalarA: out = bv * av(0, 0); break;
    case Broadcast::kScalarB: out = av * bv(0, 0); break;
  }
  const int ia = a.node_id(), ib = b.node_id();
  const Tensor parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib, kind](const Matrix& g, Tape::Accumulator& acc) {
    const Matrix& av = acc.value(ia);
    const Matrix& bv = acc.value(ib);
    switch (kind) {
      case Broadcast::kNone:
        if (acc.wants(ia)) acc.grad(ia) += g.cwiseProduct(bv);
        if (acc.wants(ib)) acc.grad(ib) += g.cwiseProduct(av);
        break;
      case Broadcast::kScalarA:
        if (acc.wants(ia)) acc.grad(ia)(0, 0) += g.cwiseProduct(bv).sum();
        if (acc.wants(ib)) acc.grad(ib) += g * av(0, 0);
        break;
      case Broadcast::kScalarB:
        if (acc.wants(ia)) acc.grad(ia) += g * bv(0, 0);
        if (acc.wants(ib)) acc.grad(ib)(0, 0) += g.cwiseProduct(av).sum();
        break;
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tape& tape = tape_of(a);
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  return tape.record(a.value() * factor, parents, [ia, factor](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia) += g * factor;
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
  Tape& tape = common_tape(a, bias);
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  PLRANK_EXPECT(bv.rows() == 1 && bv.cols() == av.cols(),
                "add_rowwise: bias must be 1x" + std::to_string(av.cols()) + ", got " + shape_str(bv));
  Matrix out = av.rowwise() + bv.row(0);
  const int ia = a.node_id(), ib = bias.node_id();
  const Tensor parents[] = {a, bias};
  return tape.record(std::move(out), parents, [ia, ib](const Matrix& g, Tape::Accumulator& acc) {
    if (acc.wants(ia)) acc.grad(ia) += g;
    if (acc.wants(ib)) acc.grad(ib) += g.colwise().sum();
  });
}

// -- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  PLRANK_EXPECT(av.cols() == bv.rows(), "matmul: shape mismatch " + shape_str(av) + " * " + shape_str(bv));
  Matrix out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  const int ia = a.node_id(), ib = b.node_id();
  const Tensor parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](const Matrix& g, Tape::Accumulator& acc) {
    if (acc.wants(ia)) acc.grad(ia).noalias() += g * acc.value(ib).transpose();
    if (acc.wants(ib)) acc.grad(ib).noalias() += acc.value(ia).transpose() * g;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  PLRANK_EXPECT(av.cols() == bv.cols(), "matmul_nt: shape mismatch " + shape_str(av) + " * " + shape_str(bv) + "^T");
  Matrix out(av.rows(), bv.rows());
  out.noalias() = av * bv.transpose();
  const int ia = a.node_id(), ib = b.node_id();
  const Tensor parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](const Matrix& g, Tape::Accumulator& acc) {
    if (acc.wants(ia)) acc.grad(ia).noalias() += g * acc.value(ib);
    if (acc.wants(ib)) acc.grad(ib).noalias() += g.transpose() * acc.value(ia);
  });
}

Tensor transpose(const Tensor& a) {
  Tape& tape = tape_of(a);
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  Matrix out = a.value().transpose();
  return tape.record(std::move(out), parents, [ia](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia) += g.transpose();
  });
}

// -- unary --------------------------------------------------------------------

namespace {

// Records an op whose backward needs its own output; the output node id is
// known only after recording, so the rule reads it through a shared slot.
template <typename Forward, typename Backward>
Tensor record_with_output(const Tensor& a, Forward&& fwd, Backward&& bwd) {
  Tape& tape = tape_of(a);
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  auto self = std::make_shared<int>(-1);
  Tensor out = tape.record(fwd(a.value()), parents,
                           [ia, self, bwd](const Matrix& g, Tape::Accumulator& acc) {
                             bwd(g, acc.value(*self), acc.value(ia), acc.grad(ia));
                           });
  *self = out.node_id();
  return out;
}

}  // namespace

Tensor exp(const Tensor& a) {
  return record_with_output(
      a, [](const Matrix& x) -> Matrix { return x.array().exp().matrix(); },
      [](const Matrix& g, const Matrix& y, const Matrix&, Matrix& ga) { ga += g.cwiseProduct(y); });
}

Tensor log(const Tensor& a) {
  Tape& tape = tape_of(a);
  const Matrix& av = a.value();
  PLRANK_EXPECT((av.array() > 0.0).all(), "log of a non-positive entry");
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  return tape.record(av.array().log().matrix(), parents, [ia](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia) += g.cwiseQuotient(acc.value(ia));
  });
}


Tensor tanh(const Tensor& a) {
  return record_with_output(
      a, [](const Matrix& x) -> Matrix { return x.array().tanh().matrix(); },
      [](const Matrix& g, const Matrix& y, const Matrix&, Matrix& ga) {
        ga.array() += g.array() * (1.0 - y.array().square());
      });
}

Tensor relu(const Tensor& a) {
  return record_with_output(
      a, [](const Matrix& x) -> Matrix { return x.cwiseMax(0.0); },
      [](const Matrix& g, const Matrix&, const Matrix& x, Matrix& ga) {
        ga.array() += (x.array() > 0.0).select(g.array(), 0.0);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  PLRANK_EXPECT(lo <= hi, "clamp: lo > hi");
  return record_with_output(
      a, [lo, hi](const Matrix& x) -> Matrix { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Matrix& g, const Matrix&, const Matrix& x, Matrix& ga) {
        ga.array() += (x.array() >= lo && x.array() <= hi).select(g.array(), 0.0);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  PLRANK_EXPECT(av.rows() == bv.rows() && av.cols() == bv.cols(),
                "minimum: shape mismatch " + shape_str(av) + " vs " + shape_str(bv));
  Matrix out = av.cwiseMin(bv);
  const int ia = a.node_id(), ib = b.node_id();
  const Tensor parents[] = {a, b};
  return tape.record(std::move(out), parents, [ia, ib](const Matrix& g, Tape::Accumulator& acc) {
    const auto take_a = (acc.value(ia).array() <= acc.value(ib).array());
    if (acc.wants(ia)) acc.grad(ia).array() += take_a.select(g.array(), 0.0);
    if (acc.wants(ib)) acc.grad(ib).array() += take_a.select(0.0, g.array());
  });
}

// -- softmax family -----------------------------------------------------------

namespace {

Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double hi = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - hi).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

// dx = y * (g - sum(g * y)) row by row.
void softmax_rows_backward(const Matrix& g, const Matrix& y, Matrix& gx) {
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double dot = g.row(r).dot(y.row(r));
    gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
  }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  PLRANK_EXPECT(axis == 0 || axis == 1, "softmax axis must be 0 or 1");
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  return record_with_output(
      a, [](const Matrix& x) { return softmax_rows_value(x); },
      [](const Matrix& g, const Matrix& y, const Matrix&, Matrix& ga) { softmax_rows_backward(g, y, ga); });
}

Tensor causal_softmax(const Tensor& a, Eigen::Index offset) {
  PLRANK_EXPECT(offset >= 0 && offset + a.rows() <= a.cols(),
                "causal_softmax: offset + rows exceeds columns for " + shape_str(a.value()));
  return record_with_output(
      a,
      [offset](const Matrix& x) -> Matrix {
        Matrix y = Matrix::Zero(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const Eigen::Index n = offset + r + 1;
          const auto row = x.row(r).head(n);
          const double hi = row.maxCoeff();
          y.row(r).head(n) = (row.array() - hi).exp().matrix();
          y.row(r).head(n) /= y.row(r).head(n).sum();
        }
        return y;
      },
      [offset](const Matrix& g, const Matrix& y, const Matrix&, Matrix& ga) {
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const Eigen::Index n = offset + r + 1;
          const double dot = g.row(r).head(n).dot(y.row(r).head(n));
          ga.row(r).head(n).array() += y.row(r).head(n).array() * (g.row(r).head(n).array() - dot);
        }
      });
}

Tensor log_softmax_rows(const Tensor& a) {
  return record_with_output(
      a,
      [](const Matrix& x) -> Matrix {
        Matrix y(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double hi = x.row(r).maxCoeff();
          const double lse = hi + std::log((x.row(r).array() - hi).exp().sum());
          y.row(r) = x.row(r).array() - lse;
        }
        return y;
      },
      [](const Matrix& g, const Matrix& y, const Matrix&, Matrix& ga) {
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const double total = g.row(r).sum();
          ga.row(r).array() += g.row(r).array() - y.row(r).array().exp() * total;
        }
      });
}

Tensor block_attention(const Tensor& q, std::span<const Tensor> key_blocks,
                       std::span<const Tensor> value_blocks, double scale) {
  PLRANK_EXPECT(!key_blocks.empty() && key_blocks.size() == value_blocks.size(),
                "block_attention: key and value block counts differ");
  Tape& tape = tape_of(q);
  const Matrix& qv = q.value();
  const Eigen::Index n = qv.rows();
  const Eigen::Index dk = qv.cols();
  Eigen::Index total = 0;
  Eigen::Index dv = value_blocks[0].cols();
  for (std::size_t b = 0; b < key_blocks.size(); ++b) {
    PLRANK_EXPECT(key_blocks[b].tape() == &tape && value_blocks[b].tape() == &tape, "block_attention across tapes");
    PLRANK_EXPECT(key_blocks[b].cols() == dk, "block_attention: key width differs from query width");
    PLRANK_EXPECT(value_blocks[b].rows() == key_blocks[b].rows() && value_blocks[b].cols() == dv,
                  "block_attention: value block shape mismatch");
    total += key_blocks[b].rows();
  }
  PLRANK_EXPECT(n >= 1 && n <= total, "block_attention: more queries than key positions");
  const Eigen::Index offset = total - n;

  auto probs = std::make_shared<Matrix>(n, total);
  {
    Eigen::Index at = 0;
    for (const Tensor& k : key_blocks) {
      probs->middleCols(at, k.rows()).noalias() = qv * k.value().transpose();
      at += k.rows();
    }
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Index visible = offset + r + 1;
    auto row = probs->row(r);
    row.head(visible) *= scale;
    const double hi = row.head(visible).maxCoeff();
    row.head(visible) = (row.head(visible).array() - hi).exp().matrix();
    row.head(visible) /= row.head(visible).sum();
    row.tail(total - visible).setZero();
  }
  Matrix out = Matrix::Zero(n, dv);
  {
    Eigen::Index at = 0;
    for (const Tensor& v : value_blocks) {
      out.noalias() += probs->middleCols(at, v.rows()) * v.value();
      at += v.rows();
    }
  }

  std::vector<Tensor> parents{q};
  std::vector<int> kid, vid;
  for (std::size_t b = 0; b < key_blocks.size(); ++b) {
    parents.push_back(key_blocks[b]);
    parents.push_back(value_blocks[b]);
    kid.push_back(key_blocks[b].node_id());
    vid.push_back(value_blocks[b].node_id());
  }
  const int iq = q.node_id();
  return tape.record(std::move(out), parents,
                     [iq, kid = std::move(kid), vid = std::move(vid), probs, scale, offset](
                         const Matrix& g, Tape::Accumulator& acc) {
                       const Matrix& p = *probs;
                       const Eigen::Index n = p.rows();
                       // d probs = g V^T, block by block
                       Matrix dp(n, p.cols());
                       Eigen::Index at = 0;
                       for (std::size_t b = 0; b < vid.size(); ++b) {
                         const Matrix& v = acc.value(vid[b]);
                         dp.middleCols(at, v.rows()).noalias() = g * v.transpose();
                         if (acc.wants(vid[b])) acc.grad(vid[b]).noalias() += p.middleCols(at, v.rows()).transpose() * g;
                         at += v.rows();
                       }
                       // softmax backward on the visible part, then the scale
                       Matrix ds = Matrix::Zero(n, p.cols());
                       for (Eigen::Index r = 0; r < n; ++r) {
                         const Eigen::Index visible = offset + r + 1;
                         const double dot = dp.row(r).head(visible).dot(p.row(r).head(visible));
                         ds.row(r).head(visible) =
                             (p.row(r).head(visible).array() * (dp.row(r).head(visible).array() - dot) * scale).matrix();
                       }
                       at = 0;
                       const Matrix& qv = acc.value(iq);
                       for (std::size_t b = 0; b < kid.size(); ++b) {
                         const Matrix& k = acc.value(kid[b]);
                         if (acc.wants(iq)) acc.grad(iq).noalias() += ds.middleCols(at, k.rows()) * k;
                         if (acc.wants(kid[b])) acc.grad(kid[b]).noalias() += ds.middleCols(at, k.rows()).transpose() * qv;
                         at += k.rows();
                       }
                     });
}

Tensor logsumexp(const Tensor& a) {
  Tape& tape = tape_of(a);
  const Matrix& x = a.value();
  PLRANK_EXPECT(x.size() > 0, "logsumexp of an empty tensor");
  const double hi = x.maxCoeff();
  Matrix out(1, 1);
  out(0, 0) = hi + std::log((x.array() - hi).exp().sum());
  const int ia = a.node_id();
  const double lse = out(0, 0);
  const Tensor parents[] = {a};
  return tape.record(std::move(out), parents, [ia, lse](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia).array() += g(0, 0) * (acc.value(ia).array() - lse).exp();
  });
}

// -- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  Tape& tape = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  return tape.record(std::move(out), parents, [ia](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia).array() += g(0, 0);
  });
}

Tensor sum(const Tensor& a, int axis) {
  PLRANK_EXPECT(axis == 0 || axis == 1, "sum axis must be 0 or 1");
  Tape& tape = tape_of(a);
  const int ia = a.node_id();
  const Tensor parents[] = {a};
  if (axis == 0) {
    Matrix out = a.value().colwise().sum();
    return tape.record(std::move(out), parents, [ia](const Matrix& g, Tape::Accumulator& acc) {
      acc.grad(ia).rowwise() += g.row(0);
    });
  }
  Matrix out = a.value().rowwise().sum();
  return tape.record(std::move(out), parents, [ia](const Matrix& g, Tape::Accumulator& acc) {
    acc.grad(ia).colwise() += g.col(0);
  });
}

Tensor mean(const Tensor& a) {
  PLRANK_EXPECT(a.value().size() > 0, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// -- indexing -----------------------------------------------------------------

Tensor index_select(const Tensor& a, std::span<const int> rows) {
  Tape& tape = tape_of(a);
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    PLRANK_EXPECT(rows[i] >= 0 && rows[i] < av.rows(),
                  "index_select: row " + std::to_string(rows[i]) + " out of range for " + shape_str(av));
    out.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
  }
  const int ia = a.node_id();
  std::vector<int> idx(rows.begin(), rows.end());
  const Tensor parents[] = {a};
  return tape.record(std::move(out), parents, [ia, idx = std::move(idx)](const Matrix& g, Tape::Accumulator& acc) {
    Matrix& ga = acc.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Tensor pick(const Tensor& a, std::span<const int> cols) {
  Tape& tape = tape_of(a);
  const Matrix& av = a.value();
  PLRANK_EXPECT(static_cast<Eigen::Index>(cols.size()) == av.rows(),
                "pick: need one column index per row of " + shape_str(av));
  Matrix out(av.rows(), 1);
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const int c = cols[static_cast<std::size_t>(r)];
    PLRANK_EXPECT(c >= 0 && c < av.cols(), "pick: column " + std::to_string(c) + " out of range");
    out(r, 0) = av(r, c);
  }
  const int ia = a.node_id();
  std::vector<int> idx(cols.begin(), cols.end());
  const Tensor parents[] = {a};
  return tape.record(std::move(out), parents, [ia, idx = std::move(idx)](const Matrix& g, Tape::Accumulator& acc) {
    Matrix& ga = acc.grad(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) ga(static_cast<Eigen::Index>(r), idx[r]) += g(static_cast<Eigen::Index>(r), 0);
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  PLRANK_EXPECT(!parts.empty(), "concat of zero tensors");
  PLRANK_EXPECT(axis == 0 || axis == 1, "concat axis must be 0 or 1");
  Tape& tape = tape_of(parts[0]);
  Eigen::Index rows = 0, cols = 0;
  for (const Tensor& p : parts) {
    PLRANK_EXPECT(p.tape() == &tape, "concat across tapes");
    if (axis == 0) {
      PLRANK_EXPECT(p.cols() == parts[0].cols(), "concat rows: column count mismatch");
      rows += p.rows();
      cols = p.cols();
    } else {
      PLRANK_EXPECT(p.rows() == parts[0].rows(), "concat cols: row count mismatch");
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Tensor& p : parts) {
    if (axis == 0) out.middleRows(at, p.rows()) = p.value();
    else out.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.node_id());
    offsets.push_back(at);
    at += axis == 0 ? p.rows() : p.cols();
  }
  return tape.record(std::move(out), parts,
                     [ids = std::move(ids), offsets = std::move(offsets), axis](const Matrix& g, Tape::Accumulator& acc) {
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         if (!acc.wants(ids[i])) continue;
                         Matrix& gp = acc.grad(ids[i]);
                         if (axis == 0) gp += g.middleRows(offsets[i], gp.rows());
                         else gp += g.middleCols(offsets[i], gp.cols());
                       }
                     });
}

Tensor detach(const Tensor& a) { return tape_of(a).constant(a.value()); }

// -- finite differences -------------------------------------------------------

FdReport fd_check(const ScalarFunction& f, std::vector<Matrix> params, double h, double abs_floor) {
  PLRANK_EXPECT(h > 0.0, "fd_check step must be positive");
  auto evaluate = [&](bool want_grads, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Tensor> handles;
    handles.reserve(params.size());
    for (const Matrix& p : params) handles.push_back(tape.parameter(p));
    const Tensor loss = f(tape, handles);
    PLRANK_EXPECT(loss.is_scalar(), "fd_check function must return a scalar");
    if (want_grads) {
      const Gradients g = tape.backward(loss);
      for (const Tensor& t : handles) grads->push_back(g.of(t));
    }
    return loss.item();
  };

  std::vector<Matrix> analytic;
  evaluate(true, &analytic);

  FdReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p].size(); ++i) {
      double& x = params[p].data()[i];
      const double saved = x;
      x = saved + h;
      const double up = evaluate(false, nullptr);
      x = saved - h;
      const double down = evaluate(false, nullptr);
      x = saved;
      const double fd = (up - down) / (2.0 * h);
      const double ad = analytic[p].data()[i];
      const double denom = std::max({std::abs(fd), std::abs(ad), abs_floor});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(fd - ad) / denom);
      ++report.entries_checked;
    }
  }
  return report;
}

}  // namespace plrank::ad
