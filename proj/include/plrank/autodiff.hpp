#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass (define-by-run). Tensor is
// a light handle (tape pointer + node id); values live on the tape. Vectors are
// 1 x n, scalars 1 x 1. The only implicit broadcast is scalar-with-tensor in
// add/sub/mul; bias rows are added with the explicit add_rowwise.

#include <Eigen/Core>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "plrank/errors.hpp"

namespace plrank::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::vector<Eigen::Index> shape() const { return {rows(), cols()}; }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  double item() const;

  int node_id() const { return id_; }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Gradients produced by one backward pass, keyed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Matrix> grads) : grads_(std::move(grads)) {}

  /// d loss / d t. Zero-filled when the loss does not depend on t.
  Matrix of(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  std::vector<Matrix> grads_;
};

class Tape {
 public:
  /// Accumulates parent gradients inside a backward rule.
  class Accumulator {
   public:
    explicit Accumulator(std::vector<Matrix>& grads, const Tape& tape) : grads_(grads), tape_(tape) {}
    Matrix& grad(int id);
    const Matrix& value(int id) const;
    bool wants(int id) const;

   private:
    std::vector<Matrix>& grads_;
    const Tape& tape_;
  };

  using BackwardRule = std::function<void(const Matrix& grad_out, Accumulator& acc)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value);
  Tensor parameter(Matrix value);
  Tensor scalar(double v);

  /// Records a node. The rule is dropped when no parent requires a gradient.
  Tensor record(Matrix value, std::span<const Tensor> parents, BackwardRule rule);

  /// Reverse sweep from a 1 x 1 loss.
  Gradients backward(const Tensor& loss) const;

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    bool requires_grad = false;
    BackwardRule rule;
  };
  std::deque<Node> nodes_;
};

// -- forward ops --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);
/// a (r x c) plus the row vector bias (1 x c) added to every row.
Tensor add_rowwise(const Tensor& a, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
/// Elementwise minimum; on ties the gradient goes to a.
Tensor minimum(const Tensor& a, const Tensor& b);

/// Softmax along axis 0 (columns) or 1 (rows).
Tensor softmax(const Tensor& a, int axis);
/// Row softmax under a causal mask: row i sees columns 0..offset+i.
Tensor causal_softmax(const Tensor& a, Eigen::Index offset);
Tensor log_softmax_rows(const Tensor& a);
/// Causal scaled dot-product attention for the newest q.rows() positions.
/// Keys and values arrive as row blocks (e.g. a cached context followed by
/// fresh rows); together they cover every position, and the queries are the
/// last q.rows() of them. Query i sees key positions 0..N-q.rows()+i.
Tensor block_attention(const Tensor& q, std::span<const Tensor> key_blocks,
                       std::span<const Tensor> value_blocks, double scale);
/// Scalar log(sum(exp(a))) with max-subtraction.
Tensor logsumexp(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a);

/// Gathers rows of a (embedding lookup); repeated indices accumulate.
Tensor index_select(const Tensor& a, std::span<const int> rows);
/// Picks a(i, cols[i]) for every row; result is rows x 1.
Tensor pick(const Tensor& a, std::span<const int> cols);
Tensor concat(std::span<const Tensor> parts, int axis);
/// Value copy with no gradient path.
Tensor detach(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double f, const Tensor& a) { return scale(a, f); }

// -- gradient verification ----------------------------------------------------

/// A scalar function of a set of parameter matrices, built on a fresh tape.
using ScalarFunction = std::function<Tensor(Tape&, std::span<const Tensor> params)>;

struct FdReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
};

/// Central finite differences against backward(). Relative error per entry is
/// |fd - ad| / max(|fd|, |ad|, abs_floor); the floor keeps entries whose true
/// gradient is ~0 from dividing rounding noise by zero.
FdReport fd_check(const ScalarFunction& f, std::vector<Matrix> params, double h,
                  double abs_floor = 1e-6);

}  // namespace plrank::ad
