#pragma once

#include "settx/tensor.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace settx {

/// A named learnable tensor with its accumulated gradient.
struct Parameter {
  Parameter(std::string name_, Matrix value_, bool trainable_ = true)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(Matrix::Zero(value.rows(), value.cols())),
        trainable(trainable_) {}

  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of a forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward() walks it in reverse. A tape is built per
/// forward pass and must stay on one thread.
class Tape {
 public:
  /// Adjoint rule: receives the node's forward value and its incoming
  /// gradient, and pushes contributions to inputs via accumulate().
  using Backward = std::function<void(Tape&, const Matrix& value, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);

  /// Leaf bound to a Parameter; one node per Parameter per tape.
  Var param(Parameter& p);

  /// Appends an operation. `op` must outlive the tape (use a literal).
  Var record(Matrix value, std::string_view op, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(Matrix value, std::string_view op, const std::vector<Var>& inputs,
             Backward backward);

  /// Adds `g` to the gradient of `v`. Only meaningful during backward().
  void accumulate(const Var& v, const Matrix& g);

  /// Reverse accumulation from a 1x1 loss. Parameter gradients are added to
  /// Parameter::grad (callers zero them between steps).
  void backward(const Var& loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of a node after backward(); zero-shaped if it received none.
  const Matrix& grad(const Var& v) const { return nodes_[v.id()].grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  std::string_view op_name(const Var& v) const { return nodes_[v.id()].op; }

  /// With gradients disabled no adjoint rules or caches are kept.
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t size() const { return nodes_.size(); }

  /// When on, piecewise ops (relu, abs, max pooling) record how far their
  /// inputs are from a switch point; kink_margin() is the smallest distance
  /// seen, +inf if none. Off by default.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool tracks_kinks() const { return track_kinks_; }
  void note_kink(double margin) { kink_margin_ = std::min(kink_margin_, margin); }
  double kink_margin() const { return kink_margin_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    std::string_view op;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // deque keeps value references stable on growth
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool track_kinks_ = false;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

/// Row ranges of stacked sets: sets are concatenated along rows, segment i
/// occupying sizes[i] consecutive rows.
struct Segments {
  std::vector<Index> sizes;

  static Segments single(Index n) { return Segments{{n}}; }
  static Segments uniform(std::size_t count, Index n) {
    return Segments{std::vector<Index>(count, n)};
  }

  std::size_t count() const { return sizes.size(); }
  Index total() const;
  std::vector<Index> offsets() const;
};

enum class Pool { Mean, Sum, Max };

// Elementwise and structural ops. All record an adjoint rule.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// x * s for a 1x1 node s.
Var mul_scalar(const Var& x, const Var& s);
Var transpose(const Var& x);
Var relu(const Var& x);
Var abs(const Var& x);
Var softmax_rows(const Var& x, double scale);
Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps);
Var concat_cols(const std::vector<Var>& parts);
std::vector<Var> split_cols(const Var& x, Index parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, Index start, Index count);
/// Repeats a 1xd row n times.
Var broadcast_row(const Var& row, Index n);
/// x + broadcast_row(row, x.rows()).
Var add_row(const Var& x, const Var& row);
/// x W + b with b a 1xd row, optionally followed by ReLU, as one node.
Var affine(const Var& x, const Var& w, const Var& b, bool relu);
/// Stacks `times` copies of x vertically.
Var tile_rows(const Var& x, Index times);
/// Row-major reinterpretation to a new shape of equal size.
Var reshape(const Var& x, Index rows, Index cols);
/// Sum of all entries, 1x1.
Var sum(const Var& x);
/// Mean of all entries, 1x1.
Var mean(const Var& x);

/// One pooled row per segment. Max routes the gradient to the first row that
/// attains the column maximum.
Var segment_pool(const Var& x, const Segments& segs, Pool pool);
/// Inverse layout of segment_pool: row i of `rows` repeated sizes[i] times.
Var segment_broadcast(const Var& rows, const Segments& segs);

/// Scaled dot-product attention softmax(Q K^T / scale) V, per head and per
/// segment. Columns of q, k, v are split into `heads` equal blocks; query
/// segment i attends only to key/value segment i. Output has q's row layout
/// and v's width, heads concatenated along columns.
Var segmented_attention(const Var& q, const Var& k, const Var& v, Index heads,
                        const Segments& q_segs, const Segments& kv_segs, double scale);

}  // namespace ad
}  // namespace settx
