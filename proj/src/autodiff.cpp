#include "settx/autodiff.hpp"

#include "settx/kernels.hpp"

#include <algorithm>
#include <numeric>

namespace settx::ad {

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  return push(std::move(node));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node node;
  node.value = p.value;
  node.param = &p;
  node.op = "parameter";
  node.requires_grad = grad_enabled_ && p.trainable;
  Var v = push(std::move(node));
  param_nodes_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Matrix value, std::string_view op, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(std::move(value), op, std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Matrix value, std::string_view op, const std::vector<Var>& inputs,
                 Backward backward) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.tape() != this) throw ContractError(std::string(op) + ": input from another tape");
      if (nodes_[in.id()].requires_grad) node.requires_grad = true;
    }
  }
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (g.rows() != node.value.rows() || g.cols() != node.value.cols()) {
    throw DimensionError("gradient " + shape_str(g) + " for node '" + std::string(node.op) +
                         "' of shape " + shape_str(node.value));
  }
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Node& root = nodes_[loss.id()];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ContractError("backward: loss must be 1x1, got " + shape_str(root.value));
  }
  for (Node& node : nodes_) node.grad.resize(0, 0);
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.size() == 0) continue;
    if (node.param) {
      node.param->grad += node.grad;
    } else if (node.backward) {
      node.backward(*this, node.value, node.grad);
    }
  }
}

Index Segments::total() const { return std::accumulate(sizes.begin(), sizes.end(), Index{0}); }

std::vector<Index> Segments::offsets() const {
  std::vector<Index> out(sizes.size());
  Index acc = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    out[i] = acc;
    acc += sizes[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("operation on an empty Var");
  return *v.tape();
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.rows(), a.cols()) + " and " +
                         shape_str(b.rows(), b.cols()) + " differ");
  }
}

void require_segments(const char* op, const Var& x, const Segments& segs) {
  if (segs.total() != x.rows()) {
    throw DimensionError(std::string(op) + ": segments cover " + std::to_string(segs.total()) +
                         " rows but input is " + shape_str(x.rows(), x.cols()));
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  }
  Matrix out = a.value() * b.value();
  return tape_of(a).record(std::move(out), "matmul", {a, b},
                           [a, b](Tape& t, const Matrix&, const Matrix& g) {
                             if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
                             if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
                           });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return tape_of(a).record(a.value() + b.value(), "add", {a, b},
                           [a, b](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(a, g);
                             t.accumulate(b, g);
                           });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return tape_of(a).record(a.value() - b.value(), "sub", {a, b},
                           [a, b](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(a, g);
                             t.accumulate(b, -g);
                           });
}

Var scale(const Var& x, double factor) {
  return tape_of(x).record(x.value() * factor, "scale", {x},
                           [x, factor](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, g * factor);
                           });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError("mul_scalar: scalar operand is " + shape_str(s.rows(), s.cols()));
  }
  return tape_of(x).record(x.value() * s.value()(0, 0), "mul_scalar", {x, s},
                           [x, s](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, g * s.value()(0, 0));
                             if (t.requires_grad(s)) {
                               t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(x.value()).sum()));
                             }
                           });
}

Var transpose(const Var& x) {
  return tape_of(x).record(x.value().transpose(), "transpose", {x},
                           [x](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, g.transpose());
                           });
}

Var relu(const Var& x) {
  if (tape_of(x).tracks_kinks()) tape_of(x).note_kink(x.value().cwiseAbs().minCoeff());
  return tape_of(x).record(x.value().cwiseMax(0.0), "relu", {x},
                           [x](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
                           });
}

Var abs(const Var& x) {
  if (tape_of(x).tracks_kinks()) tape_of(x).note_kink(x.value().cwiseAbs().minCoeff());
  return tape_of(x).record(x.value().cwiseAbs(), "abs", {x},
                           [x](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, g.cwiseProduct(x.value().cwiseSign()));
                           });
}

Var softmax_rows(const Var& x, double scale_) {
  Matrix out = settx::softmax_rows(x.value(), scale_);
  return tape_of(x).record(std::move(out), "softmax_rows", {x},
                           [x, scale_](Tape& t, const Matrix& p, const Matrix& g) {
                             const Vector dot = g.cwiseProduct(p).rowwise().sum();
                             Matrix dx = p.cwiseProduct((g.colwise() - dot)) / scale_;
                             t.accumulate(x, dx);
                           });
}

Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  auto cache = std::make_shared<LayerNormCache<double>>();
  Matrix out = settx::layernorm_rows(x.value(), gain.value(), bias.value(), eps, cache.get());
  return tape_of(x).record(
      std::move(out), "layernorm_rows", {x, gain, bias},
      [x, gain, bias, cache](Tape& t, const Matrix&, const Matrix& g) {
        const Matrix& xhat = cache->normalized;
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (t.requires_grad(x)) {
          const Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
          const Vector mean_d = dxhat.rowwise().mean();
          const Vector mean_dx = dxhat.cwiseProduct(xhat).rowwise().mean();
          Matrix dx = ((dxhat.colwise() - mean_d).array() -
                       xhat.array().colwise() * mean_dx.array())
                          .matrix();
          dx = (dx.array().colwise() * cache->inv_std.array()).matrix();
          t.accumulate(x, dx);
        }
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row counts " + std::to_string(rows) + " and " +
                           std::to_string(p.rows()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape_of(parts.front())
      .record(std::move(out), "concat_cols", parts, [parts](Tape& t, const Matrix&, const Matrix& g) {
        Index at = 0;
        for (const Var& p : parts) {
          if (t.requires_grad(p)) t.accumulate(p, g.middleCols(at, p.cols()));
          at += p.cols();
        }
      });
}

std::vector<Var> split_cols(const Var& x, Index parts) {
  if (parts <= 0 || x.cols() % parts != 0) {
    throw DimensionError("split_cols: cannot split " + shape_str(x.rows(), x.cols()) + " into " +
                         std::to_string(parts) + " equal column blocks");
  }
  const Index width = x.cols() / parts;
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(parts));
  for (Index j = 0; j < parts; ++j) {
    out.push_back(tape_of(x).record(
        x.value().middleCols(j * width, width), "split_cols", {x},
        [x, j, width](Tape& t, const Matrix&, const Matrix& g) {
          Matrix full = Matrix::Zero(x.rows(), x.cols());
          full.middleCols(j * width, width) = g;
          t.accumulate(x, full);
        }));
  }
  return out;
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column counts " + std::to_string(cols) + " and " +
                           std::to_string(p.cols()));
    }
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape_of(parts.front())
      .record(std::move(out), "concat_rows", parts, [parts](Tape& t, const Matrix&, const Matrix& g) {
        Index at = 0;
        for (const Var& p : parts) {
          if (t.requires_grad(p)) t.accumulate(p, g.middleRows(at, p.rows()));
          at += p.rows();
        }
      });
}

Var slice_rows(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") of " + shape_str(x.rows(), x.cols()));
  }
  return tape_of(x).record(x.value().middleRows(start, count), "slice_rows", {x},
                           [x, start, count](Tape& t, const Matrix&, const Matrix& g) {
                             Matrix full = Matrix::Zero(x.rows(), x.cols());
                             full.middleRows(start, count) = g;
                             t.accumulate(x, full);
                           });
}

Var broadcast_row(const Var& row, Index n) {
  if (row.rows() != 1) {
    throw DimensionError("broadcast_row: expected a single row, got " +
                         shape_str(row.rows(), row.cols()));
  }
  return tape_of(row).record(row.value().replicate(n, 1), "broadcast_row", {row},
                             [row](Tape& t, const Matrix&, const Matrix& g) {
                               t.accumulate(row, g.colwise().sum());
                             });
}

Var add_row(const Var& x, const Var& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError("add_row: " + shape_str(x.rows(), x.cols()) + " + row " +
                         shape_str(row.rows(), row.cols()));
  }
  Matrix out = x.value().rowwise() + row.value().row(0);
  return tape_of(x).record(std::move(out), "add_row", {x, row},
                           [x, row](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, g);
                             if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                           });
}

Var affine(const Var& x, const Var& w, const Var& b, bool relu) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw DimensionError("affine: " + shape_str(x.rows(), x.cols()) + " * " +
                         shape_str(w.rows(), w.cols()) + " + " + shape_str(b.rows(), b.cols()));
  }
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  const auto bias = b.value().row(0);
  const bool track = relu && tape_of(x).tracks_kinks();
  for (Index i = 0; i < out.rows(); ++i) {
    if (track) tape_of(x).note_kink((out.row(i) + bias).cwiseAbs().minCoeff());
    if (relu) {
      out.row(i) = (out.row(i) + bias).cwiseMax(0.0);
    } else {
      out.row(i) += bias;
    }
  }
  return tape_of(x).record(std::move(out), relu ? "affine_relu" : "affine", {x, w, b},
                           [x, w, b, relu](Tape& t, const Matrix& value, const Matrix& g) {
                             const Matrix gz = relu ? Matrix((value.array() > 0.0).select(g, 0.0)) : g;
                             if (t.requires_grad(x)) t.accumulate(x, gz * w.value().transpose());
                             if (t.requires_grad(w)) t.accumulate(w, x.value().transpose() * gz);
                             if (t.requires_grad(b)) t.accumulate(b, gz.colwise().sum());
                           });
}

Var tile_rows(const Var& x, Index times) {
  if (times <= 0) throw ContractError("tile_rows: times must be positive");
  return tape_of(x).record(x.value().replicate(times, 1), "tile_rows", {x},
                           [x, times](Tape& t, const Matrix&, const Matrix& g) {
                             Matrix acc = Matrix::Zero(x.rows(), x.cols());
                             for (Index i = 0; i < times; ++i) acc += g.middleRows(i * x.rows(), x.rows());
                             t.accumulate(x, acc);
                           });
}

Var reshape(const Var& x, Index rows, Index cols) {
  if (rows * cols != x.rows() * x.cols()) {
    throw DimensionError("reshape: " + shape_str(x.rows(), x.cols()) + " to " +
                         shape_str(rows, cols));
  }
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return tape_of(x).record(std::move(out), "reshape", {x},
                           [x](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols()));
                           });
}

Var sum(const Var& x) {
  return tape_of(x).record(Matrix::Constant(1, 1, x.value().sum()), "sum", {x},
                           [x](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
                           });
}

Var mean(const Var& x) {
  const double count = static_cast<double>(x.value().size());
  if (count == 0) throw ContractError("mean: empty input");
  return tape_of(x).record(Matrix::Constant(1, 1, x.value().sum() / count), "mean", {x},
                           [x, count](Tape& t, const Matrix&, const Matrix& g) {
                             t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / count));
                           });
}

Var segment_pool(const Var& x, const Segments& segs, Pool pool) {
  require_segments("segment_pool", x, segs);
  const auto offsets = segs.offsets();
  const Index d = x.cols();
  Matrix out(static_cast<Index>(segs.count()), d);
  // For max pooling, the source row of each pooled entry.
  std::vector<Index> argmax;
  if (pool == Pool::Max) argmax.resize(segs.count() * static_cast<std::size_t>(d));
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const Index n = segs.sizes[s];
    if (n <= 0) throw ContractError("segment_pool: empty segment");
    const auto block = x.value().middleRows(offsets[s], n);
    switch (pool) {
      case Pool::Mean:
        out.row(static_cast<Index>(s)) = block.colwise().mean();
        break;
      case Pool::Sum:
        out.row(static_cast<Index>(s)) = block.colwise().sum();
        break;
      case Pool::Max:
        for (Index c = 0; c < d; ++c) {
          Index best = 0;
          for (Index r = 1; r < n; ++r) {
            if (block(r, c) > block(best, c)) best = r;
          }
          out(static_cast<Index>(s), c) = block(best, c);
          if (tape_of(x).tracks_kinks()) {
            for (Index r = 0; r < n; ++r) {
              if (r != best) tape_of(x).note_kink(block(best, c) - block(r, c));
            }
          }
          argmax[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] = offsets[s] + best;
        }
        break;
    }
  }
  return tape_of(x).record(
      std::move(out), "segment_pool", {x},
      [x, segs, offsets, pool, argmax = std::move(argmax)](Tape& t, const Matrix&, const Matrix& g) {
        Matrix dx = Matrix::Zero(x.rows(), x.cols());
        const Index d = x.cols();
        for (std::size_t s = 0; s < segs.count(); ++s) {
          const Index n = segs.sizes[s];
          const auto gs = g.row(static_cast<Index>(s));
          switch (pool) {
            case Pool::Mean:
              dx.middleRows(offsets[s], n).rowwise() += gs / static_cast<double>(n);
              break;
            case Pool::Sum:
              dx.middleRows(offsets[s], n).rowwise() += gs;
              break;
            case Pool::Max:
              for (Index c = 0; c < d; ++c) {
                dx(argmax[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)], c) += gs(c);
              }
              break;
          }
        }
        t.accumulate(x, dx);
      });
}

Var segment_broadcast(const Var& rows, const Segments& segs) {
  if (static_cast<std::size_t>(rows.rows()) != segs.count()) {
    throw DimensionError("segment_broadcast: " + std::to_string(rows.rows()) + " rows for " +
                         std::to_string(segs.count()) + " segments");
  }
  const auto offsets = segs.offsets();
  Matrix out(segs.total(), rows.cols());
  for (std::size_t s = 0; s < segs.count(); ++s) {
    out.middleRows(offsets[s], segs.sizes[s]).rowwise() = rows.value().row(static_cast<Index>(s));
  }
  return tape_of(rows).record(std::move(out), "segment_broadcast", {rows},
                              [rows, segs, offsets](Tape& t, const Matrix&, const Matrix& g) {
                                Matrix dr(rows.rows(), rows.cols());
                                for (std::size_t s = 0; s < segs.count(); ++s) {
                                  dr.row(static_cast<Index>(s)) =
                                      g.middleRows(offsets[s], segs.sizes[s]).colwise().sum();
                                }
                                t.accumulate(rows, dr);
                              });
}

Var segmented_attention(const Var& q, const Var& k, const Var& v, Index heads,
                        const Segments& q_segs, const Segments& kv_segs, double scale_) {
  if (q.cols() != k.cols()) {
    throw DimensionError("attention: query " + shape_str(q.rows(), q.cols()) + " and key " +
                         shape_str(k.rows(), k.cols()) + " widths differ");
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("attention: key " + shape_str(k.rows(), k.cols()) + " and value " +
                         shape_str(v.rows(), v.cols()) + " row counts differ");
  }
  if (heads <= 0 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw DimensionError("attention: widths " + std::to_string(q.cols()) + "/" +
                         std::to_string(v.cols()) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  if (q_segs.count() != kv_segs.count()) {
    throw DimensionError("attention: " + std::to_string(q_segs.count()) + " query segments vs " +
                         std::to_string(kv_segs.count()) + " key/value segments");
  }
  require_segments("attention(query)", q, q_segs);
  require_segments("attention(key)", k, kv_segs);
  if (!(scale_ > 0.0)) throw ContractError("attention: scale must be positive");

  Tape& tape = tape_of(q);
  const bool keep = tape.grad_enabled();
  const Index dq = q.cols() / heads;
  const Index dv = v.cols() / heads;
  const auto q_off = q_segs.offsets();
  const auto kv_off = kv_segs.offsets();

  Matrix out(q.rows(), v.cols());
  auto probs = std::make_shared<std::vector<Matrix>>();
  if (keep) probs->reserve(q_segs.count() * static_cast<std::size_t>(heads));
  const double inv_scale = 1.0 / scale_;
  Matrix p;
  for (std::size_t s = 0; s < q_segs.count(); ++s) {
    const Index nq = q_segs.sizes[s];
    const Index nk = kv_segs.sizes[s];
    if (nk <= 0) throw ContractError("attention: empty key/value segment");
    for (Index h = 0; h < heads; ++h) {
      const auto qh = q.value().block(q_off[s], h * dq, nq, dq);
      const auto kh = k.value().block(kv_off[s], h * dq, nk, dq);
      const auto vh = v.value().block(kv_off[s], h * dv, nk, dv);
      p.noalias() = qh * kh.transpose();
      for (Index i = 0; i < nq; ++i) {
        const double top = p.row(i).maxCoeff();
        p.row(i).array() = (p.row(i).array() - top) * inv_scale;
      }
      p.array() = p.array().exp();
      for (Index i = 0; i < nq; ++i) p.row(i) /= p.row(i).sum();
      out.block(q_off[s], h * dv, nq, dv).noalias() = p * vh;
      if (keep) probs->push_back(p);
    }
  }

  return tape.record(
      std::move(out), "attention", {q, k, v},
      [q, k, v, heads, q_segs, kv_segs, q_off, kv_off, dq, dv, probs, scale_](
          Tape& t, const Matrix&, const Matrix& g) {
        Matrix dQ = Matrix::Zero(q.rows(), q.cols());
        Matrix dK = Matrix::Zero(k.rows(), k.cols());
        Matrix dV = Matrix::Zero(v.rows(), v.cols());
        std::size_t idx = 0;
        Matrix dp, dl;
        for (std::size_t s = 0; s < q_segs.count(); ++s) {
          const Index nq = q_segs.sizes[s];
          const Index nk = kv_segs.sizes[s];
          for (Index h = 0; h < heads; ++h, ++idx) {
            const Matrix& p = (*probs)[idx];
            const auto go = g.block(q_off[s], h * dv, nq, dv);
            const auto qh = q.value().block(q_off[s], h * dq, nq, dq);
            const auto kh = k.value().block(kv_off[s], h * dq, nk, dq);
            const auto vh = v.value().block(kv_off[s], h * dv, nk, dv);
            dV.block(kv_off[s], h * dv, nk, dv).noalias() += p.transpose() * go;
            dp.noalias() = go * vh.transpose();
            const Vector dot = dp.cwiseProduct(p).rowwise().sum();
            dl = p.cwiseProduct(dp.colwise() - dot) / scale_;
            dQ.block(q_off[s], h * dq, nq, dq).noalias() += dl * kh;
            dK.block(kv_off[s], h * dq, nk, dq).noalias() += dl.transpose() * qh;
          }
        }
        t.accumulate(q, dQ);
        t.accumulate(k, dK);
        t.accumulate(v, dV);
      });
}

}  // namespace settx::ad
