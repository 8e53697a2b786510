#include "settx/blocks.hpp"

#include <cmath>

namespace settx {

Parameter& ParameterStore::add(std::string name, Matrix value) {
  if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter* ParameterStore::find(std::string_view name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<Parameter*> ParameterStore::pointers() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  return w;
}

namespace {

Matrix scaled_normal(Index rows, Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

}  // namespace

double MultiheadParams::scale() const { return std::sqrt(static_cast<double>(dim)); }

Linear make_linear(ParameterStore& store, const std::string& prefix, Index in, Index out,
                   bool relu, Rng& rng) {
  Linear l;
  l.weight = &store.add(prefix + ".weight", xavier_uniform(in, out, rng));
  l.bias = &store.add(prefix + ".bias", Matrix::Zero(1, out));
  l.relu = relu;
  return l;
}

MultiheadParams make_multihead(ParameterStore& store, const std::string& prefix, Index q_in,
                               Index kv_in, Index dim, Index heads, Rng& rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw DimensionError("multihead: width " + std::to_string(dim) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  MultiheadParams p;
  p.wq = &store.add(prefix + ".wq", xavier_uniform(q_in, dim, rng));
  p.wk = &store.add(prefix + ".wk", xavier_uniform(kv_in, dim, rng));
  p.wv = &store.add(prefix + ".wv", xavier_uniform(kv_in, dim, rng));
  p.wo = &store.add(prefix + ".wo", xavier_uniform(dim, dim, rng));
  p.heads = heads;
  p.dim = dim;
  return p;
}

MABParams make_mab(ParameterStore& store, const std::string& prefix, Index q_in, Index kv_in,
                   Index dim, Index heads, Rng& rng, double eps) {
  MABParams p;
  p.attention = make_multihead(store, prefix + ".attn", q_in, kv_in, dim, heads, rng);
  p.rff = make_linear(store, prefix + ".rff", dim, dim, true, rng);
  p.ln1_gain = &store.add(prefix + ".ln1.gain", Matrix::Ones(1, dim));
  p.ln1_bias = &store.add(prefix + ".ln1.bias", Matrix::Zero(1, dim));
  p.ln2_gain = &store.add(prefix + ".ln2.gain", Matrix::Ones(1, dim));
  p.ln2_bias = &store.add(prefix + ".ln2.bias", Matrix::Zero(1, dim));
  p.eps = eps;
  return p;
}

ISABParams make_isab(ParameterStore& store, const std::string& prefix, Index in, Index dim,
                     Index heads, Index inducing, Rng& rng, double eps) {
  if (inducing < 1) throw ContractError("isab: need at least one inducing point");
  ISABParams p;
  p.inducing = &store.add(prefix + ".inducing",
                          scaled_normal(inducing, dim, 1.0 / std::sqrt(double(dim)), rng));
  p.to_inducing = make_mab(store, prefix + ".mab0", dim, in, dim, heads, rng, eps);
  p.from_inducing = make_mab(store, prefix + ".mab1", in, dim, dim, heads, rng, eps);
  return p;
}

PMAParams make_pma(ParameterStore& store, const std::string& prefix, Index in, Index dim,
                   Index heads, Index seeds, bool with_rff, Rng& rng, double eps) {
  if (seeds < 1) throw ContractError("pma: need at least one seed vector");
  PMAParams p;
  p.seeds = &store.add(prefix + ".seeds",
                       scaled_normal(seeds, dim, 1.0 / std::sqrt(double(dim)), rng));
  Index kv_in = in;
  if (with_rff) {
    p.rff = make_linear(store, prefix + ".rff", in, dim, true, rng);
    kv_in = dim;
  }
  p.mab = make_mab(store, prefix + ".mab", dim, kv_in, dim, heads, rng, eps);
  return p;
}

RffpParams make_rffp(ParameterStore& store, const std::string& prefix, Index in, Index out,
                     ad::Pool pool, Rng& rng) {
  RffpParams p;
  p.linear = make_linear(store, prefix + ".linear", in, out, false, rng);
  p.lambda = &store.add(prefix + ".lambda", Matrix::Ones(1, 1));
  p.gamma = &store.add(prefix + ".gamma", Matrix::Zero(1, 1));
  p.pool = pool;
  return p;
}

namespace ad {

Var att(const Var& q, const Var& k, const Var& v, double scale_) {
  if (q.cols() != k.cols()) {
    throw DimensionError("att: query " + shape_str(q.rows(), q.cols()) + " and key " +
                         shape_str(k.rows(), k.cols()) + " widths differ");
  }
  return matmul(softmax_rows(matmul(q, transpose(k)), scale_), v);
}

Var linear(const Var& x, const Linear& p) {
  Tape& t = *x.tape();
  return affine(x, t.param(*p.weight), t.param(*p.bias), p.relu);
}

Var multihead(const Var& q, const Var& k, const Var& v, const MultiheadParams& p,
              const Segments& q_segs, const Segments& kv_segs) {
  Tape& t = *q.tape();
  const Var qp = matmul(q, t.param(*p.wq));
  const Var kp = matmul(k, t.param(*p.wk));
  const Var vp = matmul(v, t.param(*p.wv));
  const Var heads = segmented_attention(qp, kp, vp, p.heads, q_segs, kv_segs, p.scale());
  return matmul(heads, t.param(*p.wo));
}

Var multihead_reference(const Var& q, const Var& k, const Var& v, const MultiheadParams& p) {
  Tape& t = *q.tape();
  const auto qs = split_cols(matmul(q, t.param(*p.wq)), p.heads);
  const auto ks = split_cols(matmul(k, t.param(*p.wk)), p.heads);
  const auto vs = split_cols(matmul(v, t.param(*p.wv)), p.heads);
  std::vector<Var> outs;
  for (std::size_t j = 0; j < qs.size(); ++j) outs.push_back(att(qs[j], ks[j], vs[j], p.scale()));
  return matmul(concat_cols(outs), t.param(*p.wo));
}

Var mab(const Var& x, const Var& y, const MABParams& p, const Segments& x_segs,
        const Segments& y_segs) {
  Tape& t = *x.tape();
  const MultiheadParams& mh = p.attention;
  if (x.cols() != mh.wq->value.rows() || y.cols() != mh.wk->value.rows()) {
    throw DimensionError("mab: inputs " + shape_str(x.rows(), x.cols()) + " and " +
                         shape_str(y.rows(), y.cols()) + " do not match projections " +
                         shape_str(mh.wq->value) + " and " + shape_str(mh.wk->value));
  }
  const Var qp = matmul(x, t.param(*mh.wq));
  const Var kp = matmul(y, t.param(*mh.wk));
  const Var vp = matmul(y, t.param(*mh.wv));
  const Var heads = segmented_attention(qp, kp, vp, mh.heads, x_segs, y_segs, mh.scale());
  const Var attended = matmul(heads, t.param(*mh.wo));
  const Var residual = x.cols() == mh.dim ? x : qp;
  const Var h = layernorm_rows(add(residual, attended), t.param(*p.ln1_gain),
                               t.param(*p.ln1_bias), p.eps);
  return layernorm_rows(add(h, linear(h, p.rff)), t.param(*p.ln2_gain), t.param(*p.ln2_bias),
                        p.eps);
}

Var sab(const Var& x, const MABParams& p, const Segments& segs) { return mab(x, x, p, segs, segs); }

Var isab(const Var& x, const ISABParams& p, const Segments& segs) {
  Tape& t = *x.tape();
  const Index m = p.inducing->value.rows();
  const Segments ind_segs = Segments::uniform(segs.count(), m);
  const Var inducing = tile_rows(t.param(*p.inducing), static_cast<Index>(segs.count()));
  const Var h = mab(inducing, x, p.to_inducing, ind_segs, segs);
  return mab(x, h, p.from_inducing, segs, ind_segs);
}

Var pma(const Var& z, const PMAParams& p, const Segments& segs) {
  Tape& t = *z.tape();
  const Index k = p.seeds->value.rows();
  const Var keys = p.rff ? linear(z, *p.rff) : z;
  const Var seeds = tile_rows(t.param(*p.seeds), static_cast<Index>(segs.count()));
  return mab(seeds, keys, p.mab, Segments::uniform(segs.count(), k), segs);
}

Var rffp_layer(const Var& x, const Var& lambda, const Var& gamma, const Segments& segs,
               Pool pool) {
  const Var pooled = segment_broadcast(segment_pool(x, segs, pool), segs);
  return relu(add(mul_scalar(x, lambda), mul_scalar(pooled, gamma)));
}

Var rffp(const Var& x, const RffpParams& p, const Segments& segs) {
  Tape& t = *x.tape();
  return rffp_layer(linear(x, p.linear), t.param(*p.lambda), t.param(*p.gamma), segs, p.pool);
}

Var dotprod_pool(const Var& z, const Var& w, const Segments& segs) {
  if (w.rows() != 1 || w.cols() != z.cols()) {
    throw DimensionError("dotprod_pool: weight " + shape_str(w.rows(), w.cols()) + " for input " +
                         shape_str(z.rows(), z.cols()));
  }
  const Var logits = matmul(z, transpose(w));
  const auto offsets = segs.offsets();
  std::vector<Var> rows;
  rows.reserve(segs.count());
  for (std::size_t s = 0; s < segs.count(); ++s) {
    const Var zs = slice_rows(z, offsets[s], segs.sizes[s]);
    const Var weights = softmax_rows(transpose(slice_rows(logits, offsets[s], segs.sizes[s])), 1.0);
    rows.push_back(matmul(weights, zs));
  }
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

}  // namespace ad
}  // namespace settx
