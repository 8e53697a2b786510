#pragma once

#include "settx/autodiff.hpp"
#include "settx/rng.hpp"

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace settx {

/// Owns the parameters of one model. Addresses are stable for the lifetime of
/// the store (blocks keep raw pointers into it), so it is move-only.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  /// Throws ContractError if the name is taken.
  Parameter& add(std::string name, Matrix value);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<Parameter*> pointers();
  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

/// Xavier-uniform fan_in x fan_out matrix.
Matrix xavier_uniform(Index fan_in, Index fan_out, Rng& rng);

// ---------------------------------------------------------------------------
// Parameter bundles. Blocks hold pointers into a ParameterStore.

/// Fully-connected row-wise layer x W + b, optionally followed by ReLU.
struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out
  bool relu = false;

  Index in_dim() const { return weight->value.rows(); }
  Index out_dim() const { return weight->value.cols(); }
};

/// Projections of multihead attention. Head j uses column block j of wq, wk
/// and wv (width dim / heads); wo mixes the concatenated heads.
struct MultiheadParams {
  Parameter* wq = nullptr;  // d_q_in x dim
  Parameter* wk = nullptr;  // d_kv_in x dim
  Parameter* wv = nullptr;  // d_kv_in x dim
  Parameter* wo = nullptr;  // dim x dim
  Index heads = 1;
  Index dim = 0;

  /// Softmax temperature: sqrt of the full model width.
  double scale() const;
};

struct MABParams {
  MultiheadParams attention;
  Linear rff;  // dim -> dim with ReLU
  Parameter* ln1_gain = nullptr;
  Parameter* ln1_bias = nullptr;
  Parameter* ln2_gain = nullptr;
  Parameter* ln2_bias = nullptr;
  double eps = 1e-5;
};

struct ISABParams {
  Parameter* inducing = nullptr;  // m x dim
  MABParams to_inducing;          // MAB(I, X)
  MABParams from_inducing;        // MAB(X, H)
};

struct PMAParams {
  Parameter* seeds = nullptr;  // k x dim
  MABParams mab;
  std::optional<Linear> rff;  // applied to Z before pooling when present
};

/// Permutation-equivariant baseline layer: ReLU(lambda * x_i + gamma * pool(X))
/// applied after a row-wise linear map.
struct RffpParams {
  Linear linear;
  Parameter* lambda = nullptr;  // 1x1
  Parameter* gamma = nullptr;   // 1x1
  ad::Pool pool = ad::Pool::Mean;
};

Linear make_linear(ParameterStore& store, const std::string& prefix, Index in, Index out,
                   bool relu, Rng& rng);
MultiheadParams make_multihead(ParameterStore& store, const std::string& prefix, Index q_in,
                               Index kv_in, Index dim, Index heads, Rng& rng);
MABParams make_mab(ParameterStore& store, const std::string& prefix, Index q_in, Index kv_in,
                   Index dim, Index heads, Rng& rng, double eps = 1e-5);
ISABParams make_isab(ParameterStore& store, const std::string& prefix, Index in, Index dim,
                     Index heads, Index inducing, Rng& rng, double eps = 1e-5);
PMAParams make_pma(ParameterStore& store, const std::string& prefix, Index in, Index dim,
                   Index heads, Index seeds, bool with_rff, Rng& rng, double eps = 1e-5);
RffpParams make_rffp(ParameterStore& store, const std::string& prefix, Index in, Index out,
                     ad::Pool pool, Rng& rng);

// ---------------------------------------------------------------------------
// Set operations. Inputs may stack several sets along rows; `segs` gives the
// row count of each set and attention never crosses set boundaries.

namespace ad {

/// softmax(Q K^T / scale) V for a single set, written with primitive ops.
Var att(const Var& q, const Var& k, const Var& v, double scale);

Var linear(const Var& x, const Linear& p);

/// concat_j att(Q Wq_j, K Wk_j, V Wv_j) * Wo
Var multihead(const Var& q, const Var& k, const Var& v, const MultiheadParams& p,
              const Segments& q_segs, const Segments& kv_segs);

/// Same computation as multihead() for one set, built from split_cols, att and
/// concat_cols instead of the fused attention op.
Var multihead_reference(const Var& q, const Var& k, const Var& v, const MultiheadParams& p);

/// H = LayerNorm(R + Multihead(X, Y, Y)), out = LayerNorm(H + rFF(H)).
/// R is X when X already has the model width, otherwise X Wq.
Var mab(const Var& x, const Var& y, const MABParams& p, const Segments& x_segs,
        const Segments& y_segs);
Var sab(const Var& x, const MABParams& p, const Segments& segs);
Var isab(const Var& x, const ISABParams& p, const Segments& segs);
/// k rows per input set.
Var pma(const Var& z, const PMAParams& p, const Segments& segs);
Var rffp_layer(const Var& x, const Var& lambda, const Var& gamma, const Segments& segs, Pool pool);
Var rffp(const Var& x, const RffpParams& p, const Segments& segs);
/// One row per set: rows of the set weighted by softmax(Z w^T).
Var dotprod_pool(const Var& z, const Var& w, const Segments& segs);

// Single-set conveniences.
inline Var mab(const Var& x, const Var& y, const MABParams& p) {
  return mab(x, y, p, Segments::single(x.rows()), Segments::single(y.rows()));
}
inline Var sab(const Var& x, const MABParams& p) { return sab(x, p, Segments::single(x.rows())); }
inline Var isab(const Var& x, const ISABParams& p) {
  return isab(x, p, Segments::single(x.rows()));
}
inline Var pma(const Var& z, const PMAParams& p) { return pma(z, p, Segments::single(z.rows())); }

}  // namespace ad
}  // namespace settx
