#pragma once

#include "settx/blocks.hpp"
#include "settx/config.hpp"

#include <variant>

namespace settx {

enum class EncoderKind { Linear, RffpMean, RffpMax, Sab, Isab };
enum class PoolKind { Mean, Sum, Max, Dotprod, Pma };

/// One encoder stage. Text form: `fc:W`, `fc:W:relu`, `rffp-mean:W`,
/// `rffp-max:W`, `sab`, `isab:M`.
struct EncoderLayer {
  EncoderKind kind = EncoderKind::Linear;
  Index width = 0;     // fc / rffp output width
  bool relu = false;   // fc only
  Index inducing = 0;  // isab only

  static EncoderLayer parse(std::string_view token);
  std::string to_string() const;
  bool operator==(const EncoderLayer&) const = default;
};

/// Row-wise output layer. Text form: `fc:W` or `fc:W:relu`.
struct HeadLayer {
  Index width = 0;
  bool relu = false;

  static HeadLayer parse(std::string_view token);
  std::string to_string() const;
  bool operator==(const HeadLayer&) const = default;
};

/// Architecture of an encoder/decoder set model.
struct ModelConfig {
  Index input_dim = 1;
  Index dim = 64;    // width of attention blocks
  Index heads = 4;
  std::vector<EncoderLayer> encoder;
  PoolKind pool = PoolKind::Pma;
  Index seeds = 1;   // PMA seed count
  bool pma_rff = false;
  Index post_sabs = 0;
  std::vector<HeadLayer> head;
  double ln_eps = 1e-5;

  /// Reads the `model.*` keys.
  static ModelConfig from(const KeyValues& kv);
  /// Writes the `model.*` keys in canonical form.
  void to(KeyValues& kv) const;

  /// Output rows per input set: the seed count for PMA, else one.
  Index rows_per_set() const { return pool == PoolKind::Pma ? seeds : 1; }
  Index output_width() const;

  /// Throws ConfigError when widths do not chain.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(PoolKind pool);

/// Encoder/decoder set model: encoder layers, a pooling stage, optional
/// SABs over the pooled rows, then a row-wise head.
class Model {
 public:
  Model(ModelConfig config, Rng& init_rng);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// x stacks the sets along rows. Returns rows_per_set() rows per set, in
  /// set order, each output_width() wide.
  ad::Var forward(ad::Tape& tape, const Matrix& x, const ad::Segments& segs) const;
  /// Encoder output (one row per input row).
  ad::Var encode(ad::Tape& tape, const ad::Var& x, const ad::Segments& segs) const;
  ad::Var decode(ad::Tape& tape, const ad::Var& z, const ad::Segments& segs) const;

  /// Forward pass without gradients for a single set.
  Matrix predict(const Matrix& x) const;

 private:
  struct Dotprod {
    Parameter* weight;
  };
  using EncoderBlock = std::variant<Linear, RffpParams, MABParams, ISABParams>;

  ModelConfig config_;
  ParameterStore params_;
  std::vector<EncoderBlock> encoder_;
  std::optional<PMAParams> pma_;
  std::optional<Dotprod> dotprod_;
  std::vector<MABParams> post_sabs_;
  std::vector<Linear> head_;
};

}  // namespace settx
