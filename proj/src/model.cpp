#include "settx/model.hpp"

#include <charconv>
#include <sstream>

namespace settx {

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ' && c != '\t') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

Index parse_width(const std::string& text, std::string_view token) {
  Index v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || v <= 0) {
    throw ConfigError(std::string(token), "bad size '" + text + "' in layer '" +
                                              std::string(token) + "'");
  }
  return v;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ", ";
    out += parts[i];
  }
  return out;
}

}  // namespace

EncoderLayer EncoderLayer::parse(std::string_view token) {
  const auto parts = split(token, ':');
  const std::string& kind = parts[0];
  EncoderLayer layer;
  if (kind == "fc" && (parts.size() == 2 || (parts.size() == 3 && parts[2] == "relu"))) {
    layer.kind = EncoderKind::Linear;
    layer.width = parse_width(parts[1], token);
    layer.relu = parts.size() == 3;
  } else if ((kind == "rffp-mean" || kind == "rffp-max") && parts.size() == 2) {
    layer.kind = kind == "rffp-mean" ? EncoderKind::RffpMean : EncoderKind::RffpMax;
    layer.width = parse_width(parts[1], token);
  } else if (kind == "sab" && parts.size() == 1) {
    layer.kind = EncoderKind::Sab;
  } else if (kind == "isab" && parts.size() == 2) {
    layer.kind = EncoderKind::Isab;
    layer.inducing = parse_width(parts[1], token);
  } else {
    throw ConfigError(std::string(token), "unknown encoder layer '" + std::string(token) + "'");
  }
  return layer;
}

std::string EncoderLayer::to_string() const {
  switch (kind) {
    case EncoderKind::Linear:
      return "fc:" + std::to_string(width) + (relu ? ":relu" : "");
    case EncoderKind::RffpMean:
      return "rffp-mean:" + std::to_string(width);
    case EncoderKind::RffpMax:
      return "rffp-max:" + std::to_string(width);
    case EncoderKind::Sab:
      return "sab";
    case EncoderKind::Isab:
      return "isab:" + std::to_string(inducing);
  }
  return {};
}

HeadLayer HeadLayer::parse(std::string_view token) {
  const auto parts = split(token, ':');
  if (parts[0] != "fc" || parts.size() < 2 || parts.size() > 3 ||
      (parts.size() == 3 && parts[2] != "relu")) {
    throw ConfigError(std::string(token), "unknown head layer '" + std::string(token) + "'");
  }
  return HeadLayer{parse_width(parts[1], token), parts.size() == 3};
}

std::string HeadLayer::to_string() const {
  return "fc:" + std::to_string(width) + (relu ? ":relu" : "");
}

std::string to_string(PoolKind pool) {
  switch (pool) {
    case PoolKind::Mean: return "mean";
    case PoolKind::Sum: return "sum";
    case PoolKind::Max: return "max";
    case PoolKind::Dotprod: return "dotprod";
    case PoolKind::Pma: return "pma";
  }
  return {};
}

ModelConfig ModelConfig::from(const KeyValues& kv) {
  ModelConfig cfg;
  cfg.input_dim = kv.get_int("model.input_dim");
  cfg.dim = kv.get_int("model.dim");
  cfg.heads = kv.get_int("model.heads", 4);
  cfg.encoder.clear();
  for (const auto& token : split(kv.require("model.encoder"), ',')) {
    if (!token.empty()) cfg.encoder.push_back(EncoderLayer::parse(token));
  }
  const std::string pool = kv.require("model.pool");
  if (pool == "mean") {
    cfg.pool = PoolKind::Mean;
  } else if (pool == "sum") {
    cfg.pool = PoolKind::Sum;
  } else if (pool == "max") {
    cfg.pool = PoolKind::Max;
  } else if (pool == "dotprod") {
    cfg.pool = PoolKind::Dotprod;
  } else if (pool.starts_with("pma:")) {
    cfg.pool = PoolKind::Pma;
    cfg.seeds = parse_width(pool.substr(4), pool);
  } else {
    throw ConfigError("model.pool", "key 'model.pool': unknown pooling '" + pool + "'");
  }
  cfg.pma_rff = kv.get_bool("model.pma_rff", false);
  cfg.post_sabs = kv.get_int("model.post_sabs", 0);
  cfg.head.clear();
  for (const auto& token : split(kv.require("model.head"), ',')) {
    if (!token.empty()) cfg.head.push_back(HeadLayer::parse(token));
  }
  cfg.ln_eps = kv.get_double("model.ln_eps", 1e-5);
  cfg.validate();
  return cfg;
}

void ModelConfig::to(KeyValues& kv) const {
  std::ostringstream eps;
  eps.precision(17);
  eps << ln_eps;
  std::vector<std::string> enc, hd;
  for (const auto& l : encoder) enc.push_back(l.to_string());
  for (const auto& l : head) hd.push_back(l.to_string());
  kv.set("model.input_dim", std::to_string(input_dim));
  kv.set("model.dim", std::to_string(dim));
  kv.set("model.heads", std::to_string(heads));
  kv.set("model.encoder", join(enc));
  kv.set("model.pool", pool == PoolKind::Pma ? "pma:" + std::to_string(seeds) : to_string(pool));
  kv.set("model.pma_rff", pma_rff ? "true" : "false");
  kv.set("model.post_sabs", std::to_string(post_sabs));
  kv.set("model.head", join(hd));
  kv.set("model.ln_eps", eps.str());
}

Index ModelConfig::output_width() const {
  if (!head.empty()) return head.back().width;
  Index width = input_dim;
  for (const auto& l : encoder) {
    width = (l.kind == EncoderKind::Sab || l.kind == EncoderKind::Isab) ? dim : l.width;
  }
  return pool == PoolKind::Pma || post_sabs > 0 ? dim : width;
}

void ModelConfig::validate() const {
  if (input_dim <= 0) throw ConfigError("model.input_dim", "model.input_dim must be positive");
  if (dim <= 0) throw ConfigError("model.dim", "model.dim must be positive");
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("model.heads", "model.heads must divide model.dim (" + std::to_string(dim) +
                                         " / " + std::to_string(heads) + ")");
  }
  if (post_sabs < 0) throw ConfigError("model.post_sabs", "model.post_sabs must be >= 0");
  if (!(ln_eps > 0)) throw ConfigError("model.ln_eps", "model.ln_eps must be positive");
  if (pma_rff && pool != PoolKind::Pma) {
    throw ConfigError("model.pma_rff", "model.pma_rff requires model.pool = pma:K");
  }
  // Post-pooling SABs run at the attention width, so the pooled rows must have it.
  if (post_sabs > 0 && pool != PoolKind::Pma) {
    Index width = input_dim;
    for (const auto& l : encoder) {
      width = (l.kind == EncoderKind::Sab || l.kind == EncoderKind::Isab) ? dim : l.width;
    }
    if (width != dim) {
      throw ConfigError("model.post_sabs", "post-pooling SABs need encoder output width " +
                                               std::to_string(dim) + ", got " +
                                               std::to_string(width));
    }
  }
}

Model::Model(ModelConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  const Index d = config_.dim;
  const Index h = config_.heads;
  const double eps = config_.ln_eps;
  Index width = config_.input_dim;
  for (std::size_t i = 0; i < config_.encoder.size(); ++i) {
    const EncoderLayer& layer = config_.encoder[i];
    const std::string name = "enc" + std::to_string(i);
    switch (layer.kind) {
      case EncoderKind::Linear:
        encoder_.emplace_back(make_linear(params_, name + ".fc", width, layer.width, layer.relu, rng));
        width = layer.width;
        break;
      case EncoderKind::RffpMean:
      case EncoderKind::RffpMax:
        encoder_.emplace_back(make_rffp(params_, name + ".rffp", width, layer.width,
                                        layer.kind == EncoderKind::RffpMean ? ad::Pool::Mean
                                                                            : ad::Pool::Max,
                                        rng));
        width = layer.width;
        break;
      case EncoderKind::Sab:
        encoder_.emplace_back(make_mab(params_, name + ".sab", width, width, d, h, rng, eps));
        width = d;
        break;
      case EncoderKind::Isab:
        encoder_.emplace_back(make_isab(params_, name + ".isab", width, d, h, layer.inducing, rng, eps));
        width = d;
        break;
    }
  }
  switch (config_.pool) {
    case PoolKind::Pma:
      pma_ = make_pma(params_, "dec.pma", width, d, h, config_.seeds, config_.pma_rff, rng, eps);
      width = d;
      break;
    case PoolKind::Dotprod: {
      Matrix w(1, width);
      for (Index j = 0; j < width; ++j) w(0, j) = rng.normal() / std::sqrt(double(width));
      dotprod_ = Dotprod{&params_.add("dec.dotprod.weight", std::move(w))};
      break;
    }
    default:
      break;
  }
  for (Index i = 0; i < config_.post_sabs; ++i) {
    post_sabs_.push_back(make_mab(params_, "dec.sab" + std::to_string(i), width, width, d, h, rng, eps));
    width = d;
  }
  for (std::size_t i = 0; i < config_.head.size(); ++i) {
    const HeadLayer& layer = config_.head[i];
    head_.push_back(make_linear(params_, "head" + std::to_string(i), width, layer.width, layer.relu, rng));
    width = layer.width;
  }
}

ad::Var Model::encode(ad::Tape& tape, const ad::Var& x, const ad::Segments& segs) const {
  ad::Var z = x;
  for (const EncoderBlock& block : encoder_) {
    z = std::visit(
        [&](const auto& p) -> ad::Var {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Linear>) {
            return ad::linear(z, p);
          } else if constexpr (std::is_same_v<T, RffpParams>) {
            return ad::rffp(z, p, segs);
          } else if constexpr (std::is_same_v<T, MABParams>) {
            return ad::sab(z, p, segs);
          } else {
            return ad::isab(z, p, segs);
          }
        },
        block);
  }
  (void)tape;
  return z;
}

ad::Var Model::decode(ad::Tape& tape, const ad::Var& z, const ad::Segments& segs) const {
  ad::Var pooled;
  switch (config_.pool) {
    case PoolKind::Mean: pooled = ad::segment_pool(z, segs, ad::Pool::Mean); break;
    case PoolKind::Sum: pooled = ad::segment_pool(z, segs, ad::Pool::Sum); break;
    case PoolKind::Max: pooled = ad::segment_pool(z, segs, ad::Pool::Max); break;
    case PoolKind::Dotprod: pooled = ad::dotprod_pool(z, tape.param(*dotprod_->weight), segs); break;
    case PoolKind::Pma: pooled = ad::pma(z, *pma_, segs); break;
  }
  const auto pooled_segs = ad::Segments::uniform(segs.count(), config_.rows_per_set());
  for (const MABParams& p : post_sabs_) pooled = ad::sab(pooled, p, pooled_segs);
  for (const Linear& l : head_) pooled = ad::linear(pooled, l);
  return pooled;
}

ad::Var Model::forward(ad::Tape& tape, const Matrix& x, const ad::Segments& segs) const {
  if (x.cols() != config_.input_dim) {
    throw DimensionError("model expects " + std::to_string(config_.input_dim) +
                         "-dimensional elements, got input " + shape_str(x));
  }
  const ad::Var in = tape.constant(x);
  return decode(tape, encode(tape, in, segs), segs);
}

Matrix Model::predict(const Matrix& x) const {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  return forward(tape, x, ad::Segments::single(x.rows())).value();
}

}  // namespace settx
