#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "embsteal/autodiff.hpp"
#include "embsteal/binio.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/rng.hpp"
#include "embsteal/tensor.hpp"
#include "embsteal/tokenizer.hpp"

namespace embsteal {

struct EncoderConfig {
  std::size_t vocab_size = 8192;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_len = 64;
  double dropout = 0.10;
  double init_std = 0.02;

  void validate() const {
    if (vocab_size < 2 || dim == 0 || heads == 0 || max_len == 0) throw ConfigError("encoder extents must be positive");
    if (dim % heads != 0) throw ConfigError("encoder dim must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }
};

inline void round_to_f32(Tensor& t) {
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

struct EncoderLayer {
  Parameter ln1_gain, ln1_shift;
  Parameter wq, wk, wv, wo;
  Parameter ln2_gain, ln2_shift;
  Parameter ff_in, ff_out;
};

// Token + learned position embeddings followed by pre-norm transformer
// blocks. Values are kept representable as 32-bit floats so a checkpoint
// written in f32 reloads bit-exactly.
class EncoderParams {
 public:
  EncoderConfig config;
  Parameter token_embedding;
  Parameter position_embedding;
  std::vector<EncoderLayer> layers;

  static std::size_t parameter_count(std::size_t vocab, std::size_t dim, std::size_t layers, std::size_t max_len) {
    return vocab * dim + max_len * dim + layers * (12 * dim * dim + 4 * dim);
  }

  static EncoderParams initialize(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    EncoderParams p;
    p.config = cfg;
    Rng rng(derive_key(seed, "encoder-init"));
    const std::size_t d = cfg.dim;
    auto normal = [&](const std::string& name, Shape shape) {
      Tensor t(std::move(shape));
      for (double& v : t.data()) v = cfg.init_std * rng.normal();
      round_to_f32(t);
      return Parameter(name, std::move(t));
    };
    auto constant = [](const std::string& name, std::size_t n, double v) { return Parameter(name, Tensor({n}, v)); };
    p.token_embedding = normal("token_embedding", {cfg.vocab_size, d});
    p.position_embedding = normal("position_embedding", {cfg.max_len, d});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      EncoderLayer layer;
      layer.ln1_gain = constant(pre + "ln1_gain", d, 1.0);
      layer.ln1_shift = constant(pre + "ln1_shift", d, 0.0);
      layer.wq = normal(pre + "wq", {d, d});
      layer.wk = normal(pre + "wk", {d, d});
      layer.wv = normal(pre + "wv", {d, d});
      layer.wo = normal(pre + "wo", {d, d});
      layer.ln2_gain = constant(pre + "ln2_gain", d, 1.0);
      layer.ln2_shift = constant(pre + "ln2_shift", d, 0.0);
      layer.ff_in = normal(pre + "ff_in", {d, 4 * d});
      layer.ff_out = normal(pre + "ff_out", {4 * d, d});
      p.layers.push_back(std::move(layer));
    }
    return p;
  }

  // Serialization order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = {&token_embedding, &position_embedding};
    for (auto& l : layers) {
      for (Parameter* q : {&l.ln1_gain, &l.ln1_shift, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain, &l.ln2_shift,
                           &l.ff_in, &l.ff_out}) {
        out.push_back(q);
      }
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<EncoderParams*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
  }

  static constexpr std::string_view kMagic = "EMBH1";

  // Header {magic, V, d_s, L, heads, max_len} as little-endian u32, then
  // every parameter in parameters() order as little-endian f32, row-major.
  void save(std::ostream& out) const {
    binio::put_bytes(out, kMagic);
    for (std::size_t v : {config.vocab_size, config.dim, config.layers, config.heads, config.max_len}) {
      binio::put(out, static_cast<std::uint32_t>(v));
    }
    for (const Parameter* p : parameters())
      for (double v : p->value.data()) binio::put_f32(out, v);
    if (!out) throw DataError("failed writing encoder parameters");
  }

  static EncoderParams load(std::istream& in, double dropout = 0.10) {
    binio::expect_magic(in, kMagic, "encoder checkpoint");
    EncoderConfig cfg;
    cfg.vocab_size = binio::get<std::uint32_t>(in, "vocab size");
    cfg.dim = binio::get<std::uint32_t>(in, "dim");
    cfg.layers = binio::get<std::uint32_t>(in, "layers");
    cfg.heads = binio::get<std::uint32_t>(in, "heads");
    cfg.max_len = binio::get<std::uint32_t>(in, "max_len");
    cfg.dropout = dropout;
    cfg.validate();
    EncoderParams p = initialize_shapes(cfg);
    for (Parameter* q : p.parameters())
      for (double& v : q->value.data()) v = binio::get_f32(in, "encoder parameters");
    return p;
  }

 private:
  static EncoderParams initialize_shapes(const EncoderConfig& cfg) {
    EncoderConfig zero = cfg;
    zero.init_std = 0.0;
    return initialize(zero, 0);
  }
};

// An encoder bound to a tape, either as trainable leaves (gradients flow into
// the parameters) or as frozen views for inference.
class EncoderGraph {
 public:
  EncoderGraph(Tape& tape, EncoderParams& params) : tape_(tape), params_(params), trainable_(&params) { bind(); }
  EncoderGraph(Tape& tape, const EncoderParams& params) : tape_(tape), params_(params) { bind(); }

  // Pooled last-layer representation, not normalized. Padded positions are
  // excluded from attention keys and from the pool; since every other op is
  // position-wise, the unmasked positions are gathered up front and the
  // blocks run on them alone.
  Var pooled(std::span<const std::size_t> ids, const std::vector<bool>& mask, bool train_mode, Rng* rng) {
    const EncoderConfig& cfg = params_.config;
    if (ids.size() > cfg.max_len) {
      throw ShapeError("sequence of length " + std::to_string(ids.size()) + " exceeds max_len " +
                       std::to_string(cfg.max_len));
    }
    if (mask.size() != ids.size()) throw ShapeError("mask length differs from id count");
    std::vector<std::size_t> tok, pos;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!mask[i]) continue;
      tok.push_back(ids[i]);
      pos.push_back(i);
    }
    if (tok.empty()) throw ShapeError("cannot encode an all-masked sequence");
    const double p = train_mode ? cfg.dropout : 0.0;
    if (p > 0.0 && rng == nullptr) throw ConfigError("train-mode dropout needs a random stream");

    Parameter* tok_grad = trainable_ ? &trainable_->token_embedding : nullptr;
    Parameter* pos_grad = trainable_ ? &trainable_->position_embedding : nullptr;
    Var x = ad::add(ad::gather_rows(tape_, params_.token_embedding.value, tok, tok_grad),
                    ad::gather_rows(tape_, params_.position_embedding.value, pos, pos_grad));
    if (p > 0.0) x = ad::dropout(x, p, *rng);

    const std::size_t head_dim = cfg.dim / cfg.heads;
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (const BoundLayer& l : layers_) {
      Var h = ad::layer_norm(x, l.ln1_gain, l.ln1_shift);
      Var q = ad::matmul(h, l.wq), k = ad::matmul(h, l.wk), v = ad::matmul(h, l.wv);
      std::vector<Var> heads;
      heads.reserve(cfg.heads);
      for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
        const std::size_t off = hd * head_dim;
        Var scores = ad::scale(ad::matmul_bt(ad::slice_cols(q, off, head_dim), ad::slice_cols(k, off, head_dim)),
                               score_scale);
        heads.push_back(ad::matmul(ad::softmax_rows(scores), ad::slice_cols(v, off, head_dim)));
      }
      Var attn = ad::matmul(cfg.heads == 1 ? heads.front() : ad::concat_cols(heads), l.wo);
      if (p > 0.0) attn = ad::dropout(attn, p, *rng);
      x = ad::add(x, attn);

      Var h2 = ad::layer_norm(x, l.ln2_gain, l.ln2_shift);
      Var ff = ad::matmul(ad::gelu(ad::matmul(h2, l.ff_in)), l.ff_out);
      if (p > 0.0) ff = ad::dropout(ff, p, *rng);
      x = ad::add(x, ff);
    }
    return ad::mean_pool(x, std::vector<bool>(tok.size(), true));
  }

  Var pooled(const EncodedText& text, bool train_mode, Rng* rng) { return pooled(text.ids, text.mask, train_mode, rng); }

 private:
  struct BoundLayer {
    Var ln1_gain, ln1_shift, wq, wk, wv, wo, ln2_gain, ln2_shift, ff_in, ff_out;
  };

  void bind() {
    for (std::size_t i = 0; i < params_.layers.size(); ++i) {
      auto leaf = [&](Parameter EncoderLayer::*field) {
        return trainable_ ? tape_.param(trainable_->layers[i].*field) : tape_.frozen((params_.layers[i].*field).value);
      };
      layers_.push_back({leaf(&EncoderLayer::ln1_gain), leaf(&EncoderLayer::ln1_shift), leaf(&EncoderLayer::wq),
                         leaf(&EncoderLayer::wk), leaf(&EncoderLayer::wv), leaf(&EncoderLayer::wo),
                         leaf(&EncoderLayer::ln2_gain), leaf(&EncoderLayer::ln2_shift), leaf(&EncoderLayer::ff_in),
                         leaf(&EncoderLayer::ff_out)});
    }
  }

  Tape& tape_;
  const EncoderParams& params_;
  EncoderParams* trainable_ = nullptr;
  std::vector<BoundLayer> layers_;
};

// Inference convenience: pooled d_s vector for one sequence.
inline Tensor encode_pooled(const EncoderParams& params, std::span<const std::size_t> ids,
                            const std::vector<bool>& mask, bool train_mode = false, Rng* rng = nullptr) {
  Tape tape;
  EncoderGraph graph(tape, params);
  return graph.pooled(ids, mask, train_mode, rng).value();
}

}  // namespace embsteal
