#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mvr/io.hpp"
#include "mvr/ops.hpp"
#include "mvr/rng.hpp"
#include "mvr/special_tokens.hpp"

// Encoder stack plus the two single-layer decoders (bidirectional
// auto-encoding, causal auto-regressive). The token embedding matrix is one
// shared tensor: input lookup, the vocabulary projection of the lm head, and
// the decoders all alias the same storage.

namespace mvr {

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t hidden_size = 64;
  std::uint32_t num_encoder_layers = 4;
  std::uint32_t num_heads = 4;
  std::uint32_t max_seq_len = 68;
  std::uint32_t decoder_layers = 1;  // each decoder is a single layer
  std::uint32_t ffn_multiplier = 4;

  void validate() const {
    if (vocab_size <= kNumReservedIds) throw DataError("config: vocab_size too small");
    if (hidden_size == 0 || num_heads == 0 || hidden_size % num_heads != 0) {
      throw DataError("config: hidden_size must be a positive multiple of num_heads");
    }
    if (num_encoder_layers == 0) throw DataError("config: need at least one encoder layer");
    if (decoder_layers != 1) throw DataError("config: decoders are fixed at one layer");
    if (max_seq_len < 3) throw DataError("config: max_seq_len too small");
  }
};

struct EmbeddingTable {
  Tensor tokens;     // V x d; shared between lookup and the lm projection
  Tensor positions;  // max_seq_len x d; shared by encoder and decoders
  Tensor lm_bias;    // 1 x V
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderOutput {
  Tensor last_hidden;  // (len, d); row 0 is the CLS position
};

namespace detail {

inline LayerParams init_layer(std::size_t d, std::size_t ffn, Rng& rng) {
  auto w = [&rng](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, 0.02);
    return Tensor::from_values({r, c}, std::move(v), true);
  };
  LayerParams lp;
  lp.wq = w(d, d);
  lp.bq = Tensor::zeros({1, d}, true);
  lp.wk = w(d, d);
  lp.bk = Tensor::zeros({1, d}, true);
  lp.wv = w(d, d);
  lp.bv = Tensor::zeros({1, d}, true);
  lp.wo = w(d, d);
  lp.bo = Tensor::zeros({1, d}, true);
  lp.ln1_gain = Tensor::filled({1, d}, 1.0, true);
  lp.ln1_bias = Tensor::zeros({1, d}, true);
  lp.ffn_w1 = w(d, ffn);
  lp.ffn_b1 = Tensor::zeros({1, ffn}, true);
  lp.ffn_w2 = w(ffn, d);
  lp.ffn_b2 = Tensor::zeros({1, d}, true);
  lp.ln2_gain = Tensor::filled({1, d}, 1.0, true);
  lp.ln2_bias = Tensor::zeros({1, d}, true);
  return lp;
}

template <typename F>
void visit_layer(const std::string& prefix, LayerParams& lp, F&& f) {
  f(prefix + ".wq", lp.wq);
  f(prefix + ".bq", lp.bq);
  f(prefix + ".wk", lp.wk);
  f(prefix + ".bk", lp.bk);
  f(prefix + ".wv", lp.wv);
  f(prefix + ".bv", lp.bv);
  f(prefix + ".wo", lp.wo);
  f(prefix + ".bo", lp.bo);
  f(prefix + ".ln1_gain", lp.ln1_gain);
  f(prefix + ".ln1_bias", lp.ln1_bias);
  f(prefix + ".ffn_w1", lp.ffn_w1);
  f(prefix + ".ffn_b1", lp.ffn_b1);
  f(prefix + ".ffn_w2", lp.ffn_w2);
  f(prefix + ".ffn_b2", lp.ffn_b2);
  f(prefix + ".ln2_gain", lp.ln2_gain);
  f(prefix + ".ln2_bias", lp.ln2_bias);
}

/// Additive attention mask: 0 where position j may be attended from i,
/// -1e9 otherwise (exp underflows to exactly 0, so blocked keys contribute
/// nothing, bit-exactly). Undefined tensor when nothing is blocked.
inline Tensor attention_bias(const std::vector<std::uint8_t>& key_mask, bool causal) {
  const std::size_t len = key_mask.size();
  bool any_pad = false;
  for (std::uint8_t m : key_mask) any_pad = any_pad || (m == 0);
  if (!any_pad && !causal) return Tensor();
  std::vector<double> bias(len * len, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      const bool blocked = (key_mask[j] == 0) || (causal && j > i);
      if (blocked) bias[i * len + j] = -1e9;
    }
  }
  return Tensor::from_values({len, len}, std::move(bias));
}

inline Tensor attention(const LayerParams& lp, const Tensor& x, const Tensor& bias,
                        std::size_t num_heads) {
  const std::size_t d = x.shape()[1];
  const std::size_t dh = d / num_heads;
  Tensor q = add_row_broadcast(matmul(x, lp.wq), lp.bq);
  Tensor k = add_row_broadcast(matmul(x, lp.wk), lp.bk);
  Tensor v = add_row_broadcast(matmul(x, lp.wv), lp.bv);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    if (bias.defined()) scores = add(scores, bias);
    heads.push_back(matmul(softmax(scores), vh));
  }
  return add_row_broadcast(matmul(concat_cols(heads), lp.wo), lp.bo);
}

/// Pre-LN transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
inline Tensor transformer_layer(const LayerParams& lp, const Tensor& x, const Tensor& bias,
                                std::size_t num_heads) {
  Tensor x1 = add(x, attention(lp, layer_norm(x, lp.ln1_gain, lp.ln1_bias), bias, num_heads));
  Tensor normed = layer_norm(x1, lp.ln2_gain, lp.ln2_bias);
  Tensor hidden = gelu(add_row_broadcast(matmul(normed, lp.ffn_w1), lp.ffn_b1));
  Tensor f = add_row_broadcast(matmul(hidden, lp.ffn_w2), lp.ffn_b2);
  return add(x1, f);
}

}  // namespace detail

/// Shared encoder machinery: embedding, L-layer stack, final norm, lm head.
struct EncoderStack {
  ModelConfig config;
  EmbeddingTable emb;
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;

  void init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    config = cfg;
    const std::size_t v = cfg.vocab_size, d = cfg.hidden_size;
    const std::size_t ffn = d * cfg.ffn_multiplier;
    auto normal_mat = [&rng](std::size_t r, std::size_t c) {
      std::vector<double> vals(r * c);
      for (auto& x : vals) x = rng.normal(0.0, 0.02);
      return Tensor::from_values({r, c}, std::move(vals), true);
    };
    emb.tokens = normal_mat(v, d);
    emb.positions = normal_mat(cfg.max_seq_len, d);
    emb.lm_bias = Tensor::zeros({1, v}, true);
    layers.clear();
    for (std::size_t l = 0; l < cfg.num_encoder_layers; ++l) {
      layers.push_back(detail::init_layer(d, ffn, rng));
    }
    final_gain = Tensor::filled({1, d}, 1.0, true);
    final_bias = Tensor::zeros({1, d}, true);
  }

  template <typename F>
  void for_each_param(F&& f) {
    f("emb.tokens", emb.tokens);
    f("emb.positions", emb.positions);
    f("emb.lm_bias", emb.lm_bias);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      detail::visit_layer("enc." + std::to_string(l), layers[l], f);
    }
    f("enc.final_gain", final_gain);
    f("enc.final_bias", final_bias);
  }

  void check_tokens(const std::vector<int>& tokens,
                    const std::vector<std::uint8_t>& attn_mask) const {
    if (tokens.empty()) throw DataError("encode: empty input");
    if (tokens.size() > config.max_seq_len) {
      throw DataError("encode: input of length " + std::to_string(tokens.size()) +
                      " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    if (attn_mask.size() != tokens.size()) {
      throw DataError("encode: attention mask length mismatch");
    }
    for (int id : tokens) {
      if (id < 0 || static_cast<std::uint32_t>(id) >= config.vocab_size) {
        throw DataError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(config.vocab_size));
      }
    }
    if (tokens[0] != kClsId || attn_mask[0] == 0) {
      throw DataError("encode: position 0 must be a live CLS token");
    }
    std::size_t last = tokens.size();
    for (std::size_t i = tokens.size(); i-- > 0;) {
      if (attn_mask[i]) {
        last = i;
        break;
      }
    }
    if (last == tokens.size() || tokens[last] != kSepId) {
      throw DataError("encode: terminal non-pad position must be SEP");
    }
  }

  /// Token + learned absolute position embeddings.
  Tensor embed(const std::vector<int>& tokens) const {
    Tensor tok = embedding_lookup(emb.tokens, tokens);
    std::vector<std::size_t> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    return add(tok, gather_rows(emb.positions, pos));
  }

  EncoderOutput encode(const std::vector<int>& tokens,
                       const std::vector<std::uint8_t>& attn_mask) const {
    check_tokens(tokens, attn_mask);
    Tensor bias = detail::attention_bias(attn_mask, /*causal=*/false);
    Tensor x = embed(tokens);
    for (const LayerParams& lp : layers) {
      x = detail::transformer_layer(lp, x, bias, config.num_heads);
    }
    return {layer_norm(x, final_gain, final_bias)};
  }

  EncoderOutput encode(const std::vector<int>& tokens) const {
    return encode(tokens, std::vector<std::uint8_t>(tokens.size(), 1));
  }

  /// hidden . E^T + b over the shared embedding matrix.
  Tensor lm_logits(const Tensor& hidden) const {
    if (hidden.cols() != config.hidden_size) {
      throw ShapeError("lm_logits: hidden width " + shape_str(hidden.shape()) +
                       " does not match hidden_size " + std::to_string(config.hidden_size));
    }
    return add_row_broadcast(matmul_nt(hidden, emb.tokens), emb.lm_bias);
  }
};

/// Retriever model: encoder plus AE and AR decoders. Decoder heads reuse the
/// encoder's embedding matrix and lm bias, so each decoder owns exactly one
/// transformer layer (plus its final norm).
class Model {
 public:
  EncoderStack enc;
  LayerParams ae_dec;
  Tensor ae_final_gain, ae_final_bias;
  LayerParams ar_dec;
  Tensor ar_final_gain, ar_final_bias;

  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_keys({seed, fnv1a("model-init")}));
    enc.init(cfg, rng);
    const std::size_t d = cfg.hidden_size;
    const std::size_t ffn = d * cfg.ffn_multiplier;
    ae_dec = detail::init_layer(d, ffn, rng);
    ae_final_gain = Tensor::filled({1, d}, 1.0, true);
    ae_final_bias = Tensor::zeros({1, d}, true);
    ar_dec = detail::init_layer(d, ffn, rng);
    ar_final_gain = Tensor::filled({1, d}, 1.0, true);
    ar_final_bias = Tensor::zeros({1, d}, true);
  }

  const ModelConfig& config() const { return enc.config; }

  EncoderOutput encode(const std::vector<int>& tokens,
                       const std::vector<std::uint8_t>& attn_mask) const {
    return enc.encode(tokens, attn_mask);
  }
  EncoderOutput encode(const std::vector<int>& tokens) const { return enc.encode(tokens); }

  Tensor lm_logits(const Tensor& hidden) const { return enc.lm_logits(hidden); }

  /// Bidirectional single-layer decoding; logits over V at every position.
  Tensor decode_ae(const Tensor& input_embeddings,
                   const std::vector<std::uint8_t>& attn_mask) const {
    check_decoder_input(input_embeddings, attn_mask);
    Tensor bias = detail::attention_bias(attn_mask, /*causal=*/false);
    Tensor h = detail::transformer_layer(ae_dec, input_embeddings, bias, enc.config.num_heads);
    return enc.lm_logits(layer_norm(h, ae_final_gain, ae_final_bias));
  }

  /// Causal single-layer decoding: position i attends only to positions <= i.
  Tensor decode_ar(const Tensor& input_embeddings,
                   const std::vector<std::uint8_t>& attn_mask) const {
    check_decoder_input(input_embeddings, attn_mask);
    Tensor bias = detail::attention_bias(attn_mask, /*causal=*/true);
    Tensor h = detail::transformer_layer(ar_dec, input_embeddings, bias, enc.config.num_heads);
    return enc.lm_logits(layer_norm(h, ar_final_gain, ar_final_bias));
  }

  template <typename F>
  void for_each_param(F&& f) {
    enc.for_each_param(f);
    detail::visit_layer("ae_dec", ae_dec, f);
    f("ae_dec.final_gain", ae_final_gain);
    f("ae_dec.final_bias", ae_final_bias);
    detail::visit_layer("ar_dec", ar_dec, f);
    f("ar_dec.final_gain", ar_final_gain);
    f("ar_dec.final_bias", ar_final_bias);
  }

  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_param([&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  /// Same parameter storage, fresh gradient slots. Tapes built over the
  /// proxy can run on another thread without touching this model's grads.
  Model grad_proxy() {
    Model m = *this;
    m.for_each_param([](const std::string&, Tensor& t) { t = t.shared_data_proxy(); });
    return m;
  }

 private:
  void check_decoder_input(const Tensor& x, const std::vector<std::uint8_t>& attn_mask) const {
    if (x.rank() != 2 || x.shape()[1] != enc.config.hidden_size) {
      throw ShapeError("decode: input embeddings " + shape_str(x.shape()) +
                       " do not match hidden_size " + std::to_string(enc.config.hidden_size));
    }
    if (x.shape()[0] > enc.config.max_seq_len) {
      throw DataError("decode: sequence longer than max_seq_len");
    }
    if (attn_mask.size() != x.shape()[0]) {
      throw ShapeError("decode: attention mask length mismatch");
    }
  }
};

/// Single-tower cross-encoder: encoder stack with a scalar relevance head
/// over the CLS state.
class Reranker {
 public:
  EncoderStack enc;
  Tensor score_w;  // d x 1
  Tensor score_b;  // 1 x 1

  Reranker() = default;

  Reranker(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_keys({seed, fnv1a("reranker-init")}));
    enc.init(cfg, rng);
    init_head(rng);
  }

  /// Encoder weights warm-started from an existing stack (e.g. a pre-trained
  /// retriever checkpoint); the scalar head is fresh.
  Reranker(const EncoderStack& stack, std::uint64_t seed) {
    enc = stack;
    enc.for_each_param([](const std::string&, Tensor& t) { t = t.deep_copy(true); });
    Rng rng(mix_keys({seed, fnv1a("reranker-head-init")}));
    init_head(rng);
  }

  const ModelConfig& config() const { return enc.config; }

  /// Relevance score of a single [CLS] query [SEP] passage [SEP] sequence.
  Tensor score(const std::vector<int>& tokens) const {
    EncoderOutput out = enc.encode(tokens);
    Tensor cls = gather_rows(out.last_hidden, {0});
    return add(matmul(cls, score_w), score_b);
  }

  template <typename F>
  void for_each_param(F&& f) {
    enc.for_each_param(f);
    f("head.w", score_w);
    f("head.b", score_b);
  }

  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_param([&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  Reranker grad_proxy() {
    Reranker r = *this;
    r.for_each_param([](const std::string&, Tensor& t) { t = t.shared_data_proxy(); });
    return r;
  }

 private:
  void init_head(Rng& rng) {
    const std::size_t d = enc.config.hidden_size;
    std::vector<double> w(d);
    for (auto& x : w) x = rng.normal(0.0, 0.02);
    score_w = Tensor::from_values({d, 1}, std::move(w), true);
    score_b = Tensor::zeros({1, 1}, true);
  }
};

// ---------------------------------------------------------------------------
// checkpoint format: magic "MVM1", little-endian.
// u32 kind (0 retriever, 1 reranker), 7 x u32 config fields, u32 param count,
// then per parameter: name (u32 len + bytes), u32 rank, u64 extents, raw f64s.

namespace detail {

inline void write_config(std::ostream& out, const ModelConfig& c, std::uint32_t kind) {
  bin::write_magic(out, "MVM1");
  bin::write_u32(out, kind);
  bin::write_u32(out, c.vocab_size);
  bin::write_u32(out, c.hidden_size);
  bin::write_u32(out, c.num_encoder_layers);
  bin::write_u32(out, c.num_heads);
  bin::write_u32(out, c.max_seq_len);
  bin::write_u32(out, c.decoder_layers);
  bin::write_u32(out, c.ffn_multiplier);
}

inline ModelConfig read_config(std::istream& in, std::uint32_t expect_kind,
                               const std::string& path) {
  bin::expect_magic(in, "MVM1", path);
  const std::uint32_t kind = bin::read_u32(in, path);
  if (kind != expect_kind) {
    throw DataError(path + ": checkpoint kind " + std::to_string(kind) + ", expected " +
                    std::to_string(expect_kind));
  }
  ModelConfig c;
  c.vocab_size = bin::read_u32(in, path);
  c.hidden_size = bin::read_u32(in, path);
  c.num_encoder_layers = bin::read_u32(in, path);
  c.num_heads = bin::read_u32(in, path);
  c.max_seq_len = bin::read_u32(in, path);
  c.decoder_layers = bin::read_u32(in, path);
  c.ffn_multiplier = bin::read_u32(in, path);
  c.validate();
  return c;
}

template <typename M>
void save_params(std::ostream& out, M& model) {
  std::uint32_t count = 0;
  model.for_each_param([&count](const std::string&, Tensor&) { ++count; });
  bin::write_u32(out, count);
  model.for_each_param([&out](const std::string& name, Tensor& t) {
    bin::write_string(out, name);
    bin::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) bin::write_u64(out, e);
    bin::write_f64s(out, t.values());
  });
}

template <typename M>
void load_params(std::istream& in, M& model, const std::string& path) {
  const std::uint32_t count = bin::read_u32(in, path);
  std::uint32_t expected = 0;
  model.for_each_param([&expected](const std::string&, Tensor&) { ++expected; });
  if (count != expected) {
    throw DataError(path + ": checkpoint holds " + std::to_string(count) + " parameters, model " +
                    std::to_string(expected));
  }
  model.for_each_param([&in, &path](const std::string& name, Tensor& t) {
    const std::string got = bin::read_string(in, path);
    if (got != name) {
      throw DataError(path + ": parameter " + got + " where " + name + " expected");
    }
    const std::uint32_t rank = bin::read_u32(in, path);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(bin::read_u64(in, path));
      numel *= e;
    }
    if (shape != t.shape()) {
      throw DataError(path + ": parameter " + name + " has shape " + shape_str(shape) +
                      ", expected " + shape_str(t.shape()));
    }
    t.values() = bin::read_f64s(in, numel, path);
  });
}

}  // namespace detail

inline void save_model(Model& m, const std::string& path) {
  std::ofstream out = bin::open_out(path);
  detail::write_config(out, m.config(), 0);
  detail::save_params(out, m);
  if (!out) throw DataError(path + ": write failed");
}

inline Model load_model(const std::string& path) {
  std::ifstream in = bin::open_in(path);
  ModelConfig cfg = detail::read_config(in, 0, path);
  Model m(cfg, 0);
  detail::load_params(in, m, path);
  return m;
}

inline void save_reranker(Reranker& r, const std::string& path) {
  std::ofstream out = bin::open_out(path);
  detail::write_config(out, r.config(), 1);
  detail::save_params(out, r);
  if (!out) throw DataError(path + ": write failed");
}

inline Reranker load_reranker(const std::string& path) {
  std::ifstream in = bin::open_in(path);
  ModelConfig cfg = detail::read_config(in, 1, path);
  Reranker r(cfg, 0);
  detail::load_params(in, r, path);
  return r;
}

}  // namespace mvr
