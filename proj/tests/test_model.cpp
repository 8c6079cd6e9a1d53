#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvr/model.hpp"

using namespace mvr;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.hidden_size = 8;
  c.num_encoder_layers = 1;
  c.num_heads = 2;
  c.max_seq_len = 10;
  return c;
}

std::vector<int> sample_tokens() { return {kClsId, 5, 6, 7, kSepId}; }

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("encode output shape and determinism") {
  Model m(tiny_config(), 42);
  auto toks = sample_tokens();
  EncoderOutput a = m.encode(toks);
  REQUIRE(a.last_hidden.shape() == std::vector<std::size_t>{5, 8});
  EncoderOutput b = m.encode(toks);
  for (std::size_t i = 0; i < a.last_hidden.numel(); ++i) {
    REQUIRE(a.last_hidden.data()[i] == b.last_hidden.data()[i]);
  }
}

TEST_CASE("encode rejects out-of-vocabulary ids") {
  Model m(tiny_config(), 42);
  std::vector<int> toks = {kClsId, 11, 99, kSepId};
  REQUIRE_THROWS_MATCHES(
      m.encode(toks), DataError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("vocabulary")));
}

TEST_CASE("pad tail content does not change non-pad outputs") {
  Model m(tiny_config(), 42);
  std::vector<int> a = {kClsId, 5, 6, kSepId, kPadId, kPadId};
  std::vector<int> b = {kClsId, 5, 6, kSepId, 9, 10};
  std::vector<std::uint8_t> mask = {1, 1, 1, 1, 0, 0};
  Tensor ha = m.encode(a, mask).last_hidden;
  Tensor hb = m.encode(b, mask).last_hidden;
  for (std::size_t i = 0; i < 4 * 8; ++i) REQUIRE(ha.data()[i] == hb.data()[i]);
}

TEST_CASE("lm_logits of zero hidden equals the bias") {
  Model m(tiny_config(), 42);
  for (std::size_t j = 0; j < 12; ++j) m.enc.emb.lm_bias.data()[j] = 0.1 * double(j) - 0.4;
  Tensor zero = Tensor::zeros({2, 8});
  Tensor logits = m.lm_logits(zero);
  REQUIRE(logits.shape() == std::vector<std::size_t>{2, 12});
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 12; ++j) {
      REQUIRE(logits.data()[r * 12 + j] == m.enc.emb.lm_bias.data()[j]);
    }
  }
}

TEST_CASE("lm_logits with orthonormal embeddings ranks the matching row first") {
  ModelConfig c = tiny_config();
  c.vocab_size = 8;
  c.hidden_size = 8;
  Model m(c, 42);
  // identity embedding matrix, zero bias
  for (std::size_t i = 0; i < 64; ++i) m.enc.emb.tokens.data()[i] = (i % 9 == 0) ? 1.0 : 0.0;
  for (std::size_t j = 0; j < 8; ++j) m.enc.emb.lm_bias.data()[j] = 0.0;
  for (int j = 0; j < 8; ++j) {
    Tensor hidden = gather_rows(m.enc.emb.tokens, {static_cast<std::size_t>(j)});
    Tensor logits = m.lm_logits(hidden);
    std::size_t argmax = 0;
    for (std::size_t v = 1; v < 8; ++v) {
      if (logits.data()[v] > logits.data()[argmax]) argmax = v;
    }
    REQUIRE(argmax == static_cast<std::size_t>(j));
  }
}

TEST_CASE("gradient flows through lm_logits into embeddings and bias") {
  Model m(tiny_config(), 42);
  Tensor hidden = Tensor::from_values({1, 8}, std::vector<double>(8, 0.3), true);
  Tensor loss = sum(m.lm_logits(hidden));
  loss.backward();
  REQUIRE(m.enc.emb.tokens.has_grad());
  REQUIRE(m.enc.emb.lm_bias.has_grad());
  double tok_norm = 0.0;
  for (double g : m.enc.emb.tokens.grad()) tok_norm += g * g;
  REQUIRE(tok_norm > 0.0);

  double err = grad_check([&](Tensor& h) { return sum(mul(m.lm_logits(h), m.lm_logits(h))); },
                          hidden);
  CHECK(err <= 1e-6);
}

TEST_CASE("embedding tying: lm head and lookup share storage") {
  Model m(tiny_config(), 42);
  Tensor before = embedding_lookup(m.enc.emb.tokens, {5});
  const double orig = before.data()[0];
  m.enc.emb.tokens.data()[5 * 8 + 0] = orig + 1.5;
  Tensor after = embedding_lookup(m.enc.emb.tokens, {5});
  CHECK(after.data()[0] == orig + 1.5);
  // the lm projection sees the same storage
  Tensor hidden = Tensor::zeros({1, 8});
  hidden.data()[0] = 1.0;
  Tensor logits = m.lm_logits(hidden);
  CHECK(logits.data()[5] == orig + 1.5);
  m.enc.emb.tokens.data()[5 * 8 + 0] = orig;
}

TEST_CASE("decoder causality: earlier logits unchanged by later inputs") {
  Model m(tiny_config(), 7);
  Rng rng(11);
  std::vector<double> emb(5 * 8);
  for (auto& x : emb) x = rng.uniform(-1, 1);
  std::vector<double> emb2 = emb;
  emb2[3 * 8 + 2] += 0.7;  // perturb one coordinate of position 3
  std::vector<std::uint8_t> mask(5, 1);

  Tensor la = m.decode_ar(Tensor::from_values({5, 8}, emb), mask);
  Tensor lb = m.decode_ar(Tensor::from_values({5, 8}, emb2), mask);
  for (std::size_t i = 0; i < 3 * 12; ++i) REQUIRE(la.data()[i] == lb.data()[i]);
  bool later_changed = false;
  for (std::size_t i = 3 * 12; i < 5 * 12; ++i) later_changed |= (la.data()[i] != lb.data()[i]);
  REQUIRE(later_changed);

  // bidirectional decoding does let later positions influence earlier ones
  Tensor ba = m.decode_ae(Tensor::from_values({5, 8}, emb), mask);
  Tensor bb = m.decode_ae(Tensor::from_values({5, 8}, emb2), mask);
  bool earlier_changed = false;
  for (std::size_t i = 0; i < 3 * 12; ++i) earlier_changed |= (ba.data()[i] != bb.data()[i]);
  REQUIRE(earlier_changed);
}

TEST_CASE("grad check through both decoders") {
  Model m(tiny_config(), 7);
  std::vector<std::uint8_t> mask(3, 1);
  Rng rng(5);
  std::vector<double> emb(3 * 8);
  for (auto& x : emb) x = rng.uniform(-1, 1);
  Tensor x = Tensor::from_values({3, 8}, emb);
  CHECK(grad_check([&](Tensor& t) {
          return cross_entropy_with_logits(m.decode_ae(t, mask), {1, 4, 2});
        }, x) <= 1e-5);
  CHECK(grad_check([&](Tensor& t) {
          return cross_entropy_with_logits(m.decode_ar(t, mask), {1, 4, 2});
        }, x) <= 1e-5);
}

TEST_CASE("grad check through full encoder wrt a weight matrix") {
  Model m(tiny_config(), 3);
  auto toks = sample_tokens();
  Tensor& wq = m.enc.layers[0].wq;
  double err = grad_check(
      [&](Tensor&) {
        EncoderOutput out = m.encode(toks);
        return sum(mul(out.last_hidden, out.last_hidden));
      },
      wq);
  CHECK(err <= 1e-5);
}

TEST_CASE("each decoder owns exactly one transformer layer of parameters") {
  Model m(tiny_config(), 1);
  const std::size_t d = 8, ffn = 32;
  const std::size_t layer_numel = 4 * (d * d) + 4 * d    // attention mats + biases
                                  + 2 * d                // ln1
                                  + d * ffn + ffn        // ffn in
                                  + ffn * d + d          // ffn out
                                  + 2 * d;               // ln2
  std::size_t ae_numel = 0, ar_numel = 0;
  m.for_each_param([&](const std::string& name, Tensor& t) {
    if (name.rfind("ae_dec.", 0) == 0) ae_numel += t.numel();
    if (name.rfind("ar_dec.", 0) == 0) ar_numel += t.numel();
  });
  CHECK(ae_numel == layer_numel + 2 * d);  // + final norm
  CHECK(ar_numel == layer_numel + 2 * d);
}

TEST_CASE("checkpoint load then save is byte-identical") {
  Model m(tiny_config(), 99);
  const std::string p1 = "test_ckpt_a.mvm";
  const std::string p2 = "test_ckpt_b.mvm";
  save_model(m, p1);
  Model loaded = load_model(p1);
  save_model(loaded, p2);
  REQUIRE(file_bytes(p1) == file_bytes(p2));

  // loaded values match
  auto pa = m.parameters();
  auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    REQUIRE(pa[i].second.values() == pb[i].second.values());
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("reranker scores are finite and checkpoint round-trips") {
  Reranker r(tiny_config(), 5);
  std::vector<int> toks = {kClsId, 5, kSepId, 7, 8, kSepId};
  Tensor s = r.score(toks);
  REQUIRE(s.numel() == 1);
  REQUIRE(std::isfinite(s.item()));

  const std::string p1 = "test_rr_a.mvm";
  const std::string p2 = "test_rr_b.mvm";
  save_reranker(r, p1);
  Reranker loaded = load_reranker(p1);
  save_reranker(loaded, p2);
  REQUIRE(file_bytes(p1) == file_bytes(p2));
  REQUIRE_THROWS_AS(load_model(p1), DataError);  // kind mismatch
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("grad proxy accumulates into its own slots over shared storage") {
  Model m(tiny_config(), 13);
  Model proxy = m.grad_proxy();
  REQUIRE(proxy.enc.emb.tokens.data() == m.enc.emb.tokens.data());
  REQUIRE(proxy.enc.emb.tokens.node() != m.enc.emb.tokens.node());

  auto toks = sample_tokens();
  sum(mul(proxy.encode(toks).last_hidden, proxy.encode(toks).last_hidden)).backward();
  REQUIRE(proxy.enc.emb.tokens.has_grad());
  REQUIRE_FALSE(m.enc.emb.tokens.has_grad());
}
