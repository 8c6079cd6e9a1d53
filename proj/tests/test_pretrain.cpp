#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "mvr/pretrain.hpp"

using namespace mvr;

namespace {

struct TestWorld {
  Corpus corpus;
  Vocab vocab;
  ModelConfig mcfg;
};

TestWorld make_world(std::uint32_t topics = 4, std::uint32_t docs = 3,
                     std::uint32_t passages = 3) {
  SyntheticSpec s;
  s.topics = topics;
  s.vocab_per_topic = 8;
  s.docs_per_topic = docs;
  s.passages_per_doc = passages;
  s.shared_vocab = 12;
  s.passage_min_tokens = 6;
  s.passage_max_tokens = 10;
  s.train_queries = 4;
  s.dev_queries = 4;
  s.seed = 7;
  SyntheticData data = generate_synthetic(s);
  std::vector<std::string> texts;
  for (const auto& p : data.passages) texts.push_back(p.text);
  TestWorld w;
  w.vocab = build_vocab(texts, 4096);
  w.corpus = tokenize_corpus(data.passages, w.vocab, 32);
  w.mcfg.vocab_size = static_cast<std::uint32_t>(w.vocab.size());
  w.mcfg.hidden_size = 16;
  w.mcfg.num_encoder_layers = 1;
  w.mcfg.num_heads = 2;
  w.mcfg.max_seq_len = 34;
  return w;
}

ContextualPair pair_from(const Corpus& corpus, const PretrainConfig& cfg, std::size_t a = 0,
                         std::size_t b = 1) {
  PairSample sample{corpus.passages[a].doc_id, a, b, corpus.passages[a].position,
                    corpus.passages[b].position};
  return materialize_pair(corpus, sample, cfg, 0);
}

Model zero_model(const ModelConfig& cfg) {
  Model m(cfg, 0);
  m.for_each_param([](const std::string&, Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
  });
  return m;
}

}  // namespace

TEST_CASE("contextual pair enumeration") {
  Vocab v = build_vocab({"w0 w1 w2 w3 w4 w5 w6 w7 w8 w9"}, 100);
  auto passage = [&](const std::string& doc, std::uint32_t pos) {
    return PassageRecord{doc + "-p" + std::to_string(pos), doc, pos, v.encode("w1 w2 w3")};
  };

  SECTION("two-passage document with window 2 gives both orientations") {
    Corpus c = Corpus::from_records({passage("a", 0), passage("a", 1)});
    auto pairs = sample_contextual_pairs(c, 2);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].target_pos == 0);
    CHECK(pairs[0].context_pos == 1);
    CHECK(pairs[1].target_pos == 1);
    CHECK(pairs[1].context_pos == 0);
  }

  SECTION("single-passage document yields nothing and is counted") {
    Corpus c = Corpus::from_records({passage("solo", 0)});
    PretrainCounters counters;
    auto pairs = sample_contextual_pairs(c, 2, &counters);
    CHECK(pairs.empty());
    CHECK(counters.single_passage_docs_skipped == 1);
  }

  SECTION("five-passage document with window 1 gives 8 ordered pairs") {
    std::vector<PassageRecord> recs;
    for (std::uint32_t p = 0; p < 5; ++p) recs.push_back(passage("d", p));
    Corpus c = Corpus::from_records(recs);
    auto pairs = sample_contextual_pairs(c, 1);
    CHECK(pairs.size() == 8);
    for (const auto& pr : pairs) {
      const std::uint32_t dist = pr.target_pos > pr.context_pos
                                     ? pr.target_pos - pr.context_pos
                                     : pr.context_pos - pr.target_pos;
      CHECK(dist == 1);
    }
  }
}

TEST_CASE("apply_mask contract") {
  std::vector<int> tokens(10, 7);
  SECTION("ratio 0.3 on 10 tokens masks exactly 3") {
    Rng rng(1);
    auto [masked, positions] = apply_mask(tokens, 0.3, rng);
    REQUIRE(positions.size() == 3);
    std::size_t mask_count = 0;
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if (masked[i] == kMaskId) ++mask_count;
    }
    CHECK(mask_count == 3);
    for (std::size_t p : positions) CHECK(masked[p] == kMaskId);
  }
  SECTION("tiny ratio still masks at least one") {
    Rng rng(2);
    auto [masked, positions] = apply_mask(tokens, 0.01, rng);
    CHECK(positions.size() == 1);
  }
  SECTION("fixed seed reproduces the mask set") {
    Rng r1(99), r2(99);
    auto a = apply_mask(tokens, 0.4, r1);
    auto b = apply_mask(tokens, 0.4, r2);
    CHECK(a.second == b.second);
  }
}

TEST_CASE("uniform-logit model yields ln V losses") {
  TestWorld w = make_world();
  Model m = zero_model(w.mcfg);
  PretrainConfig cfg;
  cfg.seed = 5;
  ContextualPair pair = pair_from(w.corpus, cfg);
  ExampleLosses losses = pretrain_example_loss(m, pair, ViewMode::kBoth, DecoderMode::kBoth);
  const double lnv = std::log(static_cast<double>(w.mcfg.vocab_size));
  CHECK(losses.enc.item() == Catch::Approx(lnv).margin(1e-9));
  CHECK(losses.ae.item() == Catch::Approx(lnv).margin(1e-9));
  CHECK(losses.ar.item() == Catch::Approx(lnv).margin(1e-9));
}

TEST_CASE("total loss decomposes bit-exactly") {
  TestWorld w = make_world();
  Model m(w.mcfg, 11);
  PretrainConfig cfg;
  ContextualPair pair = pair_from(w.corpus, cfg);
  for (auto view : {ViewMode::kBoth, ViewMode::kDense, ViewMode::kSparse}) {
    for (auto dec : {DecoderMode::kBoth, DecoderMode::kAe, DecoderMode::kAr}) {
      ExampleLosses l = pretrain_example_loss(m, pair, view, dec);
      double sum = l.enc.item();
      if (l.ae.defined()) sum += l.ae.item();
      if (l.ar.defined()) sum += l.ar.item();
      REQUIRE(l.total.item() == sum);
      CHECK((dec != DecoderMode::kAr) == l.ae.defined());
      CHECK((dec != DecoderMode::kAe) == l.ar.defined());
    }
  }
}

TEST_CASE("build_decoder_input puts the view embedding at position zero") {
  TestWorld w = make_world();
  Model m(w.mcfg, 3);
  const std::size_t d = w.mcfg.hidden_size;
  std::vector<double> repv(d);
  for (std::size_t i = 0; i < d; ++i) repv[i] = 0.1 * static_cast<double>(i);
  Tensor rep = Tensor::from_values({1, d}, repv);
  std::vector<int> ctx = {5, 6, kSepId};
  Tensor input = build_decoder_input(m, rep, ctx);
  REQUIRE(input.shape() == std::vector<std::size_t>{4, d});
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(input.data()[j] == repv[j] + m.enc.emb.positions.data()[j]);
  }
  // zero sparse vector => position 0 is the positional embedding alone
  Tensor zero_rep = sparse_injection(Tensor::zeros({1, w.mcfg.vocab_size}), m.enc.emb.tokens);
  Tensor input2 = build_decoder_input(m, zero_rep, ctx);
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(input2.data()[j] == m.enc.emb.positions.data()[j]);
  }
}

TEST_CASE("decoder losses send gradient back into encoder parameters") {
  TestWorld w = make_world();
  Model m(w.mcfg, 13);
  PretrainConfig cfg;
  ContextualPair pair = pair_from(w.corpus, cfg);
  for (auto view : {ViewMode::kDense, ViewMode::kSparse}) {
    m.for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
    ExampleLosses l = pretrain_example_loss(m, pair, view, DecoderMode::kBoth);
    Tensor dec_only = add(l.ae, l.ar);
    dec_only.backward();
    double wq_norm = 0.0;
    for (double g : m.enc.layers[0].wq.grad()) wq_norm += g * g;
    CHECK(wq_norm > 0.0);
  }
}

TEST_CASE("SPR-view injection is detached from the embedding matrix on the tape") {
  TestWorld w = make_world();
  Model m(w.mcfg, 17);
  PretrainConfig cfg;
  ContextualPair pair = pair_from(w.corpus, cfg);
  ExampleLosses l = pretrain_example_loss(m, pair, ViewMode::kSparse, DecoderMode::kBoth);
  std::size_t injections = 0;
  for (mvr::detail::Node* n : l.total.topo_order()) {
    if (std::string(n->op) == "sparse_injection") {
      ++injections;
      REQUIRE(n->parents.size() == 2);
      mvr::detail::Node* table_side = n->parents[1].node();
      CHECK(std::string(table_side->op) == "detach");
      CHECK_FALSE(table_side->requires_grad);
      CHECK(table_side->parents.empty());
      CHECK(table_side != m.enc.emb.tokens.node());
    }
  }
  CHECK(injections == 2);  // one per decoder
}

TEST_CASE("grad check of the full pre-training loss on a 2-token instance") {
  TestWorld w = make_world();
  ModelConfig small = w.mcfg;
  small.hidden_size = 8;
  small.num_heads = 2;
  small.vocab_size = 16;
  small.max_seq_len = 8;
  Model m(small, 23);
  ContextualPair pair;
  pair.doc_id = "d";
  pair.target_tokens = {6, 7};
  pair.context_tokens = {8, 9};
  pair.enc_mask_positions = {1};
  pair.dec_mask_positions = {0};

  auto full_loss = [&]() {
    return pretrain_example_loss(m, pair, ViewMode::kBoth, DecoderMode::kBoth).total;
  };
  Tensor& wq = m.enc.layers[0].wq;
  wq.zero_grad();
  CHECK(grad_check([&](Tensor&) { return full_loss(); }, wq) <= 1e-5);
  Tensor& emb = m.enc.emb.tokens;
  emb.zero_grad();
  CHECK(grad_check([&](Tensor&) { return full_loss(); }, emb) <= 1e-5);
}

TEST_CASE("grad check of sparse pooling composed with a dot product") {
  TestWorld w = make_world();
  ModelConfig small = w.mcfg;
  small.vocab_size = 16;
  small.hidden_size = 8;
  small.num_heads = 2;
  small.max_seq_len = 8;
  Model m(small, 29);
  std::vector<int> toks = {kClsId, 6, 7, kSepId};
  Tensor weights = Tensor::filled({1, 16}, 0.35);
  Tensor& wq = m.enc.layers[0].wq;
  wq.zero_grad();
  double err = grad_check(
      [&](Tensor&) {
        Tensor spr = sparse_rep(m.enc, m.encode(toks), 2);
        return sum(mul(spr, weights));
      },
      wq);
  CHECK(err <= 1e-5);
}

TEST_CASE("pretrain trajectory is bit-identical across runs and thread counts") {
  TestWorld w = make_world();
  PretrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 6;
  cfg.seed = 42;
  cfg.lr = 5e-3;

  auto run = [&](std::uint32_t threads) {
    Model m(w.mcfg, 42);
    PretrainConfig c = cfg;
    c.threads = threads;
    PretrainResult r = pretrain(m, w.corpus, c);
    std::vector<double> fingerprint;
    for (const auto& row : r.log) {
      fingerprint.push_back(row.loss_enc);
      fingerprint.push_back(row.loss_ae);
      fingerprint.push_back(row.loss_ar);
      fingerprint.push_back(row.loss_total);
    }
    m.for_each_param([&](const std::string&, Tensor& t) {
      fingerprint.push_back(t.data()[0]);
      fingerprint.push_back(t.data()[t.numel() - 1]);
    });
    return fingerprint;
  };

  auto a = run(1);
  auto b = run(2);
  auto c2 = run(1);
  REQUIRE(a == b);
  REQUIRE(a == c2);
}

TEST_CASE("ablation flags leave disabled decoder parameters untouched") {
  TestWorld w = make_world();
  PretrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 4;
  cfg.lr = 1e-2;

  auto snapshot = [](Model& m, const std::string& prefix) {
    std::vector<double> vals;
    m.for_each_param([&](const std::string& name, Tensor& t) {
      if (name.rfind(prefix, 0) == 0) {
        vals.insert(vals.end(), t.values().begin(), t.values().end());
      }
    });
    return vals;
  };

  SECTION("AE-only pre-training freezes the AR decoder") {
    Model m(w.mcfg, 31);
    auto ar_before = snapshot(m, "ar_dec.");
    auto ae_before = snapshot(m, "ae_dec.");
    PretrainConfig c = cfg;
    c.decoders = DecoderMode::kAe;
    pretrain(m, w.corpus, c);
    CHECK(snapshot(m, "ar_dec.") == ar_before);
    CHECK(snapshot(m, "ae_dec.") != ae_before);
  }
  SECTION("AR-only pre-training freezes the AE decoder") {
    Model m(w.mcfg, 31);
    auto ae_before = snapshot(m, "ae_dec.");
    auto ar_before = snapshot(m, "ar_dec.");
    PretrainConfig c = cfg;
    c.decoders = DecoderMode::kAr;
    pretrain(m, w.corpus, c);
    CHECK(snapshot(m, "ae_dec.") == ae_before);
    CHECK(snapshot(m, "ar_dec.") != ar_before);
  }
}

TEST_CASE("pretrain writes the loss log CSV") {
  TestWorld w = make_world();
  Model m(w.mcfg, 1);
  PretrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 3;
  PretrainResult r = pretrain(m, w.corpus, cfg, "test_loss_log.csv");
  REQUIRE(r.log.size() == 2);
  std::ifstream in("test_loss_log.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,loss_enc,loss_ae,loss_ar,loss_total");
  std::string row;
  std::getline(in, row);
  CHECK(row.rfind("1,", 0) == 0);
  in.close();
  std::remove("test_loss_log.csv");
}

TEST_CASE("loss decreases over 200 steps on a 50-pair dataset", "[.][slow]") {
  TestWorld w = make_world(5, 5, 2);  // 5*5 docs x 2 passages -> 50 pairs
  Model m(w.mcfg, 42);
  PretrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  PretrainResult r = pretrain(m, w.corpus, cfg);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += r.log[static_cast<std::size_t>(i)].loss_total;
    last += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].loss_total;
  }
  CHECK(last < first);
  // per-step decomposition held at every logged step
  for (const auto& row : r.log) {
    REQUIRE(std::fabs(row.loss_total - (row.loss_enc + row.loss_ae + row.loss_ar)) <= 1e-12);
  }
}
