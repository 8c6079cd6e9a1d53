#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mvr/corpus.hpp"
#include "mvr/model.hpp"
#include "mvr/optim.hpp"
#include "mvr/representation.hpp"

// Contextual masked auto-encoder pre-training: contextual passage pairs, an
// aggressively masked encoder side, and two decoders reconstructing /
// generating the contextual passage conditioned on each representation view.

namespace mvr {

enum class ViewMode { kBoth, kDense, kSparse };
enum class DecoderMode { kBoth, kAe, kAr };

inline ViewMode parse_view_mode(const std::string& s) {
  if (s == "both") return ViewMode::kBoth;
  if (s == "den") return ViewMode::kDense;
  if (s == "spr") return ViewMode::kSparse;
  throw UsageError("view mode must be both|den|spr, got " + s);
}

inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "both") return DecoderMode::kBoth;
  if (s == "ae") return DecoderMode::kAe;
  if (s == "ar") return DecoderMode::kAr;
  throw UsageError("decoder mode must be both|ae|ar, got " + s);
}

inline const char* view_mode_name(ViewMode v) {
  switch (v) {
    case ViewMode::kBoth: return "both";
    case ViewMode::kDense: return "den";
    default: return "spr";
  }
}

inline const char* decoder_mode_name(DecoderMode d) {
  switch (d) {
    case DecoderMode::kBoth: return "both";
    case DecoderMode::kAe: return "ae";
    default: return "ar";
  }
}

struct PretrainConfig {
  double enc_mask_ratio = 0.30;
  double dec_mask_ratio = 0.45;
  double lr = 1e-3;
  double warmup_ratio = 0.1;
  std::uint32_t steps = 2000;
  std::uint32_t batch_size = 64;
  std::uint64_t seed = 42;
  std::uint32_t context_window = 2;
  ViewMode view = ViewMode::kBoth;
  DecoderMode decoders = DecoderMode::kBoth;
  bool alternate_views = false;  // alternate DEN/SPR across steps instead of averaging
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  std::uint32_t grad_chunks = 8;  // fixed chunk count keeps grads thread-count invariant
  std::uint32_t threads = 0;      // 0 = hardware concurrency

  void validate() const {
    if (enc_mask_ratio <= 0.0 || enc_mask_ratio >= 1.0 || dec_mask_ratio <= 0.0 ||
        dec_mask_ratio >= 1.0) {
      throw DataError("pretrain config: mask ratios must lie in (0, 1)");
    }
    if (steps == 0 || batch_size == 0) throw DataError("pretrain config: zero steps or batch");
    if (grad_chunks == 0) throw DataError("pretrain config: grad_chunks must be >= 1");
  }
};

/// A (target, context) passage pair with its sampled mask sets. Mask
/// positions index content tokens only.
struct ContextualPair {
  std::vector<int> target_tokens;
  std::vector<int> context_tokens;
  std::vector<std::size_t> enc_mask_positions;
  std::vector<std::size_t> dec_mask_positions;
  std::string doc_id;
};

struct PairSample {
  std::string doc_id;
  std::size_t target_index;   // into corpus.passages
  std::size_t context_index;
  std::uint32_t target_pos;   // position within the document
  std::uint32_t context_pos;
};

struct PretrainCounters {
  std::size_t single_passage_docs_skipped = 0;
  std::size_t short_context_ar_skipped = 0;
};

/// Ordered pairs (A, B) of distinct same-document passages with
/// |pos(A) - pos(B)| <= window; both orientations emitted. Documents with a
/// single passage are skipped (counted).
inline std::vector<PairSample> sample_contextual_pairs(const Corpus& corpus, std::size_t window,
                                                       PretrainCounters* counters = nullptr) {
  std::vector<PairSample> pairs;
  for (const auto& [doc_id, idxs] : corpus.doc_to_passages) {
    if (idxs.size() < 2) {
      if (counters) ++counters->single_passage_docs_skipped;
      continue;
    }
    for (std::size_t a = 0; a < idxs.size(); ++a) {
      for (std::size_t b = 0; b < idxs.size(); ++b) {
        if (a == b) continue;
        const std::uint32_t pa = corpus.passages[idxs[a]].position;
        const std::uint32_t pb = corpus.passages[idxs[b]].position;
        const std::uint32_t dist = pa > pb ? pa - pb : pb - pa;
        if (dist <= window) {
          pairs.push_back({doc_id, idxs[a], idxs[b], pa, pb});
        }
      }
    }
  }
  return pairs;
}

/// Uniformly samples round(ratio * N) content positions (floor 1) without
/// replacement and replaces each with [MASK].
inline std::pair<std::vector<int>, std::vector<std::size_t>> apply_mask(
    const std::vector<int>& tokens, double ratio, Rng& rng) {
  if (tokens.empty()) throw DataError("apply_mask: no content tokens");
  std::size_t want = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(tokens.size())));
  if (want < 1) want = 1;
  if (want > tokens.size()) want = tokens.size();
  std::vector<std::size_t> positions = rng.sample_indices(tokens.size(), want);
  std::vector<int> masked = tokens;
  for (std::size_t p : positions) masked[p] = kMaskId;
  return {std::move(masked), std::move(positions)};
}

/// Materializes the masked pair for one (sample, epoch) with an RNG keyed by
/// (seed, doc, positions, epoch), so results do not depend on worker count
/// or batch layout.
inline ContextualPair materialize_pair(const Corpus& corpus, const PairSample& sample,
                                       const PretrainConfig& cfg, std::uint64_t epoch) {
  ContextualPair pair;
  pair.doc_id = sample.doc_id;
  pair.target_tokens = corpus.passages[sample.target_index].tokens;
  pair.context_tokens = corpus.passages[sample.context_index].tokens;
  Rng enc_rng(mix_keys({cfg.seed, fnv1a("enc-mask"), fnv1a(sample.doc_id), sample.target_pos,
                        sample.context_pos, epoch}));
  pair.enc_mask_positions = apply_mask(pair.target_tokens, cfg.enc_mask_ratio, enc_rng).second;
  Rng dec_rng(mix_keys({cfg.seed, fnv1a("dec-mask"), fnv1a(sample.doc_id), sample.target_pos,
                        sample.context_pos, epoch}));
  pair.dec_mask_positions = apply_mask(pair.context_tokens, cfg.dec_mask_ratio, dec_rng).second;
  return pair;
}

// ---------------------------------------------------------------------------
// losses

/// Masked-language-model loss on the encoder side: mean cross-entropy at the
/// masked positions of the target passage.
inline Tensor encoder_mlm_loss(const Model& m, const ContextualPair& pair,
                               const EncoderOutput& enc_out) {
  if (pair.enc_mask_positions.empty()) throw DataError("encoder_mlm_loss: empty mask set");
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  for (std::size_t p : pair.enc_mask_positions) {
    rows.push_back(p + 1);  // CLS offset
    labels.push_back(pair.target_tokens[p]);
  }
  Tensor hidden = gather_rows(enc_out.last_hidden, rows);
  return cross_entropy_with_logits(m.lm_logits(hidden), labels);
}

/// Decoder input per Eqs. 10-11: position 0 carries the view's representation
/// embedding (plus position embedding 0); the rest are the context tokens
/// (masked for the AE decoder) followed by SEP.
inline Tensor build_decoder_input(const Model& m, const Tensor& rep_embedding,
                                  const std::vector<int>& context_ids) {
  Tensor rep_row = add(rep_embedding, gather_rows(m.enc.emb.positions, {0}));
  std::vector<std::size_t> pos(context_ids.size());
  for (std::size_t i = 0; i < context_ids.size(); ++i) pos[i] = i + 1;
  Tensor tok = add(embedding_lookup(m.enc.emb.tokens, context_ids),
                   gather_rows(m.enc.emb.positions, pos));
  return concat_rows({rep_row, tok});
}

namespace detail {

inline std::vector<int> with_sep(const std::vector<int>& ids) {
  std::vector<int> out = ids;
  out.push_back(kSepId);
  return out;
}

inline Tensor view_rep_embedding(const Model& m, ViewMode v, const Tensor& den,
                                 const Tensor& spr) {
  return v == ViewMode::kDense ? den : sparse_injection(spr, m.enc.emb.tokens);
}

}  // namespace detail

/// Reconstruction loss of the AE decoder for one view: cross-entropy at the
/// masked context positions.
inline Tensor ae_decoder_loss_one_view(const Model& m, const ContextualPair& pair,
                                       const Tensor& rep_embedding) {
  if (pair.dec_mask_positions.empty()) throw DataError("ae_decoder_loss: empty mask set");
  std::vector<int> masked = pair.context_tokens;
  for (std::size_t p : pair.dec_mask_positions) masked[p] = kMaskId;
  Tensor input = build_decoder_input(m, rep_embedding, detail::with_sep(masked));
  Tensor logits = m.decode_ae(input, std::vector<std::uint8_t>(input.shape()[0], 1));
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  for (std::size_t p : pair.dec_mask_positions) {
    rows.push_back(p + 1);  // representation slot offset
    labels.push_back(pair.context_tokens[p]);
  }
  return cross_entropy_with_logits(gather_rows(logits, rows), labels);
}

/// Generative loss of the AR decoder for one view: next-token cross-entropy
/// over every context position (unmasked input).
inline Tensor ar_decoder_loss_one_view(const Model& m, const ContextualPair& pair,
                                       const Tensor& rep_embedding) {
  const std::vector<int> ids = detail::with_sep(pair.context_tokens);
  Tensor input = build_decoder_input(m, rep_embedding, ids);
  Tensor logits = m.decode_ar(input, std::vector<std::uint8_t>(input.shape()[0], 1));
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) rows[i] = i;  // rows 0..len-2 predict ids
  return cross_entropy_with_logits(gather_rows(logits, rows), ids);
}

struct ExampleLosses {
  Tensor enc;
  Tensor ae;     // undefined when the AE decoder is disabled
  Tensor ar;     // undefined when the AR decoder is disabled or context < 2
  Tensor total;  // tape root; built as enc (+ ae) (+ ar)
};

/// Builds the full per-example loss graph. One encoder forward pass feeds
/// the MLM head and both representation views; each enabled decoder runs
/// once per enabled view and its per-view losses are averaged.
inline ExampleLosses pretrain_example_loss(const Model& m, const ContextualPair& pair,
                                           ViewMode view, DecoderMode decoders,
                                           PretrainCounters* counters = nullptr) {
  ExampleLosses out;
  std::vector<int> masked_target = pair.target_tokens;
  for (std::size_t p : pair.enc_mask_positions) masked_target[p] = kMaskId;
  std::vector<int> enc_input;
  enc_input.reserve(masked_target.size() + 2);
  enc_input.push_back(kClsId);
  enc_input.insert(enc_input.end(), masked_target.begin(), masked_target.end());
  enc_input.push_back(kSepId);
  EncoderOutput enc_out = m.encode(enc_input);

  out.enc = encoder_mlm_loss(m, pair, enc_out);

  Tensor den, spr;
  if (view != ViewMode::kSparse) den = dense_rep(enc_out);
  if (view != ViewMode::kDense) {
    spr = sparse_rep(m.enc, enc_out, pair.target_tokens.size());
  }

  auto per_view = [&](const std::function<Tensor(const Tensor&)>& loss_fn) {
    if (view == ViewMode::kBoth) {
      Tensor l_den = loss_fn(detail::view_rep_embedding(m, ViewMode::kDense, den, spr));
      Tensor l_spr = loss_fn(detail::view_rep_embedding(m, ViewMode::kSparse, den, spr));
      return scale(add(l_den, l_spr), 0.5);
    }
    return loss_fn(detail::view_rep_embedding(m, view, den, spr));
  };

  out.total = out.enc;
  if (decoders != DecoderMode::kAr) {
    out.ae = per_view([&](const Tensor& rep) { return ae_decoder_loss_one_view(m, pair, rep); });
    out.total = add(out.total, out.ae);
  }
  if (decoders != DecoderMode::kAe) {
    if (pair.context_tokens.size() < 2) {
      if (counters) ++counters->short_context_ar_skipped;
    } else {
      out.ar = per_view([&](const Tensor& rep) {
        return ar_decoder_loss_one_view(m, pair, rep);
      });
      out.total = add(out.total, out.ar);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// trainer

struct PretrainLogRow {
  std::uint64_t step;
  double loss_enc;
  double loss_ae;
  double loss_ar;
  double loss_total;
};

struct PretrainResult {
  std::vector<PretrainLogRow> log;
  PretrainCounters counters;
};

/// Runs the pre-training loop in place. Batches are processed in a fixed
/// number of chunks; each chunk owns a gradient proxy of the model and the
/// chunk gradients are reduced in chunk order, so the trajectory is
/// bit-identical for any worker count. Decomposition of the total loss is
/// asserted per example.
inline PretrainResult pretrain(Model& model, const Corpus& corpus, const PretrainConfig& cfg,
                               const std::string& loss_csv_path = "") {
  cfg.validate();
  PretrainResult result;
  std::vector<PairSample> pairs =
      sample_contextual_pairs(corpus, cfg.context_window, &result.counters);
  if (pairs.empty()) throw DataError("pretrain: corpus yields no contextual pairs");

  AdamWConfig acfg;
  acfg.lr = cfg.lr;
  acfg.beta1 = cfg.beta1;
  acfg.beta2 = cfg.beta2;
  acfg.weight_decay = cfg.weight_decay;
  AdamW opt(model.parameters(), acfg);

  const std::uint32_t chunks = std::min<std::uint32_t>(cfg.grad_chunks, cfg.batch_size);
  unsigned threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
  if (threads == 0) threads = 1;
  threads = std::min<unsigned>(threads, chunks);

  std::vector<Model> proxies;
  proxies.reserve(chunks);
  for (std::uint32_t c = 0; c < chunks; ++c) proxies.push_back(model.grad_proxy());
  std::vector<std::vector<std::pair<std::string, Tensor>>> proxy_params;
  for (Model& p : proxies) proxy_params.push_back(p.parameters());
  auto master_params = model.parameters();

  std::ofstream csv;
  if (!loss_csv_path.empty()) {
    csv.open(loss_csv_path);
    if (!csv) throw DataError(loss_csv_path + ": cannot open for writing");
    csv << "step,loss_enc,loss_ae,loss_ar,loss_total\n";
  }

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::uint64_t epoch = 0;
  Rng shuffle_rng(mix_keys({cfg.seed, fnv1a("epoch-order"), epoch}));
  shuffle_rng.shuffle(order);
  std::size_t cursor = 0;

  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::uint64_t step = 1; step <= cfg.steps; ++step) {
    // assemble the batch (epoch wrap re-shuffles deterministically)
    std::vector<std::pair<PairSample, std::uint64_t>> batch;
    batch.reserve(cfg.batch_size);
    for (std::uint32_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        cursor = 0;
        ++epoch;
        Rng r(mix_keys({cfg.seed, fnv1a("epoch-order"), epoch}));
        r.shuffle(order);
      }
      batch.emplace_back(pairs[order[cursor++]], epoch);
    }

    ViewMode step_view = cfg.view;
    if (cfg.alternate_views && cfg.view == ViewMode::kBoth) {
      step_view = (step % 2 == 1) ? ViewMode::kDense : ViewMode::kSparse;
    }

    struct ChunkOut {
      double enc = 0.0, ae = 0.0, ar = 0.0, total = 0.0;
      std::size_t ar_count = 0, ae_count = 0;
      PretrainCounters counters;
      bool finite = true;
    };
    std::vector<ChunkOut> chunk_out(chunks);

    auto run_chunk = [&](std::uint32_t c) {
      const std::size_t begin = c * batch.size() / chunks;
      const std::size_t end = (c + 1) * batch.size() / chunks;
      ChunkOut& co = chunk_out[c];
      const Model& proxy = proxies[c];
      for (std::size_t i = begin; i < end; ++i) {
        ContextualPair pair = materialize_pair(corpus, batch[i].first, cfg, batch[i].second);
        ExampleLosses losses =
            pretrain_example_loss(proxy, pair, step_view, cfg.decoders, &co.counters);
        const double enc_v = losses.enc.item();
        const double ae_v = losses.ae.defined() ? losses.ae.item() : 0.0;
        const double ar_v = losses.ar.defined() ? losses.ar.item() : 0.0;
        const double total_v = losses.total.item();
        // Eq.-14 additivity, asserted bit-exactly per example
        double recomposed = enc_v;
        if (losses.ae.defined()) recomposed += ae_v;
        if (losses.ar.defined()) recomposed += ar_v;
        if (recomposed != total_v) {
          throw NumericError("pretrain: loss decomposition violated at step " +
                             std::to_string(step));
        }
        if (!std::isfinite(total_v)) co.finite = false;
        co.enc += enc_v;
        co.ae += ae_v;
        co.ar += ar_v;
        co.total += total_v;
        if (losses.ae.defined()) ++co.ae_count;
        if (losses.ar.defined()) ++co.ar_count;
        losses.total.backward(inv_batch);
      }
    };

    if (threads <= 1) {
      for (std::uint32_t c = 0; c < chunks; ++c) run_chunk(c);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
          for (std::uint32_t c = t; c < chunks; c += threads) run_chunk(c);
        });
      }
      for (auto& th : pool) th.join();
    }

    double mean_enc = 0.0, mean_ae = 0.0, mean_ar = 0.0;
    bool finite = true;
    for (const ChunkOut& co : chunk_out) {
      mean_enc += co.enc;
      mean_ae += co.ae;
      mean_ar += co.ar;
      finite = finite && co.finite;
      result.counters.short_context_ar_skipped += co.counters.short_context_ar_skipped;
    }
    mean_enc *= inv_batch;
    mean_ae *= inv_batch;
    mean_ar *= inv_batch;
    const double mean_total = mean_enc + mean_ae + mean_ar;
    if (!finite) {
      std::string ids;
      for (const auto& [sample, ep] : batch) {
        if (!ids.empty()) ids += ", ";
        ids += sample.doc_id + "#" + std::to_string(sample.target_pos) + "->" +
               std::to_string(sample.context_pos);
      }
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step) +
                         "; batch: " + ids);
    }

    // reduce chunk gradients in chunk order, then update
    for (std::size_t p = 0; p < master_params.size(); ++p) {
      Tensor& dst = master_params[p].second;
      std::vector<double>& acc = dst.grad();
      for (std::uint32_t c = 0; c < chunks; ++c) {
        Tensor& src = proxy_params[c][p].second;
        if (!src.has_grad()) continue;
        const std::vector<double>& g = src.grad();
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
    }
    opt.step(linear_warmup_decay_lr(cfg.lr, step, cfg.steps, cfg.warmup_ratio));
    opt.zero_grad();
    for (auto& pp : proxy_params) {
      for (auto& [name, t] : pp) t.zero_grad();
    }

    result.log.push_back({step, mean_enc, mean_ae, mean_ar, mean_total});
    if (csv.is_open()) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%llu,%.12g,%.12g,%.12g,%.12g\n",
                    static_cast<unsigned long long>(step), mean_enc, mean_ae, mean_ar,
                    mean_total);
      csv << buf;
    }
  }
  return result;
}

}  // namespace mvr
