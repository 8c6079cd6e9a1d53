#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvr/io.hpp"
#include "mvr/model.hpp"
#include "mvr/ops.hpp"

// The two representation views extracted from one encoder forward pass:
// dense = the final CLS hidden state, sparse = saturated max-pooled positive
// lm logits over the vocabulary, optionally pruned to the top-k entries.

namespace mvr {

struct DenseVec {
  std::vector<double> values;
};

struct SparseEntry {
  std::uint32_t index;
  double value;
  bool operator==(const SparseEntry&) const = default;
};

/// Sparse view after pruning: strictly positive weights at strictly
/// ascending vocab indices, nominal dimension V.
struct SparseVec {
  std::uint32_t dim = 0;
  std::vector<SparseEntry> entries;

  void validate() const {
    std::uint32_t prev = 0;
    bool first = true;
    for (const SparseEntry& e : entries) {
      if (e.value <= 0.0) throw DataError("sparse vector: non-positive stored value");
      if (e.index >= dim) throw DataError("sparse vector: index outside dimension");
      if (!first && e.index <= prev) throw DataError("sparse vector: indices not ascending");
      prev = e.index;
      first = false;
    }
  }
};

struct RepPair {
  DenseVec dense;
  SparseVec sparse;
};

// ---------------------------------------------------------------------------
// tensor-path extraction (used while training)

/// Row 0 of the encoder output, gradient-connected.
inline Tensor dense_rep(const EncoderOutput& enc_out) {
  return gather_rows(enc_out.last_hidden, {0});
}

/// Dense-form sparse view [1, V]: per content position, saturated positive
/// logits, max-pooled along the sequence axis. Pooling covers positions
/// 1..content_len (CLS, SEP and pads excluded).
inline Tensor sparse_rep(const EncoderStack& enc, const EncoderOutput& enc_out,
                         std::size_t content_len) {
  if (content_len == 0) throw DataError("sparse_rep: empty content");
  if (content_len + 2 > enc_out.last_hidden.shape()[0]) {
    throw ShapeError("sparse_rep: content length " + std::to_string(content_len) +
                     " does not fit " + shape_str(enc_out.last_hidden.shape()));
  }
  std::vector<std::size_t> rows(content_len);
  for (std::size_t i = 0; i < content_len; ++i) rows[i] = i + 1;
  Tensor logits = enc.lm_logits(gather_rows(enc_out.last_hidden, rows));
  return max_over_axis(log1p(relu(logits)), 0);
}

/// spr . detach(E): projects the sparse view into hidden space. The
/// embedding matrix is detached, so gradient flows into spr only. The tape
/// node is tagged "sparse_injection" so tests can audit the detachment.
inline Tensor sparse_injection(const Tensor& spr, const Tensor& emb_tokens) {
  if (spr.rank() != 2 || spr.shape()[0] != 1 || spr.shape()[1] != emb_tokens.shape()[0]) {
    throw ShapeError("sparse_injection: spr " + shape_str(spr.shape()) + " against table " +
                     shape_str(emb_tokens.shape()));
  }
  Tensor out = matmul(spr, detach(emb_tokens));
  out.node()->op = "sparse_injection";
  return out;
}

// ---------------------------------------------------------------------------
// stored vectors

/// Keeps the k largest strictly positive entries (ties toward lower vocab
/// index); fewer when fewer positives exist.
inline SparseVec topk_sparsify(const std::vector<double>& dense_form, std::size_t k) {
  if (k < 1) throw UsageError("topk_sparsify: k must be >= 1");
  SparseVec out;
  out.dim = static_cast<std::uint32_t>(dense_form.size());
  for (std::uint32_t i : topk_positive_indices(dense_form.data(), dense_form.size(), k)) {
    out.entries.push_back({i, dense_form[i]});
  }
  return out;
}

/// Eq-7-style similarity: dense dot product plus sparse dot product over
/// intersecting indices.
inline double hybrid_score(const RepPair& q, const RepPair& p) {
  if (q.dense.values.size() != p.dense.values.size()) {
    throw ShapeError("hybrid_score: dense widths differ");
  }
  if (q.sparse.dim != p.sparse.dim) {
    throw ShapeError("hybrid_score: sparse dimensions differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < q.dense.values.size(); ++i) {
    s += q.dense.values[i] * p.dense.values[i];
  }
  std::size_t a = 0, b = 0;
  while (a < q.sparse.entries.size() && b < p.sparse.entries.size()) {
    const std::uint32_t ia = q.sparse.entries[a].index;
    const std::uint32_t ib = p.sparse.entries[b].index;
    if (ia == ib) {
      s += q.sparse.entries[a].value * p.sparse.entries[b].value;
      ++a;
      ++b;
    } else if (ia < ib) {
      ++a;
    } else {
      ++b;
    }
  }
  return s;
}

/// Inference-path extraction: one no-grad encoder pass over
/// [CLS] content [SEP], both views; sparse pruned to top-k (0 keeps every
/// positive entry).
inline RepPair extract_rep(const Model& m, const std::vector<int>& content_tokens,
                           std::size_t topk) {
  NoGradGuard ng;
  std::vector<int> tokens;
  tokens.reserve(content_tokens.size() + 2);
  tokens.push_back(kClsId);
  tokens.insert(tokens.end(), content_tokens.begin(), content_tokens.end());
  tokens.push_back(kSepId);
  EncoderOutput out = m.encode(tokens);
  RepPair rep;
  rep.dense.values = dense_rep(out).values();
  Tensor spr = sparse_rep(m.enc, out, content_tokens.size());
  rep.sparse = topk_sparsify(spr.values(), topk == 0 ? spr.numel() : topk);
  return rep;
}

// ---------------------------------------------------------------------------
// vector files
//
// Dense: magic "MVD1", u32 count, u32 d, then per record: id (u32 len +
// bytes) + d x f64. Sparse: magic "MVS1", u32 count, u32 V, per record: id,
// u32 nnz, nnz x (u32 index, f64 value), indices ascending.

inline void write_dense_vectors(const std::string& path,
                                const std::vector<std::pair<std::string, DenseVec>>& recs) {
  std::ofstream out = bin::open_out(path);
  bin::write_magic(out, "MVD1");
  bin::write_u32(out, static_cast<std::uint32_t>(recs.size()));
  const std::uint32_t d = recs.empty() ? 0 : static_cast<std::uint32_t>(recs[0].second.values.size());
  bin::write_u32(out, d);
  for (const auto& [id, vec] : recs) {
    if (vec.values.size() != d) throw DataError(path + ": inconsistent dense width for " + id);
    bin::write_string(out, id);
    bin::write_f64s(out, vec.values);
  }
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<std::pair<std::string, DenseVec>> read_dense_vectors(const std::string& path) {
  std::ifstream in = bin::open_in(path);
  bin::expect_magic(in, "MVD1", path);
  const std::uint32_t count = bin::read_u32(in, path);
  const std::uint32_t d = bin::read_u32(in, path);
  std::vector<std::pair<std::string, DenseVec>> recs;
  recs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string id = bin::read_string(in, path);
    recs.emplace_back(std::move(id), DenseVec{bin::read_f64s(in, d, path)});
  }
  return recs;
}

inline void write_sparse_vectors(const std::string& path,
                                 const std::vector<std::pair<std::string, SparseVec>>& recs,
                                 std::uint32_t dim) {
  std::ofstream out = bin::open_out(path);
  bin::write_magic(out, "MVS1");
  bin::write_u32(out, static_cast<std::uint32_t>(recs.size()));
  bin::write_u32(out, dim);
  for (const auto& [id, vec] : recs) {
    if (vec.dim != dim) throw DataError(path + ": inconsistent sparse dimension for " + id);
    vec.validate();
    bin::write_string(out, id);
    bin::write_u32(out, static_cast<std::uint32_t>(vec.entries.size()));
    for (const SparseEntry& e : vec.entries) {
      bin::write_u32(out, e.index);
      bin::write_f64(out, e.value);
    }
  }
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<std::pair<std::string, SparseVec>> read_sparse_vectors(
    const std::string& path) {
  std::ifstream in = bin::open_in(path);
  bin::expect_magic(in, "MVS1", path);
  const std::uint32_t count = bin::read_u32(in, path);
  const std::uint32_t dim = bin::read_u32(in, path);
  std::vector<std::pair<std::string, SparseVec>> recs;
  recs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string id = bin::read_string(in, path);
    SparseVec vec;
    vec.dim = dim;
    const std::uint32_t nnz = bin::read_u32(in, path);
    vec.entries.reserve(nnz);
    for (std::uint32_t e = 0; e < nnz; ++e) {
      const std::uint32_t idx = bin::read_u32(in, path);
      const double val = bin::read_f64(in, path);
      vec.entries.push_back({idx, val});
    }
    vec.validate();
    recs.emplace_back(std::move(id), std::move(vec));
  }
  return recs;
}

}  // namespace mvr
