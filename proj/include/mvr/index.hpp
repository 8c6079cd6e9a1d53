#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvr/corpus.hpp"
#include "mvr/eval.hpp"
#include "mvr/io.hpp"
#include "mvr/representation.hpp"

// Immutable hybrid index over a passage corpus: flat dense matrix scored by
// full product, sparse inverted postings scored document-at-a-time, fused
// exact top-K selection, plus an Okapi BM25 lexical baseline.

namespace mvr {

struct ScoredDoc {
  std::string pid;
  double score;
  bool operator==(const ScoredDoc&) const = default;
};

/// Descending score, ties by ascending passage id; length <= K.
using SearchResult = std::vector<ScoredDoc>;

struct HybridIndex {
  struct Posting {
    std::uint32_t ordinal;
    double weight;
  };

  std::vector<std::string> ids;
  std::size_t dense_dim = 0;
  std::uint32_t sparse_dim = 0;
  std::size_t topk = 0;  // k the vectors were pruned with (build metadata)
  std::vector<double> dense;                   // count x dense_dim
  std::vector<std::vector<Posting>> postings;  // slot -> (ordinal, weight), ordinals ascending
};

using VectorRecord = std::tuple<std::string, DenseVec, SparseVec>;

inline HybridIndex build_index(const std::vector<VectorRecord>& records, std::size_t topk = 0) {
  HybridIndex idx;
  idx.topk = topk;
  std::unordered_set<std::string> seen;
  for (const auto& [id, den, spr] : records) {
    if (!seen.insert(id).second) throw DataError("build_index: duplicate passage id " + id);
    if (idx.ids.empty()) {
      idx.dense_dim = den.values.size();
      idx.sparse_dim = spr.dim;
      idx.postings.resize(idx.sparse_dim);
    }
    if (den.values.size() != idx.dense_dim) {
      throw DataError("build_index: inconsistent dense width for " + id);
    }
    if (spr.dim != idx.sparse_dim) {
      throw DataError("build_index: inconsistent sparse dimension for " + id);
    }
    spr.validate();
    const std::uint32_t ordinal = static_cast<std::uint32_t>(idx.ids.size());
    idx.ids.push_back(id);
    idx.dense.insert(idx.dense.end(), den.values.begin(), den.values.end());
    for (const SparseEntry& e : spr.entries) {
      idx.postings[e.index].push_back({ordinal, e.value});
    }
  }
  // records arrive in ordinal order, so posting lists are already sorted
  return idx;
}

namespace detail {

inline SearchResult select_topk(const std::vector<std::string>& ids,
                                const std::vector<double>& scores, std::size_t k) {
  std::vector<std::uint32_t> order(ids.size());
  for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  if (k < order.size()) {
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      better);
    order.resize(k);
  } else {
    std::sort(order.begin(), order.end(), better);
  }
  SearchResult out;
  out.reserve(order.size());
  for (std::uint32_t i : order) out.push_back({ids[i], scores[i]});
  return out;
}

}  // namespace detail

/// Exact top-K under the hybrid score: dense partials by full matrix
/// product, sparse partials by postings accumulation, summed per passage.
inline SearchResult search(const HybridIndex& idx, const RepPair& q, long k) {
  if (k <= 0) throw UsageError("search: K must be positive");
  if (idx.ids.empty()) return {};
  if (q.dense.values.size() != idx.dense_dim) {
    throw DataError("search: query dense width mismatch");
  }
  if (q.sparse.dim != idx.sparse_dim) throw DataError("search: query sparse dimension mismatch");
  const std::size_t count = idx.ids.size();
  const std::size_t d = idx.dense_dim;
  std::vector<double> dense_part(count, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const double* row = idx.dense.data() + i * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += q.dense.values[j] * row[j];
    dense_part[i] = s;
  }
  std::vector<double> sparse_part(count, 0.0);
  for (const SparseEntry& e : q.sparse.entries) {
    for (const HybridIndex::Posting& p : idx.postings[e.index]) {
      sparse_part[p.ordinal] += e.value * p.weight;
    }
  }
  std::vector<double> scores(count);
  for (std::size_t i = 0; i < count; ++i) scores[i] = dense_part[i] + sparse_part[i];
  return detail::select_topk(idx.ids, scores, static_cast<std::size_t>(k));
}

/// Exhaustive reference scorer: hybrid_score against every passage.
inline SearchResult brute_force_search(const std::vector<std::pair<std::string, RepPair>>& corpus,
                                       const RepPair& q, long k) {
  if (k <= 0) throw UsageError("brute_force_search: K must be positive");
  std::vector<std::string> ids;
  std::vector<double> scores;
  ids.reserve(corpus.size());
  scores.reserve(corpus.size());
  for (const auto& [id, rep] : corpus) {
    ids.push_back(id);
    scores.push_back(hybrid_score(q, rep));
  }
  return detail::select_topk(ids, scores, static_cast<std::size_t>(k));
}

/// Deterministic parallel evaluation of many queries (read-only index).
template <typename SearchFn>
std::vector<SearchResult> search_many(std::size_t n_queries, unsigned threads, SearchFn&& fn) {
  std::vector<SearchResult> out(n_queries);
  if (threads <= 1 || n_queries <= 1) {
    for (std::size_t i = 0; i < n_queries; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = t; i < n_queries; i += threads) out[i] = fn(i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------------------
// BM25 baseline (Okapi; k1 = 0.9, b = 0.4; idf = ln(1 + (N - df + .5)/(df + .5)))

struct BM25Index {
  double k1 = 0.9;
  double b = 0.4;
  std::size_t num_docs = 0;
  double avgdl = 0.0;
  std::vector<std::string> ids;
  std::vector<std::uint32_t> doc_len;
  std::unordered_map<int, std::vector<std::pair<std::uint32_t, std::uint32_t>>> postings;
  std::unordered_map<int, double> idf;  // frozen at build
};

inline BM25Index build_bm25(const Corpus& corpus, double k1 = 0.9, double b = 0.4) {
  BM25Index idx;
  idx.k1 = k1;
  idx.b = b;
  idx.num_docs = corpus.passages.size();
  std::uint64_t total_len = 0;
  for (const PassageRecord& p : corpus.passages) {
    const std::uint32_t ordinal = static_cast<std::uint32_t>(idx.ids.size());
    idx.ids.push_back(p.pid);
    idx.doc_len.push_back(static_cast<std::uint32_t>(p.tokens.size()));
    total_len += p.tokens.size();
    std::unordered_map<int, std::uint32_t> tf;
    for (int t : p.tokens) ++tf[t];
    for (const auto& [term, freq] : tf) idx.postings[term].push_back({ordinal, freq});
  }
  idx.avgdl = idx.num_docs ? static_cast<double>(total_len) / static_cast<double>(idx.num_docs)
                           : 0.0;
  const double n = static_cast<double>(idx.num_docs);
  for (const auto& [term, plist] : idx.postings) {
    const double df = static_cast<double>(plist.size());
    idx.idf[term] = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
  }
  return idx;
}

/// Sum over query token occurrences of idf * saturated tf. Terms absent from
/// the index contribute nothing; a query with no indexed term returns empty.
inline SearchResult bm25_search(const BM25Index& idx, const std::vector<int>& query_tokens,
                                long k) {
  if (k <= 0) throw UsageError("bm25_search: K must be positive");
  std::vector<double> scores(idx.ids.size(), 0.0);
  std::vector<bool> touched(idx.ids.size(), false);
  bool any = false;
  for (int term : query_tokens) {
    auto it = idx.postings.find(term);
    if (it == idx.postings.end()) continue;
    const double idf = idx.idf.at(term);
    for (const auto& [ordinal, tf] : it->second) {
      const double dl = static_cast<double>(idx.doc_len[ordinal]);
      const double denom = tf + idx.k1 * (1.0 - idx.b + idx.b * dl / idx.avgdl);
      scores[ordinal] += idf * (static_cast<double>(tf) * (idx.k1 + 1.0)) / denom;
      touched[ordinal] = true;
      any = true;
    }
  }
  if (!any) return {};
  std::vector<std::string> ids;
  std::vector<double> hit_scores;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (touched[i]) {
      ids.push_back(idx.ids[i]);
      hit_scores.push_back(scores[i]);
    }
  }
  return detail::select_topk(ids, hit_scores, static_cast<std::size_t>(k));
}

// ---------------------------------------------------------------------------
// persistence: a directory holding meta (text), dense.bin ("MVD1"),
// postings.bin ("MVP1": per non-empty slot, u32 slot, u32 len, then
// len x (u32 ordinal, f64 weight)), ids.txt.

inline void save_hybrid_index(const HybridIndex& idx, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir + "/ids.txt");
    if (!out) throw DataError(dir + "/ids.txt: cannot open for writing");
    for (const std::string& id : idx.ids) out << id << "\n";
  }
  {
    std::vector<std::pair<std::string, DenseVec>> recs;
    recs.reserve(idx.ids.size());
    for (std::size_t i = 0; i < idx.ids.size(); ++i) {
      DenseVec d;
      d.values.assign(idx.dense.begin() + static_cast<std::ptrdiff_t>(i * idx.dense_dim),
                      idx.dense.begin() + static_cast<std::ptrdiff_t>((i + 1) * idx.dense_dim));
      recs.emplace_back(idx.ids[i], std::move(d));
    }
    write_dense_vectors(dir + "/dense.bin", recs);
  }
  {
    std::ofstream out = bin::open_out(dir + "/postings.bin");
    bin::write_magic(out, "MVP1");
    for (std::uint32_t slot = 0; slot < idx.postings.size(); ++slot) {
      const auto& plist = idx.postings[slot];
      if (plist.empty()) continue;
      bin::write_u32(out, slot);
      bin::write_u32(out, static_cast<std::uint32_t>(plist.size()));
      for (const HybridIndex::Posting& p : plist) {
        bin::write_u32(out, p.ordinal);
        bin::write_f64(out, p.weight);
      }
    }
    if (!out) throw DataError(dir + "/postings.bin: write failed");
  }
  {
    std::ofstream out(dir + "/meta");
    if (!out) throw DataError(dir + "/meta: cannot open for writing");
    out << "count = " << idx.ids.size() << "\n";
    out << "dense_dim = " << idx.dense_dim << "\n";
    out << "sparse_dim = " << idx.sparse_dim << "\n";
    out << "topk = " << idx.topk << "\n";
    out << "checksum_dense = " << bin::fnv1a_file(dir + "/dense.bin") << "\n";
    out << "checksum_postings = " << bin::fnv1a_file(dir + "/postings.bin") << "\n";
  }
}

inline std::unordered_map<std::string, std::string> read_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  std::unordered_map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline HybridIndex load_hybrid_index(const std::string& dir) {
  auto meta = read_meta(dir + "/meta");
  HybridIndex idx;
  idx.dense_dim = std::stoull(meta.at("dense_dim"));
  idx.sparse_dim = static_cast<std::uint32_t>(std::stoul(meta.at("sparse_dim")));
  idx.topk = std::stoull(meta.at("topk"));
  if (std::stoull(meta.at("checksum_dense")) != bin::fnv1a_file(dir + "/dense.bin") ||
      std::stoull(meta.at("checksum_postings")) != bin::fnv1a_file(dir + "/postings.bin")) {
    throw DataError(dir + ": index checksum mismatch");
  }
  {
    std::ifstream in(dir + "/ids.txt");
    if (!in) throw DataError(dir + "/ids.txt: cannot open for reading");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) idx.ids.push_back(line);
    }
  }
  {
    auto recs = read_dense_vectors(dir + "/dense.bin");
    if (recs.size() != idx.ids.size()) throw DataError(dir + ": dense record count mismatch");
    idx.dense.reserve(recs.size() * idx.dense_dim);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (recs[i].first != idx.ids[i]) throw DataError(dir + ": dense id order mismatch");
      idx.dense.insert(idx.dense.end(), recs[i].second.values.begin(),
                       recs[i].second.values.end());
    }
  }
  {
    std::ifstream in = bin::open_in(dir + "/postings.bin");
    bin::expect_magic(in, "MVP1", dir + "/postings.bin");
    idx.postings.resize(idx.sparse_dim);
    while (true) {
      std::uint32_t slot;
      in.read(reinterpret_cast<char*>(&slot), 4);
      if (in.gcount() == 0) break;
      if (in.gcount() != 4) throw DataError(dir + "/postings.bin: truncated slot header");
      const std::uint32_t len = bin::read_u32(in, dir + "/postings.bin");
      if (slot >= idx.sparse_dim) throw DataError(dir + "/postings.bin: slot outside dimension");
      auto& plist = idx.postings[slot];
      plist.reserve(len);
      for (std::uint32_t i = 0; i < len; ++i) {
        const std::uint32_t ordinal = bin::read_u32(in, dir + "/postings.bin");
        const double weight = bin::read_f64(in, dir + "/postings.bin");
        plist.push_back({ordinal, weight});
      }
    }
  }
  if (std::stoull(meta.at("count")) != idx.ids.size()) {
    throw DataError(dir + ": meta count mismatch");
  }
  return idx;
}

}  // namespace mvr
