#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mvr/errors.hpp"
#include "mvr/rng.hpp"
#include "mvr/special_tokens.hpp"

// Word-level vocabulary, document-to-passage splitting, corpus containers,
// and the synthetic topic-clustered corpus generator used for desk-scale
// retrieval experiments.

namespace mvr {

// ---------------------------------------------------------------------------
// tokenization and vocabulary

/// Lowercased word tokens: maximal runs of alphanumeric characters.
inline std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct Vocab {
  std::vector<std::string> id_to_token;  // ids 0..4 reserved
  std::unordered_map<std::string, int> token_to_id;

  std::size_t size() const { return id_to_token.size(); }

  int id_or_unk(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token.size()) {
      throw DataError("vocab: id " + std::to_string(id) + " out of range");
    }
    return id_to_token[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const std::string& w : tokenize_words(text)) ids.push_back(id_or_unk(w));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }
};

inline Vocab make_reserved_vocab() {
  Vocab v;
  v.id_to_token = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  for (int i = 0; i < kNumReservedIds; ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

/// Frequency-ranked word vocabulary truncated to max_size - 5 entries after
/// the reserved block. Frequency ties order lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& texts, std::size_t max_size) {
  if (max_size <= kNumReservedIds) throw DataError("build_vocab: max_size too small");
  std::unordered_map<std::string, std::uint64_t> counts;
  for (const std::string& t : texts) {
    for (const std::string& w : tokenize_words(t)) ++counts[w];
  }
  if (counts.empty()) throw DataError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > max_size - kNumReservedIds) ranked.resize(max_size - kNumReservedIds);
  Vocab v = make_reserved_vocab();
  for (auto& [tok, cnt] : ranked) {
    v.token_to_id[tok] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back(tok);
  }
  return v;
}

inline void save_vocab(const Vocab& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (std::size_t i = kNumReservedIds; i < v.id_to_token.size(); ++i) {
    out << v.id_to_token[i] << "\n";
  }
  if (!out) throw DataError(path + ": write failed");
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  Vocab v = make_reserved_vocab();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    v.token_to_id[line] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back(line);
  }
  return v;
}

// ---------------------------------------------------------------------------
// passages

struct PassageRecord {
  std::string pid;
  std::string doc_id;
  std::uint32_t position = 0;
  std::vector<int> tokens;  // content ids only, no specials
};

/// Greedy sentence packing: sentences (split on . ! ?) are appended while
/// the passage stays within max_len tokens; over-long sentences are
/// hard-split into max_len chunks.
inline std::vector<PassageRecord> split_passages(const std::string& doc_id,
                                                 const std::string& text, const Vocab& vocab,
                                                 std::size_t max_len) {
  if (max_len == 0) throw UsageError("split_passages: max_len must be positive");
  std::vector<std::vector<int>> sentences;
  std::string cur;
  auto flush = [&]() {
    std::vector<int> ids = vocab.encode(cur);
    if (!ids.empty()) sentences.push_back(std::move(ids));
    cur.clear();
  };
  for (char c : text) {
    if (c == '.' || c == '!' || c == '?') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();

  std::vector<PassageRecord> out;
  std::vector<int> packed;
  auto emit = [&]() {
    if (packed.empty()) return;
    PassageRecord rec;
    rec.doc_id = doc_id;
    rec.position = static_cast<std::uint32_t>(out.size());
    rec.pid = doc_id + "-p" + std::to_string(rec.position);
    rec.tokens = std::move(packed);
    packed.clear();
    out.push_back(std::move(rec));
  };
  for (std::vector<int>& sent : sentences) {
    if (sent.size() > max_len) {
      emit();
      for (std::size_t off = 0; off < sent.size(); off += max_len) {
        packed.assign(sent.begin() + static_cast<std::ptrdiff_t>(off),
                      sent.begin() + static_cast<std::ptrdiff_t>(std::min(off + max_len,
                                                                          sent.size())));
        emit();
      }
      continue;
    }
    if (packed.size() + sent.size() > max_len) emit();
    packed.insert(packed.end(), sent.begin(), sent.end());
  }
  emit();
  return out;
}

/// Immutable passage collection with id and per-document lookups.
struct Corpus {
  std::vector<PassageRecord> passages;
  std::unordered_map<std::string, std::size_t> pid_to_index;
  std::map<std::string, std::vector<std::size_t>> doc_to_passages;  // ordered by position

  static Corpus from_records(std::vector<PassageRecord> records) {
    Corpus c;
    c.passages = std::move(records);
    for (std::size_t i = 0; i < c.passages.size(); ++i) {
      const PassageRecord& r = c.passages[i];
      for (int id : r.tokens) {
        if (id == kPadId || id == kClsId || id == kSepId || id == kMaskId) {
          throw DataError("corpus: reserved id " + std::to_string(id) + " inside passage " +
                          r.pid);
        }
      }
      if (!c.pid_to_index.emplace(r.pid, i).second) {
        throw DataError("corpus: duplicate passage id " + r.pid);
      }
      c.doc_to_passages[r.doc_id].push_back(i);
    }
    for (auto& [doc, idxs] : c.doc_to_passages) {
      std::sort(idxs.begin(), idxs.end(), [&c](std::size_t a, std::size_t b) {
        return c.passages[a].position < c.passages[b].position;
      });
      for (std::size_t i = 0; i < idxs.size(); ++i) {
        if (c.passages[idxs[i]].position != i) {
          throw DataError("corpus: positions not dense for document " + doc);
        }
      }
    }
    return c;
  }

  const PassageRecord& by_pid(const std::string& pid) const {
    auto it = pid_to_index.find(pid);
    if (it == pid_to_index.end()) throw DataError("corpus: unknown passage id " + pid);
    return passages[it->second];
  }
};

// ---------------------------------------------------------------------------
// corpus / query files (UTF-8 TSV)

struct TextPassage {
  std::string pid;
  std::string doc_id;
  std::uint32_t position = 0;
  std::string text;
};

inline void write_corpus_tsv(const std::string& path, const std::vector<TextPassage>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const TextPassage& r : rows) {
    out << r.pid << '\t' << r.doc_id << '\t' << r.position << '\t' << r.text << "\n";
  }
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<TextPassage> read_corpus_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  std::vector<TextPassage> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TextPassage r;
    std::size_t p1 = line.find('\t');
    std::size_t p2 = p1 == std::string::npos ? p1 : line.find('\t', p1 + 1);
    std::size_t p3 = p2 == std::string::npos ? p2 : line.find('\t', p2 + 1);
    if (p3 == std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    }
    r.pid = line.substr(0, p1);
    r.doc_id = line.substr(p1 + 1, p2 - p1 - 1);
    try {
      r.position = static_cast<std::uint32_t>(std::stoul(line.substr(p2 + 1, p3 - p2 - 1)));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad position field");
    }
    r.text = line.substr(p3 + 1);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Tokenize text rows against a vocabulary, dropping tokens beyond max_len.
inline Corpus tokenize_corpus(const std::vector<TextPassage>& rows, const Vocab& vocab,
                              std::size_t max_len) {
  std::vector<PassageRecord> recs;
  recs.reserve(rows.size());
  for (const TextPassage& r : rows) {
    PassageRecord rec;
    rec.pid = r.pid;
    rec.doc_id = r.doc_id;
    rec.position = r.position;
    rec.tokens = vocab.encode(r.text);
    if (rec.tokens.size() > max_len) rec.tokens.resize(max_len);
    recs.push_back(std::move(rec));
  }
  return Corpus::from_records(std::move(recs));
}

inline void write_queries_tsv(const std::string& path,
                              const std::vector<std::pair<std::string, std::string>>& queries) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& [qid, text] : queries) out << qid << '\t' << text << "\n";
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<std::pair<std::string, std::string>> read_queries_tsv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected qid<TAB>text");
    }
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus

struct SyntheticSpec {
  std::uint32_t topics = 50;
  std::uint32_t vocab_per_topic = 30;
  std::uint32_t docs_per_topic = 8;
  std::uint32_t passages_per_doc = 5;
  double query_corruption = 0.3;
  std::uint64_t seed = 42;

  std::uint32_t shared_vocab = 200;
  std::uint32_t doc_focus_words = 10;  // per-document preferred topic words
  std::uint32_t passage_min_tokens = 12;
  std::uint32_t passage_max_tokens = 20;
  std::uint32_t query_min_tokens = 4;
  std::uint32_t query_max_tokens = 8;
  std::uint32_t train_queries = 400;
  std::uint32_t dev_queries = 200;

  void validate() const {
    if (topics < 1 || vocab_per_topic < 1 || docs_per_topic < 1 || passages_per_doc < 1) {
      throw DataError("synthetic spec: all counts must be >= 1");
    }
    if (query_corruption < 0.0 || query_corruption >= 1.0) {
      throw DataError("synthetic spec: corruption rate must be in [0, 1)");
    }
    if (passages_per_doc < 2) {
      throw DataError("synthetic spec: need >= 2 passages per document for contextual pairs");
    }
    if (passage_min_tokens < 1 || passage_min_tokens > passage_max_tokens) {
      throw DataError("synthetic spec: bad passage length range");
    }
    if (query_min_tokens < 1 || query_min_tokens > query_max_tokens) {
      throw DataError("synthetic spec: bad query length range");
    }
  }
};

struct SyntheticData {
  std::vector<TextPassage> passages;
  std::vector<std::pair<std::string, std::string>> train_queries;
  std::vector<std::pair<std::string, std::string>> dev_queries;
  std::map<std::string, std::map<std::string, int>> train_qrels;
  std::map<std::string, std::map<std::string, int>> dev_qrels;
};

namespace detail {

inline std::string topic_word(std::uint32_t topic, std::uint32_t w) {
  return "t" + std::to_string(topic) + "w" + std::to_string(w);
}

inline std::string shared_word(std::uint32_t w) { return "c" + std::to_string(w); }

/// Zipf-ish draw over [0, n): rank r with weight 1/(r+1).
inline std::uint32_t zipf_draw(Rng& rng, std::uint32_t n, const std::vector<double>& cdf) {
  const double u = rng.real01() * cdf[n - 1];
  const auto it = std::lower_bound(cdf.begin(), cdf.begin() + n, u);
  return static_cast<std::uint32_t>(it - cdf.begin());
}

}  // namespace detail

/// Topic-clustered documents: each passage mixes ~80% topic vocabulary (with
/// a per-document preferred subset) and ~20% shared vocabulary. Queries are
/// corrupted sub-spans of a positive passage; qrels mark the source passage
/// and its same-document neighbours.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData data;

  std::vector<double> shared_cdf(spec.shared_vocab);
  double acc = 0.0;
  for (std::uint32_t i = 0; i < spec.shared_vocab; ++i) {
    acc += 1.0 / static_cast<double>(i + 1);
    shared_cdf[i] = acc;
  }

  for (std::uint32_t topic = 0; topic < spec.topics; ++topic) {
    for (std::uint32_t d = 0; d < spec.docs_per_topic; ++d) {
      const std::string doc_id = "d" + std::to_string(topic * spec.docs_per_topic + d);
      Rng rng(mix_keys({spec.seed, fnv1a("doc"), topic, d}));
      // per-document preferred subset of the topic vocabulary
      std::vector<std::size_t> focus =
          rng.sample_indices(spec.vocab_per_topic, std::min(spec.doc_focus_words,
                                                            spec.vocab_per_topic));
      for (std::uint32_t p = 0; p < spec.passages_per_doc; ++p) {
        const std::uint32_t len =
            spec.passage_min_tokens +
            static_cast<std::uint32_t>(rng.below(spec.passage_max_tokens -
                                                 spec.passage_min_tokens + 1));
        std::string text;
        for (std::uint32_t t = 0; t < len; ++t) {
          std::string w;
          if (rng.real01() < 0.2 && spec.shared_vocab > 0) {
            w = detail::shared_word(detail::zipf_draw(rng, spec.shared_vocab, shared_cdf));
          } else if (rng.real01() < 0.7) {
            w = detail::topic_word(topic,
                                   static_cast<std::uint32_t>(focus[rng.below(focus.size())]));
          } else {
            w = detail::topic_word(topic,
                                   static_cast<std::uint32_t>(rng.below(spec.vocab_per_topic)));
          }
          if (!text.empty()) text.push_back(' ');
          text += w;
        }
        TextPassage row;
        row.doc_id = doc_id;
        row.position = p;
        row.pid = doc_id + "-p" + std::to_string(p);
        row.text = std::move(text);
        data.passages.push_back(std::move(row));
      }
    }
  }

  const std::size_t total = data.passages.size();
  auto make_queries = [&](const std::string& split, std::uint32_t count,
                          std::vector<std::pair<std::string, std::string>>& queries,
                          std::map<std::string, std::map<std::string, int>>& qrels) {
    for (std::uint32_t qi = 0; qi < count; ++qi) {
      Rng rng(mix_keys({spec.seed, fnv1a("query"), fnv1a(split), qi}));
      const TextPassage& src = data.passages[rng.below(total)];
      std::vector<std::string> words = tokenize_words(src.text);
      const std::uint32_t want =
          spec.query_min_tokens +
          static_cast<std::uint32_t>(rng.below(spec.query_max_tokens - spec.query_min_tokens +
                                               1));
      const std::size_t span = std::min<std::size_t>(want, words.size());
      const std::size_t start = rng.below(words.size() - span + 1);
      std::vector<std::string> picked(words.begin() + static_cast<std::ptrdiff_t>(start),
                                      words.begin() + static_cast<std::ptrdiff_t>(start + span));
      std::vector<std::string> kept;
      for (std::string& w : picked) {
        if (rng.real01() < spec.query_corruption) {
          if (rng.real01() < 0.5) continue;  // drop
          // swap for a random vocabulary word
          if (rng.real01() < 0.2 && spec.shared_vocab > 0) {
            kept.push_back(detail::shared_word(
                static_cast<std::uint32_t>(rng.below(spec.shared_vocab))));
          } else {
            kept.push_back(detail::topic_word(
                static_cast<std::uint32_t>(rng.below(spec.topics)),
                static_cast<std::uint32_t>(rng.below(spec.vocab_per_topic))));
          }
        } else {
          kept.push_back(std::move(w));
        }
      }
      if (kept.empty()) kept.push_back(words[start]);
      std::string text;
      for (const std::string& w : kept) {
        if (!text.empty()) text.push_back(' ');
        text += w;
      }
      const std::string qid = split + "-q" + std::to_string(qi);
      queries.emplace_back(qid, std::move(text));
      auto& judged = qrels[qid];
      judged[src.pid] = 1;
      for (std::uint32_t p = 0; p < spec.passages_per_doc; ++p) {
        judged[src.doc_id + "-p" + std::to_string(p)] = 1;
      }
    }
  };
  make_queries("train", spec.train_queries, data.train_queries, data.train_qrels);
  make_queries("dev", spec.dev_queries, data.dev_queries, data.dev_qrels);
  return data;
}

}  // namespace mvr
