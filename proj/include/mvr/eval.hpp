#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvr/errors.hpp"

// TREC-style ranking metrics (MRR@k, Recall@k, nDCG@k) and run/qrels file
// handling.

namespace mvr {

/// query id -> passage id -> integer relevance grade >= 0.
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct RunEntry {
  std::string pid;
  double score;
};

/// query id -> ranked passages, scores non-increasing, ties by ascending
/// passage id, ranks implicitly 1..n.
using RunFile = std::map<std::string, std::vector<RunEntry>>;

struct MetricValue {
  double value = 0.0;
  std::size_t n_queries = 0;  // queries that entered the mean
  std::size_t n_skipped = 0;  // run queries without judgments, or excluded queries
};

inline void canonicalize_ranking(std::vector<RunEntry>& entries) {
  std::stable_sort(entries.begin(), entries.end(), [](const RunEntry& a, const RunEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.pid < b.pid;
  });
}

namespace detail {

/// Counts run queries that have no judgments at all.
inline std::size_t unjudged_run_queries(const RunFile& run, const Qrels& qrels) {
  std::size_t n = 0;
  for (const auto& [qid, entries] : run) {
    if (!qrels.count(qid)) ++n;
  }
  return n;
}

}  // namespace detail

/// Mean over judged queries of 1/rank of the first passage with grade >= 1
/// within the cutoff, else 0. Run queries absent from the qrels are excluded
/// (counted in n_skipped).
inline MetricValue mrr_at(const RunFile& run, const Qrels& qrels, std::size_t cutoff = 10) {
  MetricValue m;
  m.n_skipped = detail::unjudged_run_queries(run, qrels);
  double total = 0.0;
  for (const auto& [qid, judged] : qrels) {
    ++m.n_queries;
    auto it = run.find(qid);
    if (it == run.end()) continue;
    const auto& entries = it->second;
    for (std::size_t r = 0; r < entries.size() && r < cutoff; ++r) {
      auto jit = judged.find(entries[r].pid);
      if (jit != judged.end() && jit->second >= 1) {
        total += 1.0 / static_cast<double>(r + 1);
        break;
      }
    }
  }
  m.value = m.n_queries ? total / static_cast<double>(m.n_queries) : 0.0;
  return m;
}

/// Mean over queries of |relevant in top-cutoff| / |relevant|. Queries with
/// no relevant passage are excluded (counted in n_skipped).
inline MetricValue recall_at(const RunFile& run, const Qrels& qrels, std::size_t cutoff) {
  MetricValue m;
  m.n_skipped = detail::unjudged_run_queries(run, qrels);
  double total = 0.0;
  for (const auto& [qid, judged] : qrels) {
    std::size_t relevant = 0;
    for (const auto& [pid, grade] : judged) relevant += (grade >= 1);
    if (relevant == 0) {
      ++m.n_skipped;
      continue;
    }
    ++m.n_queries;
    auto it = run.find(qid);
    if (it == run.end()) continue;
    const auto& entries = it->second;
    std::size_t hit = 0;
    for (std::size_t r = 0; r < entries.size() && r < cutoff; ++r) {
      auto jit = judged.find(entries[r].pid);
      hit += (jit != judged.end() && jit->second >= 1);
    }
    total += static_cast<double>(hit) / static_cast<double>(relevant);
  }
  m.value = m.n_queries ? total / static_cast<double>(m.n_queries) : 0.0;
  return m;
}

/// DCG with exponential gain (2^grade - 1) / log2(rank + 1), normalized by
/// the ideal DCG. Queries whose ideal DCG is zero are excluded.
inline MetricValue ndcg_at(const RunFile& run, const Qrels& qrels, std::size_t cutoff = 10) {
  MetricValue m;
  m.n_skipped = detail::unjudged_run_queries(run, qrels);
  double total = 0.0;
  for (const auto& [qid, judged] : qrels) {
    std::vector<int> grades;
    for (const auto& [pid, grade] : judged) grades.push_back(grade);
    std::sort(grades.rbegin(), grades.rend());
    double ideal = 0.0;
    for (std::size_t r = 0; r < grades.size() && r < cutoff; ++r) {
      ideal += (std::pow(2.0, grades[r]) - 1.0) / std::log2(static_cast<double>(r + 2));
    }
    if (ideal == 0.0) {
      ++m.n_skipped;
      continue;
    }
    ++m.n_queries;
    auto it = run.find(qid);
    if (it == run.end()) continue;
    double dcg = 0.0;
    const auto& entries = it->second;
    for (std::size_t r = 0; r < entries.size() && r < cutoff; ++r) {
      auto jit = judged.find(entries[r].pid);
      if (jit != judged.end() && jit->second > 0) {
        dcg += (std::pow(2.0, jit->second) - 1.0) / std::log2(static_cast<double>(r + 2));
      }
    }
    total += dcg / ideal;
  }
  m.value = m.n_queries ? total / static_cast<double>(m.n_queries) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// files

/// Qrels lines: qid 0 pid grade (whitespace-separated).
inline Qrels read_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  Qrels q;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string qid, zero, pid;
    long grade;
    if (!(is >> qid >> zero >> pid >> grade) || grade < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed qrels line");
    }
    q[qid][pid] = static_cast<int>(grade);
  }
  return q;
}

inline void write_qrels(const Qrels& q, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& [qid, judged] : q) {
    for (const auto& [pid, grade] : judged) {
      out << qid << " 0 " << pid << " " << grade << "\n";
    }
  }
  if (!out) throw DataError(path + ": write failed");
}

inline std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Run lines: qid Q0 pid rank score tag. Reading canonicalizes each query's
/// ranking (score descending, ties by ascending pid) and renumbers ranks, so
/// writing a canonical file back is byte-identical.
inline RunFile read_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open for reading");
  RunFile run;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string qid, q0, pid, tag;
    long rank;
    double score;
    if (!(is >> qid >> q0 >> pid >> rank >> score >> tag)) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed run line");
    }
    run[qid].push_back({pid, score});
  }
  for (auto& [qid, entries] : run) canonicalize_ranking(entries);
  return run;
}

inline void write_run(const RunFile& run, const std::string& path,
                      const std::string& tag = "mvr") {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& [qid, entries] : run) {
    for (std::size_t r = 0; r < entries.size(); ++r) {
      out << qid << " Q0 " << entries[r].pid << " " << (r + 1) << " "
          << format_score(entries[r].score) << " " << tag << "\n";
    }
  }
  if (!out) throw DataError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// metric report

struct MetricRow {
  std::string metric;
  std::size_t cutoff;
  double value;
  std::size_t n_queries;
};

/// CSV: metric,cutoff,value,n_queries
inline void write_metric_report(const std::vector<MetricRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << "metric,cutoff,value,n_queries\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.value);
    out << r.metric << "," << r.cutoff << "," << buf << "," << r.n_queries << "\n";
  }
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<MetricRow> standard_metrics(const RunFile& run, const Qrels& qrels) {
  return {
      {"mrr", 10, mrr_at(run, qrels, 10).value, mrr_at(run, qrels, 10).n_queries},
      {"recall", 50, recall_at(run, qrels, 50).value, recall_at(run, qrels, 50).n_queries},
      {"recall", 1000, recall_at(run, qrels, 1000).value, recall_at(run, qrels, 1000).n_queries},
      {"ndcg", 10, ndcg_at(run, qrels, 10).value, ndcg_at(run, qrels, 10).n_queries},
  };
}

/// Expected MRR@cutoff of a uniformly random ranking of `corpus_size`
/// passages containing `relevant` relevant ones (drawn without replacement).
inline double random_ranking_mrr_expectation(std::size_t corpus_size, std::size_t relevant,
                                             std::size_t cutoff = 10) {
  if (relevant == 0 || corpus_size == 0) return 0.0;
  double expect = 0.0;
  double p_none_before = 1.0;
  const double n = static_cast<double>(corpus_size);
  const double r = static_cast<double>(relevant);
  for (std::size_t rank = 1; rank <= cutoff && rank <= corpus_size; ++rank) {
    const double remaining = n - static_cast<double>(rank - 1);
    const double p_first_here = p_none_before * (r / remaining);
    expect += p_first_here / static_cast<double>(rank);
    p_none_before *= (remaining - r) / remaining;
    if (p_none_before <= 0.0) break;
  }
  return expect;
}

}  // namespace mvr
