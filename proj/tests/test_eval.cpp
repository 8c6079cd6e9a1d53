#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvr/eval.hpp"
#include "mvr/rng.hpp"

using namespace mvr;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("mrr_at definition cases") {
  Qrels qrels = {{"q1", {{"rel", 1}, {"other", 0}}}};
  SECTION("relevant at rank 1") {
    RunFile run = {{"q1", {{"rel", 3.0}, {"x", 2.0}}}};
    CHECK(mrr_at(run, qrels).value == 1.0);
  }
  SECTION("relevant at rank 3") {
    RunFile run = {{"q1", {{"a", 3.0}, {"b", 2.5}, {"rel", 2.0}}}};
    CHECK(mrr_at(run, qrels).value == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SECTION("relevant at rank 11 with cutoff 10 scores zero") {
    RunFile run;
    for (int i = 0; i < 10; ++i) run["q1"].push_back({"p" + std::to_string(i), 20.0 - i});
    run["q1"].push_back({"rel", 1.0});
    CHECK(mrr_at(run, qrels, 10).value == 0.0);
  }
  SECTION("run query without judgments is excluded with counter") {
    RunFile run = {{"q1", {{"rel", 1.0}}}, {"mystery", {{"rel", 1.0}}}};
    MetricValue m = mrr_at(run, qrels);
    CHECK(m.value == 1.0);
    CHECK(m.n_queries == 1);
    CHECK(m.n_skipped == 1);
  }
}

TEST_CASE("recall_at definition cases") {
  Qrels qrels = {{"q1", {{"r1", 1}, {"r2", 2}}}};
  SECTION("all relevant retrieved") {
    RunFile run = {{"q1", {{"r1", 2.0}, {"r2", 1.0}}}};
    CHECK(recall_at(run, qrels, 10).value == 1.0);
  }
  SECTION("none retrieved") {
    RunFile run = {{"q1", {{"x", 2.0}}}};
    CHECK(recall_at(run, qrels, 10).value == 0.0);
  }
  SECTION("one of two within cutoff") {
    RunFile run = {{"q1", {{"r1", 3.0}, {"x", 2.0}, {"r2", 1.0}}}};
    CHECK(recall_at(run, qrels, 2).value == 0.5);
  }
  SECTION("zero-relevant query excluded") {
    Qrels q2 = {{"q1", {{"r1", 1}}}, {"q2", {{"p", 0}}}};
    RunFile run = {{"q1", {{"r1", 1.0}}}, {"q2", {{"p", 1.0}}}};
    MetricValue m = recall_at(run, q2, 10);
    CHECK(m.value == 1.0);
    CHECK(m.n_queries == 1);
    CHECK(m.n_skipped == 1);
  }
}

TEST_CASE("ndcg_at definition cases") {
  SECTION("ideal ordering scores exactly 1") {
    Qrels qrels = {{"q1", {{"a", 3}, {"b", 2}, {"c", 1}, {"d", 0}}}};
    RunFile run = {{"q1", {{"a", 4.0}, {"b", 3.0}, {"c", 2.0}, {"d", 1.0}}}};
    CHECK(std::fabs(ndcg_at(run, qrels).value - 1.0) <= 1e-12);
  }
  SECTION("single grade-1 relevant at rank 2") {
    Qrels qrels = {{"q1", {{"rel", 1}}}};
    RunFile run = {{"q1", {{"x", 2.0}, {"rel", 1.0}}}};
    CHECK(ndcg_at(run, qrels).value == Catch::Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
  }
  SECTION("query missing from run contributes zero") {
    Qrels qrels = {{"q1", {{"rel", 1}}}, {"q2", {{"rel2", 1}}}};
    RunFile run = {{"q1", {{"rel", 1.0}}}};
    CHECK(ndcg_at(run, qrels).value == Catch::Approx(0.5).epsilon(1e-12));
  }
  SECTION("zero-ideal query excluded with counter") {
    Qrels qrels = {{"q1", {{"rel", 1}}}, {"q2", {{"junk", 0}}}};
    RunFile run = {{"q1", {{"rel", 1.0}}}};
    MetricValue m = ndcg_at(run, qrels);
    CHECK(m.value == 1.0);
    CHECK(m.n_skipped == 1);
  }
}

TEST_CASE("metrics stay in [0,1] and ignore monotone score transforms") {
  Rng rng(13);
  for (int rep = 0; rep < 10; ++rep) {
    Qrels qrels;
    RunFile run, run_scaled;
    for (int q = 0; q < 5; ++q) {
      const std::string qid = "q" + std::to_string(q);
      for (int p = 0; p < 8; ++p) {
        const std::string pid = "p" + std::to_string(p);
        if (rng.real01() < 0.3) qrels[qid][pid] = 1 + static_cast<int>(rng.below(3));
      }
      std::vector<RunEntry> entries;
      for (int p = 0; p < 8; ++p) {
        entries.push_back({"p" + std::to_string(p), rng.uniform(0, 10)});
      }
      canonicalize_ranking(entries);
      run[qid] = entries;
      std::vector<RunEntry> scaled;
      for (const auto& e : entries) scaled.push_back({e.pid, 3.0 * e.score + 7.0});
      run_scaled[qid] = scaled;
    }
    for (auto metric : {&mrr_at, &ndcg_at}) {
      MetricValue a = metric(run, qrels, 10);
      MetricValue b = metric(run_scaled, qrels, 10);
      CHECK(a.value >= 0.0);
      CHECK(a.value <= 1.0);
      CHECK(a.value == b.value);
    }
    CHECK(recall_at(run, qrels, 5).value == recall_at(run_scaled, qrels, 5).value);
  }
}

TEST_CASE("qrels file round-trip") {
  Qrels q = {{"q1", {{"p1", 1}, {"p2", 0}}}, {"q2", {{"p3", 2}}}};
  write_qrels(q, "test_qrels.txt");
  Qrels r = read_qrels("test_qrels.txt");
  CHECK(r == q);
  std::remove("test_qrels.txt");
}

TEST_CASE("run file round-trip is byte-identical for canonical files") {
  RunFile run = {{"q1", {{"a", 3.25}, {"b", 1.5}}}, {"q2", {{"c", 0.125}}}};
  write_run(run, "test_run_a.txt");
  RunFile again = read_run("test_run_a.txt");
  write_run(again, "test_run_b.txt");
  CHECK(slurp("test_run_a.txt") == slurp("test_run_b.txt"));
  std::remove("test_run_a.txt");
  std::remove("test_run_b.txt");
}

TEST_CASE("reading a tie file canonicalizes pid order") {
  {
    std::ofstream out("test_tie_run.txt");
    out << "q1 Q0 zebra 1 5 tag\n";
    out << "q1 Q0 apple 2 5 tag\n";
    out << "q1 Q0 mango 3 4 tag\n";
  }
  RunFile run = read_run("test_tie_run.txt");
  REQUIRE(run["q1"].size() == 3);
  CHECK(run["q1"][0].pid == "apple");  // tie at 5 reordered by pid
  CHECK(run["q1"][1].pid == "zebra");
  CHECK(run["q1"][2].pid == "mango");
  std::remove("test_tie_run.txt");
}

TEST_CASE("malformed lines raise parse errors with line numbers") {
  {
    std::ofstream out("test_bad_run.txt");
    out << "q1 Q0 pid 1 2.5 tag\n";
    out << "q1 Q0 only-four 2\n";
  }
  REQUIRE_THROWS_MATCHES(
      read_run("test_bad_run.txt"), DataError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(":2")));
  std::remove("test_bad_run.txt");

  {
    std::ofstream out("test_bad_qrels.txt");
    out << "q1 0 p1 not-a-number\n";
  }
  REQUIRE_THROWS_MATCHES(
      read_qrels("test_bad_qrels.txt"), DataError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(":1")));
  std::remove("test_bad_qrels.txt");
}

TEST_CASE("metric report CSV format") {
  write_metric_report({{"mrr", 10, 0.5, 42}, {"recall", 50, 1.0, 42}}, "test_metrics.csv");
  CHECK(slurp("test_metrics.csv") ==
        "metric,cutoff,value,n_queries\nmrr,10,0.500000,42\nrecall,50,1.000000,42\n");
  std::remove("test_metrics.csv");
}

TEST_CASE("random ranking MRR expectation matches a direct simulation") {
  // analytic value for small N validated by exhaustive expectation
  const std::size_t n = 6, r = 2, cutoff = 3;
  // enumerate all positions of first relevant: P(first at k)
  // P(1)=2/6; P(2)=(4/6)(2/5); P(3)=(4/6)(3/5)(2/4)
  const double expect = (2.0 / 6.0) * 1.0 + (4.0 / 6.0) * (2.0 / 5.0) / 2.0 +
                        (4.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) / 3.0;
  CHECK(random_ranking_mrr_expectation(n, r, cutoff) == Catch::Approx(expect).epsilon(1e-12));
}
