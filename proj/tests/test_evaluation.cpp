#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmusic/evaluation.hpp"
#include "xmusic/rng.hpp"

using namespace xmusic;

namespace {

// Pairwise-counting ROC oracle: P(pos > neg) + 0.5 P(tie).
double oracle_roc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  long long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Rank-counting AP oracle; no sort, ties break toward the smaller index.
double oracle_ap(const std::vector<double>& s, const std::vector<int>& y) {
  double sum = 0.0;
  int n_pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    ++n_pos;
    int rank = 1, hits = 1;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j == i) continue;
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) {
        ++rank;
        if (y[j] == 1) ++hits;
      }
    }
    sum += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return sum / n_pos;
}

std::pair<double, double> oracle_best_f1(const std::vector<double>& s,
                                         const std::vector<int>& y) {
  std::vector<double> ts(s);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.push_back(std::numeric_limits<double>::infinity());
  double best_t = ts.front(), best_f1 = -1.0;
  for (double t : ts) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t && y[i] == 1) ++tp;
      else if (s[i] >= t) ++fp;
      else if (y[i] == 1) ++fn;
    }
    const double f1 = (2 * tp + fp + fn) == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    if (f1 > best_f1) { best_f1 = f1; best_t = t; }
  }
  return {best_t, best_f1};
}

Tensor2 random_unit_rows(int rows, int cols, Rng& rng) {
  Tensor2 m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    double norm_sq = 0.0;
    for (int k = 0; k < cols; ++k) {
      m.at(i, k) = rng.normal();
      norm_sq += m.at(i, k) * m.at(i, k);
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (int k = 0; k < cols; ++k) m.at(i, k) *= inv;
  }
  return m;
}

}  // namespace

TEST_CASE("roc_auc and average_precision match hand values") {
  const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  CHECK(roc_auc(s, {1, 1, 0, 0}) == 1.0);
  CHECK(roc_auc(s, {0, 0, 1, 1}) == 0.0);
  CHECK(roc_auc(s, {1, 0, 1, 0}) == 0.75);
  // All-tied scores: every pair counts half.
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);

  CHECK(average_precision(s, {1, 1, 0, 0}) == 1.0);
  CHECK(std::abs(average_precision(s, {1, 0, 1, 0}) - (1.0 + 2.0 / 3.0) / 2.0) <= 1e-15);
  // Relevant item buried last.
  CHECK(average_precision(s, {0, 0, 0, 1}) == 0.25);

  CHECK_THROWS_AS(roc_auc(s, {1, 1, 1, 1}), undefined_metric_error);
  CHECK_THROWS_AS(roc_auc(s, {0, 0, 0, 0}), undefined_metric_error);
  CHECK_THROWS_AS(average_precision(s, {0, 0, 0, 0}), undefined_metric_error);
  CHECK_THROWS_AS(roc_auc({0.1}, {1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc({}, {}), std::invalid_argument);
}

TEST_CASE("best_f1_threshold sweeps all cuts and keeps the lowest tie") {
  const auto [t1, f1] = best_f1_threshold({0.1, 0.4, 0.6, 0.9}, {0, 0, 1, 1});
  CHECK(t1 == 0.6);
  CHECK(f1 == 1.0);

  // Every label positive: the minimum score classifies everything right.
  const auto [t2, f2] = best_f1_threshold({0.3, 0.7}, {1, 1});
  CHECK(t2 == 0.3);
  CHECK(f2 == 1.0);

  // F1 2/3 at both t=1 (tp2 fp2) and t=4 (tp1 fn1): the lower cut wins.
  const auto [t3, f3] = best_f1_threshold({4.0, 3.0, 2.0, 1.0}, {1, 0, 0, 1});
  CHECK(t3 == 1.0);
  CHECK(f3 == 2.0 / 3.0);

  CHECK_THROWS_AS(best_f1_threshold({0.5, 0.6}, {0, 0}), undefined_metric_error);
}

TEST_CASE("binary metrics agree with pairwise oracles on random instances") {
  Rng rng(2024);
  int checked = 0;
  while (checked < 200) {
    const int n = rng.uniform_int(3, 64);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    const bool quantize = rng.uniform_real() < 0.5;  // force score ties half the time
    for (int i = 0; i < n; ++i) {
      double v = rng.uniform_real();
      if (quantize) v = std::round(v * 4.0) / 4.0;
      s[static_cast<std::size_t>(i)] = v;
      y[static_cast<std::size_t>(i)] = rng.uniform_real() < 0.5 ? 1 : 0;
    }
    int n_pos = 0;
    for (int v : y) n_pos += v;
    if (n_pos == 0 || n_pos == n) continue;
    ++checked;

    CHECK(std::abs(roc_auc(s, y) - oracle_roc(s, y)) <= 1e-9);
    CHECK(std::abs(average_precision(s, y) - oracle_ap(s, y)) <= 1e-9);
    const auto got = best_f1_threshold(s, y);
    const auto want = oracle_best_f1(s, y);
    CHECK(got.first == want.first);
    CHECK(std::abs(got.second - want.second) <= 1e-12);
  }
}

TEST_CASE("roc_auc is invariant under strictly increasing score transforms") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(4, 32);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = std::round(rng.uniform_real() * 8.0) / 8.0;
      y[static_cast<std::size_t>(i)] = i % 2;
    }
    std::vector<double> affine(s), expo(s);
    for (double& v : affine) v = 3.0 * v + 11.0;
    for (double& v : expo) v = std::exp(v);  // quantized inputs keep ties exact
    const double base = roc_auc(s, y);
    CHECK(roc_auc(affine, y) == base);
    CHECK(roc_auc(expo, y) == base);
  }
}

TEST_CASE("sentence retrieval ranks by dot product with id tie-breaks") {
  SUBCASE("perfect self-retrieval") {
    Rng rng(3);
    EmbeddingStore store;
    store.vectors = random_unit_rows(12, 6, rng);
    for (int i = 0; i < 12; ++i) store.ids.push_back("item_" + std::to_string(100 + i));
    std::map<std::string, std::string> gt;
    for (const auto& id : store.ids) gt[id] = id;
    const MetricReport r = sentence_retrieval(store, store, gt);
    CHECK(r.r_at_1 == 1.0);
    CHECK(r.r_at_5 == 1.0);
    CHECK(r.r_at_10 == 1.0);
    CHECK(r.map10 == 1.0);
    CHECK(r.medr == 1.0);
    CHECK(std::isnan(r.roc_auc_macro));  // retrieval fills only ranking fields
  }

  SUBCASE("hand-built ranks 1, 3, 7") {
    // Corpus along coordinate axes; each query is a mixture placing the true
    // item at a chosen rank.
    const int n = 8;
    EmbeddingStore corpus;
    corpus.vectors = Tensor2::zeros(n, n);
    for (int i = 0; i < n; ++i) {
      corpus.vectors.at(i, i) = 1.0;
      corpus.ids.push_back("c" + std::to_string(i));
    }
    auto query_with_rank = [&](int gt_row, int rank) {
      // rank-1 distractors score 0.9, the true item 0.5, the rest 0.1.
      std::vector<double> q(static_cast<std::size_t>(n), 0.1);
      q[static_cast<std::size_t>(gt_row)] = 0.5;
      int placed = 0;
      for (int j = 0; j < n && placed < rank - 1; ++j) {
        if (j == gt_row) continue;
        q[static_cast<std::size_t>(j)] = 0.9;
        ++placed;
      }
      return q;
    };
    EmbeddingStore queries;
    queries.vectors = Tensor2(3, n);
    const int want_ranks[3] = {1, 3, 7};
    std::map<std::string, std::string> gt;
    for (int qi = 0; qi < 3; ++qi) {
      const auto q = query_with_rank(qi, want_ranks[qi]);
      for (int k = 0; k < n; ++k) queries.vectors.at(qi, k) = q[static_cast<std::size_t>(k)];
      queries.ids.push_back("q" + std::to_string(qi));
      gt["q" + std::to_string(qi)] = "c" + std::to_string(qi);
    }
    const MetricReport r = sentence_retrieval(queries, corpus, gt);
    CHECK(r.medr == 3.0);
    CHECK(std::abs(r.r_at_1 - 1.0 / 3.0) <= 1e-15);
    CHECK(std::abs(r.r_at_5 - 2.0 / 3.0) <= 1e-15);
    CHECK(r.r_at_10 == 1.0);
    CHECK(std::abs(r.map10 - (1.0 + 1.0 / 3.0 + 1.0 / 7.0) / 3.0) <= 1e-15);
  }

  SUBCASE("duplicate corpus vectors break ties by ascending id") {
    EmbeddingStore corpus;
    corpus.vectors = Tensor2(2, 2);
    corpus.vectors.at(0, 0) = 1.0;
    corpus.vectors.at(1, 0) = 1.0;
    corpus.ids = {"a", "b"};
    EmbeddingStore query;
    query.vectors = Tensor2(1, 2);
    query.vectors.at(0, 0) = 1.0;
    query.ids = {"q"};
    MetricReport win = sentence_retrieval(query, corpus, {{"q", "a"}});
    CHECK(win.r_at_1 == 1.0);  // smaller id wins the tie
    MetricReport lose = sentence_retrieval(query, corpus, {{"q", "b"}});
    CHECK(lose.r_at_1 == 0.0);
    CHECK(lose.medr == 2.0);
  }

  SUBCASE("corpus row order does not matter") {
    Rng rng(11);
    EmbeddingStore corpus;
    corpus.vectors = random_unit_rows(20, 5, rng);
    for (int i = 0; i < 20; ++i) corpus.ids.push_back("t" + std::to_string(i));
    EmbeddingStore queries;
    queries.vectors = random_unit_rows(6, 5, rng);
    std::map<std::string, std::string> gt;
    for (int i = 0; i < 6; ++i) {
      queries.ids.push_back("q" + std::to_string(i));
      gt["q" + std::to_string(i)] = "t" + std::to_string(3 * i);
    }
    const MetricReport base = sentence_retrieval(queries, corpus, gt);
    EmbeddingStore shuffled;
    std::vector<int> order(20);
    for (int i = 0; i < 20; ++i) order[static_cast<std::size_t>(i)] = (7 * i + 3) % 20;
    shuffled.vectors = Tensor2(20, 5);
    for (int i = 0; i < 20; ++i) {
      const int src = order[static_cast<std::size_t>(i)];
      shuffled.ids.push_back(corpus.ids[static_cast<std::size_t>(src)]);
      for (int k = 0; k < 5; ++k) shuffled.vectors.at(i, k) = corpus.vectors.at(src, k);
    }
    const MetricReport moved = sentence_retrieval(queries, shuffled, gt);
    CHECK(moved.r_at_1 == base.r_at_1);
    CHECK(moved.r_at_5 == base.r_at_5);
    CHECK(moved.map10 == base.map10);
    CHECK(moved.medr == base.medr);
  }

  SUBCASE("map10 equals the truncated reciprocal rank of the single relevant item") {
    Rng rng(29);
    EmbeddingStore corpus;
    corpus.vectors = random_unit_rows(30, 8, rng);
    for (int i = 0; i < 30; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "item_%02d", i);
      corpus.ids.push_back(buf);
    }
    EmbeddingStore queries;
    queries.vectors = random_unit_rows(100, 8, rng);
    std::map<std::string, std::string> gt;
    for (int q = 0; q < 100; ++q) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "q_%03d", q);
      queries.ids.push_back(buf);
      gt[buf] = corpus.ids[static_cast<std::size_t>(q % 30)];
    }
    double expected = 0.0;
    for (int q = 0; q < 100; ++q) {
      const int gt_row = q % 30;
      double gt_score = 0.0;
      for (int k = 0; k < 8; ++k) gt_score += queries.vectors.at(q, k) * corpus.vectors.at(gt_row, k);
      int rank = 1;
      for (int i = 0; i < 30; ++i) {
        if (i == gt_row) continue;
        double sc = 0.0;
        for (int k = 0; k < 8; ++k) sc += queries.vectors.at(q, k) * corpus.vectors.at(i, k);
        if (sc > gt_score || (sc == gt_score && corpus.ids[static_cast<std::size_t>(i)] <
                                                    corpus.ids[static_cast<std::size_t>(gt_row)]))
          ++rank;
      }
      if (rank <= 10) expected += 1.0 / rank;
    }
    expected /= 100.0;
    const MetricReport r = sentence_retrieval(queries, corpus, gt);
    CHECK(r.map10 == expected);
  }

  SUBCASE("missing ground truth and shape mismatches are rejected") {
    Rng rng(4);
    EmbeddingStore corpus;
    corpus.vectors = random_unit_rows(3, 4, rng);
    corpus.ids = {"a", "b", "c"};
    EmbeddingStore query;
    query.vectors = random_unit_rows(1, 4, rng);
    query.ids = {"q"};
    CHECK_THROWS_WITH_AS(sentence_retrieval(query, corpus, {}),
                         doctest::Contains("no ground truth"), std::runtime_error);
    CHECK_THROWS_WITH_AS(sentence_retrieval(query, corpus, {{"q", "zz"}}),
                         doctest::Contains("not in the corpus"), std::runtime_error);
    EmbeddingStore narrow;
    narrow.vectors = random_unit_rows(1, 3, rng);
    narrow.ids = {"q"};
    CHECK_THROWS_AS(sentence_retrieval(narrow, corpus, {{"q", "a"}}), std::invalid_argument);
    EmbeddingStore empty;
    empty.vectors = Tensor2(0, 4);
    CHECK_THROWS_AS(sentence_retrieval(empty, corpus, {}), std::invalid_argument);
  }
}

TEST_CASE("word overlap retrieval counts query words with multiplicity") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> items{
      {"song_c", {"loud rock", "guitar"}},
      {"song_a", {"quiet", "piano"}},
      {"song_b", {"rock", "drums"}},
  };
  SUBCASE("overlap ordering") {
    const RankedResult r = word_overlap_retrieval(items, "loud rock guitar");
    REQUIRE(r.items.size() == 3);
    CHECK(r.items[0].first == "song_c");
    CHECK(r.items[0].second == 3.0);
    CHECK(r.items[1].first == "song_b");
    CHECK(r.items[1].second == 1.0);
    CHECK(r.items[2].first == "song_a");
    CHECK(r.items[2].second == 0.0);
  }
  SUBCASE("repeated query words count twice") {
    const RankedResult r = word_overlap_retrieval(items, "rock rock");
    CHECK(r.items[0].second == 2.0);
    CHECK(r.items[1].second == 2.0);
    // total tie between song_b and song_c: ascending id
    CHECK(r.items[0].first == "song_b");
    CHECK(r.items[1].first == "song_c");
  }
  SUBCASE("no overlap at all falls back to ascending id") {
    const RankedResult r = word_overlap_retrieval(items, "zither");
    CHECK(r.items[0].first == "song_a");
    CHECK(r.items[1].first == "song_b");
    CHECK(r.items[2].first == "song_c");
  }
  SUBCASE("empty query is rejected") {
    CHECK_THROWS_AS(word_overlap_retrieval(items, "   "), std::invalid_argument);
  }
}

TEST_CASE("zero-shot scores form the full dot-product matrix") {
  Tensor2 items(2, 3);
  items.at(0, 0) = 1.0;                     // e_x
  items.at(1, 1) = 1.0;                     // e_y
  Tensor2 labels(2, 3);
  labels.at(0, 0) = 1.0;                    // e_x
  const double inv_rt2 = 1.0 / std::sqrt(2.0);
  labels.at(1, 0) = inv_rt2;                // bisector of e_x, e_y
  labels.at(1, 1) = inv_rt2;
  const Tensor2 s = zero_shot_scores(items, labels);
  REQUIRE(s.rows == 2);
  REQUIRE(s.cols == 2);
  CHECK(s.at(0, 0) == 1.0);
  CHECK(s.at(1, 0) == 0.0);
  CHECK(std::abs(s.at(0, 1) - inv_rt2) <= 1e-15);
  CHECK(std::abs(s.at(1, 1) - inv_rt2) <= 1e-15);

  Tensor2 wrong(2, 4);
  CHECK_THROWS_AS(zero_shot_scores(items, wrong), std::invalid_argument);
}

TEST_CASE("evaluate_tags skips single-class columns and macro-averages the rest") {
  // 4 items, 3 tags; tag "mono" is all-positive and must be skipped.
  Tensor2 scores(4, 3);
  Tensor2 labels(4, 3);
  const double tag0_scores[4] = {0.9, 0.8, 0.2, 0.1};
  const int tag0_labels[4] = {1, 0, 1, 0};
  const double tag1_scores[4] = {0.7, 0.1, 0.6, 0.2};
  const int tag1_labels[4] = {1, 0, 1, 0};
  for (int i = 0; i < 4; ++i) {
    scores.at(i, 0) = tag0_scores[i];
    labels.at(i, 0) = tag0_labels[i];
    scores.at(i, 1) = tag1_scores[i];
    labels.at(i, 1) = tag1_labels[i];
    scores.at(i, 2) = 0.5;
    labels.at(i, 2) = 1.0;
  }
  const MetricReport r = evaluate_tags(scores, labels, {"alpha", "beta", "mono"});
  REQUIRE(r.skipped_tags == std::vector<std::string>{"mono"});
  REQUIRE(r.per_tag_roc.size() == 2);
  const double roc0 = roc_auc({tag0_scores, tag0_scores + 4}, {tag0_labels, tag0_labels + 4});
  const double roc1 = roc_auc({tag1_scores, tag1_scores + 4}, {tag1_labels, tag1_labels + 4});
  CHECK(r.per_tag_roc.at("alpha") == roc0);
  CHECK(r.per_tag_roc.at("beta") == roc1);
  CHECK(r.roc_auc_macro == (roc0 + roc1) / 2.0);
  const double ap0 = average_precision({tag0_scores, tag0_scores + 4}, {tag0_labels, tag0_labels + 4});
  const double ap1 = average_precision({tag1_scores, tag1_scores + 4}, {tag1_labels, tag1_labels + 4});
  CHECK(r.pr_auc_macro == (ap0 + ap1) / 2.0);
  CHECK(std::isnan(r.medr));

  CHECK_THROWS_AS(evaluate_tags(scores, Tensor2(4, 2), {"a", "b"}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_tags(scores, labels, {"a", "b"}), std::invalid_argument);

  // Every tag single-class: macros stay undefined, all tags listed.
  Tensor2 all_ones(2, 1);
  all_ones.at(0, 0) = 1.0;
  all_ones.at(1, 0) = 1.0;
  Tensor2 any_scores(2, 1);
  const MetricReport empty = evaluate_tags(any_scores, all_ones, {"solo"});
  CHECK(std::isnan(empty.roc_auc_macro));
  CHECK(empty.skipped_tags == std::vector<std::string>{"solo"});
}

TEST_CASE("report JSON uses fixed keys and null for absent metrics") {
  MetricReport r;
  r.r_at_1 = 0.5;
  r.map10 = 0.25;
  r.medr = 2.0;
  r.skipped_tags = {"quiet"};
  r.per_tag_roc["loud"] = 0.75;
  r.per_tag_pr["loud"] = 0.5;
  r.seed = 99;
  r.store_checksum = "00ff";
  const std::string text = to_json(r);
  const auto j = nlohmann::json::parse(text);
  CHECK(j.at("roc_auc_macro").is_null());
  CHECK(j.at("pr_auc_macro").is_null());
  CHECK(j.at("r_at_1").get<double>() == 0.5);
  CHECK(j.at("r_at_5").is_null());
  CHECK(j.at("r_at_10").is_null());
  CHECK(j.at("map10").get<double>() == 0.25);
  CHECK(j.at("medr").get<double>() == 2.0);
  CHECK(j.at("skipped_tags").get<std::vector<std::string>>() ==
        std::vector<std::string>{"quiet"});
  CHECK(j.at("per_tag").at("roc").at("loud").get<double>() == 0.75);
  CHECK(j.at("per_tag").at("pr").at("loud").get<double>() == 0.5);
  CHECK(j.at("metadata").at("seed").get<unsigned long long>() == 99);
  CHECK(j.at("metadata").at("store_checksum").get<std::string>() == "00ff");
  CHECK(text.back() == '\n');
}

namespace {

// Two well-separated gaussian blobs, linearly separable.
ProbeData blob_data(Rng& rng) {
  const int per_split[3] = {60, 20, 20};
  int total = 0;
  for (int s : per_split) total += 2 * s;
  ProbeData data;
  data.features = Tensor2(total, 2);
  data.labels = Tensor2(total, 2);
  data.class_names = {"left", "right"};
  data.single_label = true;
  int row = 0;
  for (int split = 0; split < 3; ++split) {
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < per_split[split]; ++i) {
        data.features.at(row, 0) = (c == 0 ? -2.0 : 2.0) + 0.3 * rng.normal();
        data.features.at(row, 1) = 0.3 * rng.normal();
        data.labels.at(row, c) = 1.0;
        data.splits.push_back(split == 0 ? Split::kTrain
                                         : split == 1 ? Split::kValid : Split::kTest);
        ++row;
      }
    }
  }
  return data;
}

// Four corner clusters with XOR labels: no linear boundary separates them.
ProbeData xor_data(Rng& rng) {
  const int per_split[3] = {50, 12, 12};
  const double cx[4] = {0.0, 1.0, 0.0, 1.0};
  const double cy[4] = {0.0, 1.0, 1.0, 0.0};
  const int cls[4] = {0, 0, 1, 1};
  int total = 0;
  for (int s : per_split) total += 4 * s;
  ProbeData data;
  data.features = Tensor2(total, 2);
  data.labels = Tensor2(total, 2);
  data.class_names = {"same", "diff"};
  data.single_label = true;
  int row = 0;
  for (int split = 0; split < 3; ++split) {
    for (int corner = 0; corner < 4; ++corner) {
      for (int i = 0; i < per_split[split]; ++i) {
        data.features.at(row, 0) = cx[corner] + 0.1 * rng.normal();
        data.features.at(row, 1) = cy[corner] + 0.1 * rng.normal();
        data.labels.at(row, cls[corner]) = 1.0;
        data.splits.push_back(split == 0 ? Split::kTrain
                                         : split == 1 ? Split::kValid : Split::kTest);
        ++row;
      }
    }
  }
  return data;
}

}  // namespace

TEST_CASE("linear probe separates blobs and fails on xor; mlp solves xor") {
  Rng rng(17);
  const ProbeData blobs = blob_data(rng);
  const ProbeResult linear_blobs = probe(blobs, ProbeKind::kLinear, 5);
  CHECK(linear_blobs.accuracy == 1.0);
  CHECK(linear_blobs.f1_macro == 1.0);
  CHECK(std::isnan(linear_blobs.roc_auc_macro));  // multi-label fields unused
  CHECK(linear_blobs.validation_metric == 1.0);

  Rng xr(31);
  const ProbeData xo = xor_data(xr);
  const ProbeResult linear_xor = probe(xo, ProbeKind::kLinear, 5);
  CHECK(linear_xor.accuracy <= 0.6);
  const ProbeResult mlp_xor = probe(xo, ProbeKind::kMlp, 5);
  CHECK(mlp_xor.accuracy >= 0.95);
}

TEST_CASE("probe is deterministic and row-order independent on separable data") {
  Rng rng(23);
  const ProbeData blobs = blob_data(rng);
  const ProbeResult a = probe(blobs, ProbeKind::kLinear, 9);
  const ProbeResult b = probe(blobs, ProbeKind::kLinear, 9);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.f1_macro == b.f1_macro);
  CHECK(a.validation_metric == b.validation_metric);

  // Reverse every row; the learned decision on clean blobs is unchanged.
  ProbeData reversed;
  reversed.class_names = blobs.class_names;
  reversed.single_label = true;
  const int n = blobs.features.rows;
  reversed.features = Tensor2(n, blobs.features.cols);
  reversed.labels = Tensor2(n, blobs.labels.cols);
  for (int i = 0; i < n; ++i) {
    const int src = n - 1 - i;
    for (int k = 0; k < blobs.features.cols; ++k)
      reversed.features.at(i, k) = blobs.features.at(src, k);
    for (int k = 0; k < blobs.labels.cols; ++k)
      reversed.labels.at(i, k) = blobs.labels.at(src, k);
    reversed.splits.push_back(blobs.splits[static_cast<std::size_t>(src)]);
  }
  const ProbeResult rev = probe(reversed, ProbeKind::kLinear, 9);
  CHECK(rev.accuracy == a.accuracy);
}

TEST_CASE("multi-label probe reports macro roc/pr and validates its inputs") {
  Rng rng(41);
  const int per_split[3] = {120, 40, 40};
  int total = per_split[0] + per_split[1] + per_split[2];
  ProbeData data;
  data.features = Tensor2(total, 2);
  data.labels = Tensor2(total, 3);
  data.class_names = {"x_pos", "y_pos", "sum_pos"};
  data.single_label = false;
  int row = 0;
  for (int split = 0; split < 3; ++split) {
    for (int i = 0; i < per_split[split]; ++i) {
      const double x = rng.normal();
      const double y = rng.normal();
      data.features.at(row, 0) = x;
      data.features.at(row, 1) = y;
      data.labels.at(row, 0) = x > 0.0 ? 1.0 : 0.0;
      data.labels.at(row, 1) = y > 0.0 ? 1.0 : 0.0;
      data.labels.at(row, 2) = x + y > 0.0 ? 1.0 : 0.0;
      data.splits.push_back(split == 0 ? Split::kTrain
                                       : split == 1 ? Split::kValid : Split::kTest);
      ++row;
    }
  }
  const ProbeResult r = probe(data, ProbeKind::kLinear, 13);
  CHECK(r.roc_auc_macro >= 0.95);
  CHECK(r.pr_auc_macro >= 0.9);
  CHECK(std::isnan(r.accuracy));

  SUBCASE("class absent from the training split is rejected") {
    ProbeData broken = data;
    for (int i = 0; i < total; ++i)
      if (broken.splits[static_cast<std::size_t>(i)] == Split::kTrain)
        broken.labels.at(i, 1) = 0.0;
    CHECK_THROWS_WITH_AS(probe(broken, ProbeKind::kLinear, 13), doctest::Contains("y_pos"),
                         std::invalid_argument);
  }

  SUBCASE("an empty split is rejected") {
    ProbeData broken = data;
    for (auto& s : broken.splits)
      if (s == Split::kValid) s = Split::kTest;
    CHECK_THROWS_AS(probe(broken, ProbeKind::kLinear, 13), std::invalid_argument);
  }

  SUBCASE("shape mismatches are rejected") {
    ProbeData broken = data;
    broken.splits.pop_back();
    CHECK_THROWS_AS(probe(broken, ProbeKind::kLinear, 13), std::invalid_argument);
    ProbeData wrong_names = data;
    wrong_names.class_names.pop_back();
    CHECK_THROWS_AS(probe(wrong_names, ProbeKind::kLinear, 13), std::invalid_argument);
  }
}

TEST_CASE("probe kind parsing") {
  CHECK(probe_kind_from_string("linear") == ProbeKind::kLinear);
  CHECK(probe_kind_from_string("mlp") == ProbeKind::kMlp);
  CHECK_THROWS_AS(probe_kind_from_string("svm"), std::invalid_argument);
}
