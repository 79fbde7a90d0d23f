#include "xmusic/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "xmusic/objectives.hpp"
#include "xmusic/tape.hpp"
#include "xmusic/text.hpp"

namespace xmusic {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_binary_labels(const std::vector<double>& scores, const std::vector<int>& labels,
                         const char* what) {
  if (scores.size() != labels.size())
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(scores.size()) +
                                " scores for " + std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(labels[i]) +
                                  " at index " + std::to_string(i) + " is not 0 or 1");
    if (!std::isfinite(scores[i]))
      throw std::invalid_argument(std::string(what) + ": non-finite score at index " +
                                  std::to_string(i));
  }
}

}  // namespace

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary_labels(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw undefined_metric_error("roc_auc: labels hold a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += mid_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary_labels(scores, labels, "average_precision");
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l);
  if (n_pos == 0) throw undefined_metric_error("average_precision: no positive labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 1; rank <= order.size(); ++rank) {
    if (labels[order[rank - 1]] == 1) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return sum / static_cast<double>(n_pos);
}

std::pair<double, double> best_f1_threshold(const std::vector<double>& scores,
                                            const std::vector<int>& labels) {
  check_binary_labels(scores, labels, "best_f1_threshold");
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l);
  if (n_pos == 0) throw undefined_metric_error("best_f1_threshold: no positive labels");

  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());

  double best_t = thresholds.front();
  double best_f1 = -1.0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool predicted = scores[i] >= t;
      if (predicted && labels[i] == 1) ++tp;
      else if (predicted) ++fp;
      else if (labels[i] == 1) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    const double f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return {best_t, best_f1};
}

MetricReport::MetricReport()
    : roc_auc_macro(kNan), pr_auc_macro(kNan), r_at_1(kNan), r_at_5(kNan), r_at_10(kNan),
      map10(kNan), medr(kNan) {}

std::string to_json(const MetricReport& report) {
  using ordered_json = nlohmann::ordered_json;
  ordered_json j;
  auto put = [&](const char* key, double v) {
    if (std::isnan(v)) j[key] = nullptr; else j[key] = v;
  };
  put("roc_auc_macro", report.roc_auc_macro);
  put("pr_auc_macro", report.pr_auc_macro);
  put("r_at_1", report.r_at_1);
  put("r_at_5", report.r_at_5);
  put("r_at_10", report.r_at_10);
  put("map10", report.map10);
  put("medr", report.medr);
  j["skipped_tags"] = report.skipped_tags;
  ordered_json per_tag;
  per_tag["roc"] = report.per_tag_roc;
  per_tag["pr"] = report.per_tag_pr;
  j["per_tag"] = per_tag;
  ordered_json meta;
  meta["seed"] = report.seed;
  meta["store_checksum"] = report.store_checksum;
  j["metadata"] = meta;
  return j.dump(2) + "\n";
}

MetricReport sentence_retrieval(const EmbeddingStore& queries, const EmbeddingStore& corpus,
                                const std::map<std::string, std::string>& ground_truth) {
  if (queries.count() == 0) throw std::invalid_argument("sentence_retrieval: no queries");
  if (queries.dim() != corpus.dim())
    throw std::invalid_argument("sentence_retrieval: query dimension " +
                                std::to_string(queries.dim()) + " does not match corpus " +
                                std::to_string(corpus.dim()));
  std::unordered_map<std::string, int> corpus_row;
  for (int i = 0; i < corpus.count(); ++i) corpus_row.emplace(corpus.ids[static_cast<std::size_t>(i)], i);

  std::vector<int> ranks;
  ranks.reserve(static_cast<std::size_t>(queries.count()));
  for (int q = 0; q < queries.count(); ++q) {
    const std::string& qid = queries.ids[static_cast<std::size_t>(q)];
    const auto gt_it = ground_truth.find(qid);
    if (gt_it == ground_truth.end())
      throw std::runtime_error("sentence_retrieval: no ground truth for query " + qid);
    const auto row_it = corpus_row.find(gt_it->second);
    if (row_it == corpus_row.end())
      throw std::runtime_error("sentence_retrieval: ground-truth item " + gt_it->second +
                               " for query " + qid + " is not in the corpus");
    const int gt_row = row_it->second;

    std::vector<double> scores(static_cast<std::size_t>(corpus.count()));
    for (int i = 0; i < corpus.count(); ++i) {
      double dot = 0.0;
      for (int k = 0; k < corpus.dim(); ++k)
        dot += queries.vectors.at(q, k) * corpus.vectors.at(i, k);
      scores[static_cast<std::size_t>(i)] = dot;
    }
    const double gt_score = scores[static_cast<std::size_t>(gt_row)];
    int rank = 1;
    for (int i = 0; i < corpus.count(); ++i) {
      if (i == gt_row) continue;
      if (scores[static_cast<std::size_t>(i)] > gt_score ||
          (scores[static_cast<std::size_t>(i)] == gt_score &&
           corpus.ids[static_cast<std::size_t>(i)] < corpus.ids[static_cast<std::size_t>(gt_row)]))
        ++rank;
    }
    ranks.push_back(rank);
  }

  MetricReport report;
  const double n = static_cast<double>(ranks.size());
  double r1 = 0, r5 = 0, r10 = 0, ap = 0;
  for (int r : ranks) {
    if (r <= 1) ++r1;
    if (r <= 5) ++r5;
    if (r <= 10) ++r10;
    if (r <= 10) ap += 1.0 / static_cast<double>(r);
  }
  report.r_at_1 = r1 / n;
  report.r_at_5 = r5 / n;
  report.r_at_10 = r10 / n;
  report.map10 = ap / n;
  std::vector<int> sorted_ranks(ranks);
  std::sort(sorted_ranks.begin(), sorted_ranks.end());
  report.medr = static_cast<double>(sorted_ranks[(sorted_ranks.size() - 1) / 2]);
  return report;
}

RankedResult word_overlap_retrieval(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& item_tags,
    const std::string& query_sentence) {
  const std::vector<std::string> query_words = tokenize(query_sentence);
  RankedResult result;
  result.query_id = query_sentence;
  result.items.reserve(item_tags.size());
  for (const auto& [id, tags] : item_tags) {
    std::unordered_set<std::string> item_words;
    for (const std::string& tag : tags)
      for (const std::string& word : tokenize(tag)) item_words.insert(word);
    double score = 0.0;
    for (const std::string& w : query_words)
      if (item_words.count(w)) score += 1.0;
    result.items.emplace_back(id, score);
  }
  std::sort(result.items.begin(), result.items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return result;
}

Tensor2 zero_shot_scores(const Tensor2& audio_vectors, const Tensor2& label_vectors) {
  if (audio_vectors.cols != label_vectors.cols)
    throw std::invalid_argument("zero_shot_scores: item dimension " +
                                std::to_string(audio_vectors.cols) + " does not match label dimension " +
                                std::to_string(label_vectors.cols));
  Tensor2 out(audio_vectors.rows, label_vectors.rows);
  for (int i = 0; i < audio_vectors.rows; ++i)
    for (int j = 0; j < label_vectors.rows; ++j) {
      double dot = 0.0;
      for (int k = 0; k < audio_vectors.cols; ++k)
        dot += audio_vectors.at(i, k) * label_vectors.at(j, k);
      out.at(i, j) = dot;
    }
  return out;
}

MetricReport evaluate_tags(const Tensor2& scores, const Tensor2& labels,
                           const std::vector<std::string>& tag_names) {
  check_same_shape(scores, labels, "evaluate_tags");
  if (static_cast<int>(tag_names.size()) != scores.cols)
    throw std::invalid_argument("evaluate_tags: " + std::to_string(tag_names.size()) +
                                " tag names for " + std::to_string(scores.cols) + " columns");
  MetricReport report;
  double roc_sum = 0.0, pr_sum = 0.0;
  int evaluated = 0;
  for (int c = 0; c < scores.cols; ++c) {
    std::vector<double> col(static_cast<std::size_t>(scores.rows));
    std::vector<int> lab(static_cast<std::size_t>(scores.rows));
    for (int i = 0; i < scores.rows; ++i) {
      col[static_cast<std::size_t>(i)] = scores.at(i, c);
      lab[static_cast<std::size_t>(i)] = labels.at(i, c) != 0.0 ? 1 : 0;
    }
    try {
      const double roc = roc_auc(col, lab);
      const double pr = average_precision(col, lab);
      report.per_tag_roc[tag_names[static_cast<std::size_t>(c)]] = roc;
      report.per_tag_pr[tag_names[static_cast<std::size_t>(c)]] = pr;
      roc_sum += roc;
      pr_sum += pr;
      ++evaluated;
    } catch (const undefined_metric_error&) {
      report.skipped_tags.push_back(tag_names[static_cast<std::size_t>(c)]);
    }
  }
  if (evaluated > 0) {
    report.roc_auc_macro = roc_sum / evaluated;
    report.pr_auc_macro = pr_sum / evaluated;
  }
  return report;
}

ProbeKind probe_kind_from_string(const std::string& name) {
  if (name == "linear") return ProbeKind::kLinear;
  if (name == "mlp") return ProbeKind::kMlp;
  throw std::invalid_argument("unknown probe kind '" + name + "', expected linear or mlp");
}

ProbeResult::ProbeResult()
    : accuracy(kNan), f1_macro(kNan), roc_auc_macro(kNan), pr_auc_macro(kNan),
      validation_metric(kNan) {}

namespace {

constexpr int kProbeHidden = 512;
constexpr int kProbeSteps = 200;
constexpr double kProbeLr = 1e-2;

Tensor2 take_rows(const Tensor2& m, const std::vector<int>& rows) {
  Tensor2 out(static_cast<int>(rows.size()), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int k = 0; k < m.cols; ++k) out.at(static_cast<int>(i), k) = m.at(rows[i], k);
  return out;
}

struct ProbeNet {
  ProbeKind kind;
  Parameter w1, b1, w2, b2;  // linear uses only w1, b1

  ProbeNet(ProbeKind k, int in_dim, int classes, Rng& rng) : kind(k) {
    auto init = [&rng](const std::string& name, int rows, int cols) {
      Tensor2 m(rows, cols);
      const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
      for (auto& v : m.data) v = scale * rng.normal();
      return Parameter{name, std::move(m)};
    };
    if (kind == ProbeKind::kLinear) {
      w1 = init("probe.w", in_dim, classes);
      b1 = Parameter{"probe.b", Tensor2::zeros(1, classes)};
    } else {
      w1 = init("probe.w1", in_dim, kProbeHidden);
      b1 = Parameter{"probe.b1", Tensor2::zeros(1, kProbeHidden)};
      w2 = init("probe.w2", kProbeHidden, classes);
      b2 = Parameter{"probe.b2", Tensor2::zeros(1, classes)};
    }
  }

  std::vector<Parameter*> params() {
    if (kind == ProbeKind::kLinear) return {&w1, &b1};
    return {&w1, &b1, &w2, &b2};
  }

  Var logits(Tape& t, Var x) {
    Var h = add_row_broadcast(matmul(x, t.param(w1)), t.param(b1));
    if (kind == ProbeKind::kLinear) return h;
    return add_row_broadcast(matmul(relu(h), t.param(w2)), t.param(b2));
  }

  // Tape-free forward for evaluation.
  Tensor2 logits_value(const Tensor2& x) const {
    Tensor2 h(x.rows, w1.value.cols);
    numeric::matmul(x, w1.value, h);
    for (int i = 0; i < h.rows; ++i)
      for (int k = 0; k < h.cols; ++k) h.at(i, k) += b1.value.data[static_cast<std::size_t>(k)];
    if (kind == ProbeKind::kLinear) return h;
    for (auto& v : h.data) v = std::max(0.0, v);
    Tensor2 out(h.rows, w2.value.cols);
    numeric::matmul(h, w2.value, out);
    for (int i = 0; i < out.rows; ++i)
      for (int k = 0; k < out.cols; ++k) out.at(i, k) += b2.value.data[static_cast<std::size_t>(k)];
    return out;
  }
};

double probe_accuracy(const Tensor2& logits, const Tensor2& labels) {
  int correct = 0;
  for (int i = 0; i < logits.rows; ++i) {
    int pred = 0;
    for (int k = 1; k < logits.cols; ++k)
      if (logits.at(i, k) > logits.at(i, pred)) pred = k;
    if (labels.at(i, pred) == 1.0) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows);
}

double probe_f1_macro(const Tensor2& logits, const Tensor2& labels) {
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < logits.cols; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < logits.rows; ++i) {
      int pred = 0;
      for (int k = 1; k < logits.cols; ++k)
        if (logits.at(i, k) > logits.at(i, pred)) pred = k;
      const bool predicted = pred == c;
      const bool actual = labels.at(i, c) == 1.0;
      if (predicted && actual) ++tp;
      else if (predicted) ++fp;
      else if (actual) ++fn;
    }
    if (2 * tp + fp + fn == 0) continue;
    sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / counted;
}

// Macro ROC over defined tags; 0 when every tag is single-class.
double probe_roc_macro(const Tensor2& logits, const Tensor2& labels) {
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < logits.cols; ++c) {
    std::vector<double> col(static_cast<std::size_t>(logits.rows));
    std::vector<int> lab(static_cast<std::size_t>(logits.rows));
    for (int i = 0; i < logits.rows; ++i) {
      col[static_cast<std::size_t>(i)] = logits.at(i, c);
      lab[static_cast<std::size_t>(i)] = labels.at(i, c) != 0.0 ? 1 : 0;
    }
    try {
      sum += roc_auc(col, lab);
      ++counted;
    } catch (const undefined_metric_error&) {
    }
  }
  return counted == 0 ? 0.0 : sum / counted;
}

double probe_pr_macro(const Tensor2& logits, const Tensor2& labels) {
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < logits.cols; ++c) {
    std::vector<double> col(static_cast<std::size_t>(logits.rows));
    std::vector<int> lab(static_cast<std::size_t>(logits.rows));
    for (int i = 0; i < logits.rows; ++i) {
      col[static_cast<std::size_t>(i)] = logits.at(i, c);
      lab[static_cast<std::size_t>(i)] = labels.at(i, c) != 0.0 ? 1 : 0;
    }
    try {
      sum += average_precision(col, lab);
      ++counted;
    } catch (const undefined_metric_error&) {
    }
  }
  return counted == 0 ? 0.0 : sum / counted;
}

}  // namespace

ProbeResult probe(const ProbeData& data, ProbeKind kind, unsigned long long seed) {
  const int n = data.features.rows;
  if (n == 0) throw std::invalid_argument("probe: no rows");
  if (data.labels.rows != n)
    throw std::invalid_argument("probe: " + std::to_string(data.labels.rows) +
                                " label rows for " + std::to_string(n) + " feature rows");
  if (static_cast<int>(data.splits.size()) != n)
    throw std::invalid_argument("probe: split list does not match rows");
  if (static_cast<int>(data.class_names.size()) != data.labels.cols)
    throw std::invalid_argument("probe: class names do not match label columns");

  std::vector<int> train_rows, valid_rows, test_rows;
  for (int i = 0; i < n; ++i) {
    switch (data.splits[static_cast<std::size_t>(i)]) {
      case Split::kTrain: train_rows.push_back(i); break;
      case Split::kValid: valid_rows.push_back(i); break;
      case Split::kTest: test_rows.push_back(i); break;
    }
  }
  if (train_rows.empty() || valid_rows.empty() || test_rows.empty())
    throw std::invalid_argument("probe: all three splits must be non-empty");

  for (int c = 0; c < data.labels.cols; ++c) {
    bool seen = false;
    for (int i : train_rows)
      if (data.labels.at(i, c) == 1.0) { seen = true; break; }
    if (!seen)
      throw std::invalid_argument("probe: class " + data.class_names[static_cast<std::size_t>(c)] +
                                  " is absent from the training split");
  }

  const Tensor2 x_train = take_rows(data.features, train_rows);
  const Tensor2 y_train = take_rows(data.labels, train_rows);
  const Tensor2 x_valid = take_rows(data.features, valid_rows);
  const Tensor2 y_valid = take_rows(data.labels, valid_rows);
  const Tensor2 x_test = take_rows(data.features, test_rows);
  const Tensor2 y_test = take_rows(data.labels, test_rows);

  Rng rng(seed);
  ProbeNet net(kind, data.features.cols, data.labels.cols, rng);
  const std::vector<Parameter*> params = net.params();
  struct Slot { Tensor2 m, v; };
  std::vector<Slot> slots;
  for (Parameter* p : params)
    slots.push_back({Tensor2::zeros(p->value.rows, p->value.cols),
                     Tensor2::zeros(p->value.rows, p->value.cols)});

  // Mean CE (single-label) or mean BCE (multi-label) on the validation split.
  auto validation_loss = [&]() {
    const Tensor2 logits = net.logits_value(x_valid);
    double total = 0.0;
    if (data.single_label) {
      for (int i = 0; i < logits.rows; ++i) {
        double mx = logits.at(i, 0);
        for (int k = 1; k < logits.cols; ++k) mx = std::max(mx, logits.at(i, k));
        double lse = 0.0;
        for (int k = 0; k < logits.cols; ++k) lse += std::exp(logits.at(i, k) - mx);
        lse = mx + std::log(lse);
        for (int k = 0; k < logits.cols; ++k)
          if (y_valid.at(i, k) == 1.0) total -= logits.at(i, k) - lse;
      }
      return total / logits.rows;
    }
    for (int i = 0; i < logits.rows; ++i)
      for (int k = 0; k < logits.cols; ++k) {
        const double l = logits.at(i, k);
        // log sigma(l) = -log1p(exp(-l)); log(1 - sigma(l)) = -l - log1p(exp(-l))
        const double log_p = l >= 0.0 ? -std::log1p(std::exp(-l)) : l - std::log1p(std::exp(l));
        const double log_q = log_p - l;
        total -= y_valid.at(i, k) == 1.0 ? log_p : log_q;
      }
    return total / (logits.rows * logits.cols);
  };

  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor2> best_values;
  auto snapshot_if_better = [&]() {
    const double loss = validation_loss();
    if (loss <= best_loss) {  // later snapshots win ties
      best_loss = loss;
      best_values.clear();
      for (Parameter* p : params) best_values.push_back(p->value);
    }
  };

  snapshot_if_better();
  for (int step = 1; step <= kProbeSteps; ++step) {
    for (Parameter* p : params) p->zero_grad();
    Tape t;
    Var logits = net.logits(t, t.input(x_train));
    Var loss;
    if (data.single_label) {
      Var log_probs = log_softmax_rows(logits);
      loss = scale(mean_all(row_sum(mul(log_probs, t.input(y_train)))), -1.0);
    } else {
      loss = bce_classification_loss(t, sigmoid(logits), y_train);
    }
    t.backward(loss);

    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Parameter& p = *params[pi];
      for (std::size_t j = 0; j < p.value.data.size(); ++j) {
        const double g = p.grad.data[j];
        slots[pi].m.data[j] = 0.9 * slots[pi].m.data[j] + 0.1 * g;
        slots[pi].v.data[j] = 0.999 * slots[pi].v.data[j] + 0.001 * g * g;
        p.value.data[j] -= kProbeLr * (slots[pi].m.data[j] / bc1) /
                           (std::sqrt(slots[pi].v.data[j] / bc2) + 1e-8);
      }
    }
    if (step % 5 == 0) snapshot_if_better();
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->value = best_values[pi];

  ProbeResult result;
  {
    const Tensor2 valid_logits = net.logits_value(x_valid);
    result.validation_metric = data.single_label ? probe_accuracy(valid_logits, y_valid)
                                                 : probe_roc_macro(valid_logits, y_valid);
  }
  const Tensor2 test_logits = net.logits_value(x_test);
  if (data.single_label) {
    result.accuracy = probe_accuracy(test_logits, y_test);
    result.f1_macro = probe_f1_macro(test_logits, y_test);
  } else {
    result.roc_auc_macro = probe_roc_macro(test_logits, y_test);
    result.pr_auc_macro = probe_pr_macro(test_logits, y_test);
  }
  return result;
}

}  // namespace xmusic
