#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xmusic/dataset.hpp"
#include "xmusic/rng.hpp"
#include "xmusic/tensor.hpp"

namespace xmusic {

// A metric whose preconditions fail (single-class labels, no positives) is
// undefined; callers skip the tag and report it instead of zero-filling.
struct undefined_metric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// P(score_pos > score_neg) + 0.5 P(tie) over all positive/negative pairs,
// computed with midranks. Labels are 0/1.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Mean precision at the rank of each relevant item; descending scores, ties
// by ascending index.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

// Exhaustive sweep over unique scores plus +infinity; predicts positive at
// score >= threshold; F1 ties resolve to the lowest threshold.
std::pair<double, double> best_f1_threshold(const std::vector<double>& scores,
                                            const std::vector<int>& labels);

struct RankedResult {
  std::string query_id;
  std::vector<std::pair<std::string, double>> items;  // descending, ties by ascending id
};

// All fixed-name report fields; NaN marks a field the run does not produce
// and serializes as null.
struct MetricReport {
  double roc_auc_macro;
  double pr_auc_macro;
  double r_at_1;
  double r_at_5;
  double r_at_10;
  double map10;
  double medr;
  std::vector<std::string> skipped_tags;
  std::map<std::string, double> per_tag_roc;
  std::map<std::string, double> per_tag_pr;
  unsigned long long seed = 0;
  std::string store_checksum;

  MetricReport();
};

std::string to_json(const MetricReport& report);

// Rank corpus items per query by dot product (unit rows, so cosine); ties by
// ascending item id. Fills r_at_*, map10 (AP@10 of a single relevant item is
// 1/rank if rank <= 10 else 0), and medr (lower-middle of sorted ranks).
MetricReport sentence_retrieval(const EmbeddingStore& queries, const EmbeddingStore& corpus,
                                const std::map<std::string, std::string>& ground_truth);

// Item score = number of query word occurrences found in the item's
// predicted tag words; descending, ties by ascending id.
RankedResult word_overlap_retrieval(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& item_tags,
    const std::string& query_sentence);

// Cosine matrix of unit-row inputs: items x labels.
Tensor2 zero_shot_scores(const Tensor2& audio_vectors, const Tensor2& label_vectors);

// Per-tag ROC/PR over a score matrix (items x tags) against 0/1 labels of the
// same shape; single-class tags are skipped and listed.
MetricReport evaluate_tags(const Tensor2& scores, const Tensor2& labels,
                           const std::vector<std::string>& tag_names);

enum class ProbeKind { kLinear, kMlp };

ProbeKind probe_kind_from_string(const std::string& name);

struct ProbeData {
  Tensor2 features;           // n x d, frozen
  Tensor2 labels;             // n x c, one-hot when single_label else multi-hot
  std::vector<Split> splits;  // per row
  std::vector<std::string> class_names;
  bool single_label = false;
};

struct ProbeResult {
  double accuracy;       // single-label tasks
  double f1_macro;       // single-label tasks
  double roc_auc_macro;  // multi-label tasks
  double pr_auc_macro;   // multi-label tasks
  double validation_metric;

  ProbeResult();
};

// Shallow classifier on frozen features: affine, or one 512-wide ReLU hidden
// layer. Full-batch Adam; the snapshot with the lowest validation loss (later
// step on ties) is evaluated on the test split.
ProbeResult probe(const ProbeData& data, ProbeKind kind, unsigned long long seed);

}  // namespace xmusic
