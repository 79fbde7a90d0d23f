#include "xmusic/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace xmusic {

namespace {

constexpr double kProbClamp = 1e-7;

// Log of the inverse surface density q(d) = d^(n-2) (1 - d^2/4)^((n-3)/2)
// of pairwise distances between uniform points on the unit (n-1)-sphere.
double neg_log_q(double d, int dim) {
  const double u = std::max(1.0 - 0.25 * d * d, 1e-300);
  return -((dim - 2) * std::log(d) + 0.5 * (dim - 3) * std::log(u));
}

}  // namespace

ObjectiveKind objective_kind_from_string(const std::string& name) {
  if (name == "classification") return ObjectiveKind::kClassification;
  if (name == "triplet") return ObjectiveKind::kTriplet;
  if (name == "contrastive") return ObjectiveKind::kContrastive;
  throw std::invalid_argument("unknown objective '" + name +
                              "', expected classification, triplet, or contrastive");
}

std::string to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kClassification: return "classification";
    case ObjectiveKind::kTriplet: return "triplet";
    case ObjectiveKind::kContrastive: return "contrastive";
  }
  throw std::logic_error("unreachable objective kind");
}

Var bce_classification_loss(Tape& t, Var scores, const Tensor2& labels) {
  const Tensor2& sv = t.value(scores);
  check_same_shape(sv, labels, "bce_classification_loss");
  for (std::size_t i = 0; i < sv.data.size(); ++i) {
    const double p = sv.data[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument(
          "bce_classification_loss: score " + std::to_string(p) + " at flat index " +
          std::to_string(i) + " is outside [0, 1]");
    }
    const double y = labels.data[i];
    if (!(y >= 0.0 && y <= 1.0)) {
      throw std::invalid_argument(
          "bce_classification_loss: label " + std::to_string(y) + " at flat index " +
          std::to_string(i) + " is outside [0, 1]");
    }
  }
  Var p = clamp(scores, kProbClamp, 1.0 - kProbClamp);
  Var y = t.input(labels);
  Tensor2 ones_minus(labels.rows, labels.cols);
  for (std::size_t i = 0; i < labels.data.size(); ++i) ones_minus.data[i] = 1.0 - labels.data[i];
  Var ym = t.input(ones_minus);
  Var one_minus_p = add_scalar(scale(p, -1.0), 1.0);
  Var ll = add(mul(y, log_elem(p)), mul(ym, log_elem(one_minus_p)));
  return scale(mean_all(ll), -1.0);
}

double triplet_hinge(double s_pos, double s_neg, double margin) {
  return std::max(0.0, margin - s_pos + s_neg);
}

std::vector<double> negative_sampling_weights(const double* anchor, int dim,
                                              const Tensor2& candidates,
                                              int exclude_row, double lambda) {
  if (dim < 1 || candidates.cols != dim) {
    throw std::invalid_argument("negative_sampling_weights: candidate dimension " +
                                std::to_string(candidates.cols) + " does not match anchor dimension " +
                                std::to_string(dim));
  }
  if (!(lambda > 0.0 && lambda < 2.0)) {
    throw std::invalid_argument("negative_sampling_weights: lambda " + std::to_string(lambda) +
                                " must lie in (0, 2)");
  }
  const double cap = neg_log_q(lambda, dim);
  std::vector<double> weights(static_cast<std::size_t>(candidates.rows), 0.0);
  for (int j = 0; j < candidates.rows; ++j) {
    if (j == exclude_row) continue;
    double sq = 0.0;
    const double* row = candidates.row(j);
    for (int k = 0; k < dim; ++k) {
      const double diff = anchor[k] - row[k];
      sq += diff * diff;
    }
    const double d = std::max(std::sqrt(sq), lambda);
    weights[static_cast<std::size_t>(j)] = std::exp(std::min(neg_log_q(d, dim), cap));
  }
  return weights;
}

int distance_weighted_negative(const double* anchor, int dim,
                               const Tensor2& candidates, int exclude_row,
                               double lambda, Rng& rng) {
  const std::vector<double> weights =
      negative_sampling_weights(anchor, dim, candidates, exclude_row, lambda);
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw std::invalid_argument(
        "distance_weighted_negative: no candidate with positive weight among " +
        std::to_string(candidates.rows) + " rows");
  }
  const double u = rng.uniform_real() * total;
  double acc = 0.0;
  int last = -1;
  for (int j = 0; j < candidates.rows; ++j) {
    const double w = weights[static_cast<std::size_t>(j)];
    if (w <= 0.0) continue;
    acc += w;
    last = j;
    if (u < acc) return j;
  }
  return last;
}

TripletNegatives sample_triplet_negatives(const Tensor2& za, const Tensor2& zt,
                                          double lambda, Rng& rng) {
  check_same_shape(za, zt, "sample_triplet_negatives");
  if (za.rows < 2) {
    throw std::invalid_argument("sample_triplet_negatives: batch of " + std::to_string(za.rows) +
                                " has no negatives, need at least 2 items");
  }
  TripletNegatives out;
  out.audio_to_text.resize(static_cast<std::size_t>(za.rows));
  out.text_to_audio.resize(static_cast<std::size_t>(za.rows));
  for (int i = 0; i < za.rows; ++i) {
    out.audio_to_text[static_cast<std::size_t>(i)] =
        distance_weighted_negative(za.row(i), za.cols, zt, i, lambda, rng);
  }
  for (int i = 0; i < zt.rows; ++i) {
    out.text_to_audio[static_cast<std::size_t>(i)] =
        distance_weighted_negative(zt.row(i), zt.cols, za, i, lambda, rng);
  }
  return out;
}

namespace {

// Mask with a single 1 per row selecting that anchor's frozen negative.
Tensor2 negative_mask(const std::vector<int>& negatives, int n, const char* direction) {
  Tensor2 mask(n, n);
  if (static_cast<int>(negatives.size()) != n) {
    throw std::invalid_argument(std::string("triplet_loss_symmetric: ") + direction + " has " +
                                std::to_string(negatives.size()) + " negatives for batch of " +
                                std::to_string(n));
  }
  for (int i = 0; i < n; ++i) {
    const int j = negatives[static_cast<std::size_t>(i)];
    if (j < 0 || j >= n || j == i) {
      throw std::invalid_argument(std::string("triplet_loss_symmetric: ") + direction +
                                  " negative " + std::to_string(j) + " invalid for anchor " +
                                  std::to_string(i));
    }
    mask.at(i, j) = 1.0;
  }
  return mask;
}

}  // namespace

Var triplet_loss_symmetric(Tape& t, Var za, Var zt, const TripletNegatives& negatives,
                           double margin) {
  const Tensor2& av = t.value(za);
  const Tensor2& tv = t.value(zt);
  check_same_shape(av, tv, "triplet_loss_symmetric");
  if (av.rows < 2) {
    throw std::invalid_argument("triplet_loss_symmetric: batch of " + std::to_string(av.rows) +
                                " has no negatives, need at least 2 items");
  }
  if (!(margin > 0.0)) {
    throw std::invalid_argument("triplet_loss_symmetric: margin " + std::to_string(margin) +
                                " must be positive");
  }
  const int n = av.rows;
  Var sim = matmul(za, transpose(zt));
  Var s_pos = diag(sim);

  Var mask_a = t.input(negative_mask(negatives.audio_to_text, n, "audio_to_text"));
  Var s_neg_a = row_sum(mul(sim, mask_a));
  Var loss_a = mean_all(relu(add_scalar(sub(s_neg_a, s_pos), margin)));

  Var mask_t = t.input(negative_mask(negatives.text_to_audio, n, "text_to_audio"));
  Var s_neg_t = row_sum(mul(transpose(sim), mask_t));
  Var loss_t = mean_all(relu(add_scalar(sub(s_neg_t, s_pos), margin)));

  return scale(add(loss_a, loss_t), 0.5);
}

std::pair<Var, Var> info_nce_directions(Tape& t, Var za, Var zt, Var tau) {
  const Tensor2& av = t.value(za);
  const Tensor2& tv = t.value(zt);
  check_same_shape(av, tv, "info_nce_directions");
  if (av.rows < 1) {
    throw std::invalid_argument("info_nce_directions: empty batch");
  }
  const Tensor2& tauv = t.value(tau);
  if (tauv.rows != 1 || tauv.cols != 1) {
    throw std::invalid_argument("info_nce_directions: temperature must be 1x1, got " +
                                tauv.shape_str());
  }
  if (!(tauv.data[0] > 0.0)) {
    throw std::invalid_argument("info_nce_directions: temperature " +
                                std::to_string(tauv.data[0]) + " must be positive");
  }
  Var logits = div_by_scalar(matmul(za, transpose(zt)), tau);
  Var loss_a = scale(mean_all(diag(log_softmax_rows(logits))), -1.0);
  Var loss_t = scale(mean_all(diag(log_softmax_rows(transpose(logits)))), -1.0);
  return {loss_a, loss_t};
}

Var info_nce_symmetric(Tape& t, Var za, Var zt, Var tau) {
  auto [loss_a, loss_t] = info_nce_directions(t, za, zt, tau);
  return scale(add(loss_a, loss_t), 0.5);
}

}  // namespace xmusic
