#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xmusic/rng.hpp"
#include "xmusic/tape.hpp"
#include "xmusic/tensor.hpp"

namespace xmusic {

enum class ObjectiveKind { kClassification, kTriplet, kContrastive };

ObjectiveKind objective_kind_from_string(const std::string& name);
std::string to_string(ObjectiveKind kind);

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::kContrastive;
  double margin = 0.4;            // triplet delta
  double temperature_init = 0.2;  // contrastive tau, learnable
  double lambda = 0.5;            // negative-sampling distance cutoff
};

// Mean over classes and batch of -(y log yhat + (1-y) log(1-yhat)), with
// yhat clamped to [1e-7, 1-1e-7] before the logs. Scores must lie in [0, 1].
Var bce_classification_loss(Tape& t, Var scores, const Tensor2& labels);

// Scalar hinge of Eq-2 form: max(0, margin - s_pos + s_neg).
double triplet_hinge(double s_pos, double s_neg, double margin);

// Unnormalized distance-weighted sampling weights for every row of
// `candidates` against `anchor` (a unit vector of matching dimension):
// w_j = min(1/q(max(d_j, lambda)), 1/q(lambda)), with
// q(d) = d^(n-2) (1 - d^2/4)^((n-3)/2), n = embedding dimension.
// exclude_row (if >= 0) gets weight 0.
std::vector<double> negative_sampling_weights(const double* anchor, int dim,
                                              const Tensor2& candidates,
                                              int exclude_row, double lambda);

// Draws one candidate row with probability proportional to the weights above.
// Throws when no candidate has positive weight available.
int distance_weighted_negative(const double* anchor, int dim,
                               const Tensor2& candidates, int exclude_row,
                               double lambda, Rng& rng);

// One sampled negative per anchor per direction, drawn outside the tape so
// the loss below is differentiable with the choice frozen.
struct TripletNegatives {
  std::vector<int> audio_to_text;  // negative text row for audio anchor i
  std::vector<int> text_to_audio;  // negative audio row for text anchor i
};

TripletNegatives sample_triplet_negatives(const Tensor2& za, const Tensor2& zt,
                                          double lambda, Rng& rng);

// Symmetric hinge loss with the given frozen negatives; za, zt are N x d
// unit-row vars on the tape, N >= 2.
Var triplet_loss_symmetric(Tape& t, Var za, Var zt, const TripletNegatives& negatives,
                           double margin);

// Both InfoNCE directions (audio->text, text->audio) with learnable 1x1 tau
// on the tape. Throws std::invalid_argument when tau <= 0.
std::pair<Var, Var> info_nce_directions(Tape& t, Var za, Var zt, Var tau);

// Average of the two directions.
Var info_nce_symmetric(Tape& t, Var za, Var zt, Var tau);

}  // namespace xmusic
