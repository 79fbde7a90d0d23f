#pragma once

#include <string>
#include <vector>

#include "xmusic/dataset.hpp"
#include "xmusic/model.hpp"

namespace xmusic {

struct TrainConfig {
  std::string dataset_path;
  std::string word_vectors_path;  // required by the bag-of-words encoder
  int batch_size = 64;
  int steps = 0;
  unsigned long long seed = 0;
  double lr_main = 1e-3;
  double lr_text_transformer = 5e-5;
  int checkpoint_interval = 0;  // 0 means checkpoint only at the end
  double chunk_seconds = 9.91;  // audio-file datasets only
  ModelConfig model;

  // Side-effect targets; empty disables them.
  std::string checkpoint_path;
  std::string loss_csv_path;

  void validate() const;
};

// Flat key=value file; unknown keys are an error. Objective, text
// representation, and text encoder kind arrive from the command line, not
// the file.
TrainConfig parse_train_config(const std::string& path);

// Bias-corrected Adam. Moment tensors are allocated on first use and keyed
// by position, so the parameter list must stay stable across steps.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  std::vector<Tensor2> m;
  std::vector<Tensor2> v;
};

// One update of every parameter from its accumulated gradient, with a
// per-parameter learning rate. Throws on non-finite gradients, naming the
// parameter and step.
void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               const std::vector<double>& lrs);

struct TrainResult {
  Model model;
  std::vector<double> loss_trace;  // one entry per completed step
  std::vector<double> tau_trace;   // NaN entries when not contrastive
};

// Seeded end-to-end training: shuffles per epoch, skips the final partial
// batch, applies the configured objective, clamps tau at 1e-3, and aborts on
// a non-finite loss. Writes checkpoint and loss CSV when paths are set.
TrainResult train(const TrainConfig& cfg, const std::vector<TrackRecord>& records);

// Feature-vector records become a one-frame pseudo-spectrogram; audio files
// are chunked and converted to log-mel.
Tensor2 audio_frame_for(const TrackRecord& record, double chunk_seconds, Rng& rng);

}  // namespace xmusic
