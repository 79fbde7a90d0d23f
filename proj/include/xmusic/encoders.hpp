#pragma once

#include <string>
#include <vector>

#include "xmusic/rng.hpp"
#include "xmusic/tape.hpp"
#include "xmusic/tensor.hpp"
#include "xmusic/text.hpp"

namespace xmusic {

struct EncoderConfig {
  int embed_dim = 64;   // d, the joint space dimension
  int depth = 2;        // transformer layers
  int heads = 4;
  int width = 64;       // transformer model width
  int ff_mult = 4;      // feed-forward hidden = ff_mult * width
  int patch_frames = 16;  // audio: frames per non-overlapping patch
  int input_bins = 128;   // audio: mel bins
  int max_len = 64;       // text: maximum tokens including SOS

  void validate() const;
};

// Pre-layer-norm transformer block parameters.
struct TransformerLayer {
  Parameter ln1_g, ln1_b;
  Parameter qkv_w, qkv_b;
  Parameter out_w, out_b;
  Parameter ln2_g, ln2_b;
  Parameter ff1_w, ff1_b;
  Parameter ff2_w, ff2_b;
};

// Patch-embedding transformer over log-mel input with CLS pooling. Output is
// the CLS-position vector projected to embed_dim and l2-normalized.
class AudioEncoder {
 public:
  AudioEncoder(const EncoderConfig& cfg, Rng& rng);

  // Each mel is frames x input_bins; frames are grouped into floor(frames/P)
  // patches and the remainder is dropped. Returns batch x embed_dim, rows
  // unit-norm. Throws std::invalid_argument when a clip has fewer frames
  // than one patch or the bin count differs from the config.
  Var forward(Tape& t, const std::vector<const Tensor2*>& mels);

  std::vector<Parameter*> parameters();
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Parameter patch_w_, patch_b_;
  Parameter cls_;
  std::vector<TransformerLayer> layers_;
  Parameter proj_w_, proj_b_;
};

// Token + learned-position transformer with SOS pooling; the SOS output is
// layer-normalized, projected, and l2-normalized.
class TextTransformerEncoder {
 public:
  TextTransformerEncoder(const EncoderConfig& cfg, int vocab_size, Rng& rng);

  // Each sequence must start with SOS (index 0) and hold <= max_len tokens.
  Var forward(Tape& t, const std::vector<std::vector<int>>& token_batch);

  std::vector<Parameter*> parameters();
  const EncoderConfig& config() const { return cfg_; }
  int vocab_size() const { return vocab_size_; }

 private:
  EncoderConfig cfg_;
  int vocab_size_;
  Parameter token_embed_, pos_embed_;
  std::vector<TransformerLayer> layers_;
  Parameter final_ln_g_, final_ln_b_;
  Parameter proj_w_, proj_b_;
};

// Frozen word vectors -> learned linear projection -> average -> l2norm.
// Words are averaged in sorted order, which makes the output bitwise
// invariant to token permutations.
class TextBowEncoder {
 public:
  TextBowEncoder(int word_dim, int embed_dim, Rng& rng);

  Var forward(Tape& t, const std::vector<std::vector<std::string>>& word_batch,
              const WordVectorTable& table);

  std::vector<Parameter*> parameters();
  int word_dim() const { return word_dim_; }
  int embed_dim() const { return embed_dim_; }

 private:
  int word_dim_, embed_dim_;
  Parameter proj_;
};

// Per-class tag scores sigmoid(z . c_k): embeddings batch x d, centroids
// classes x d -> batch x classes.
Var classify_scores(Tape& t, Var embeddings, Parameter& centroids);

// Shared stack used by both transformer encoders; exposed for tests.
Var transformer_stack(Tape& t, Var x, const std::vector<int>& seq_lengths,
                      std::vector<TransformerLayer>& layers, int heads);

// Sinusoidal position table (audio side): rows x width, row i alternating
// sin/cos of i / 10000^(2k/width).
Tensor2 sinusoid_positions(int rows, int width);

}  // namespace xmusic
