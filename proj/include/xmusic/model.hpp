#pragma once

#include <memory>
#include <string>
#include <vector>

#include "xmusic/encoders.hpp"
#include "xmusic/objectives.hpp"
#include "xmusic/rng.hpp"
#include "xmusic/text.hpp"

namespace xmusic {

enum class TextEncoderKind { kBow, kTransformer };

TextEncoderKind text_encoder_from_string(const std::string& name);
std::string to_string(TextEncoderKind kind);

TextMode text_mode_from_string(const std::string& name);
std::string to_string(TextMode mode);

struct ModelConfig {
  ObjectiveConfig objective;
  TextMode text_rep = TextMode::kStochastic;
  TextEncoderKind text_encoder = TextEncoderKind::kTransformer;
  EncoderConfig audio;
  EncoderConfig text;
  unsigned long long seed = 0;
};

// The trainable bundle: audio encoder, one text encoder, and the objective's
// extra parameters (temperature for contrastive, class centroids for
// classification). Parameters are created in a fixed order from one rng so a
// seed fully determines the initialization.
struct Model {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<std::string> classes;  // classification class names
  WordVectorTable word_table;        // frozen, bag-of-words only
  AudioEncoder audio;
  std::unique_ptr<TextTransformerEncoder> text_transformer;
  std::unique_ptr<TextBowEncoder> text_bow;
  Parameter tau;        // contrastive, 1x1
  Parameter centroids;  // classification, classes x embed_dim

  Model(ModelConfig cfg, Vocabulary vocabulary, std::vector<std::string> class_names,
        WordVectorTable table, Rng& rng);

  // All trainable parameters in creation order.
  std::vector<Parameter*> trainable();

  // True for parameters of the transformer text encoder (the slow-lr group).
  bool is_text_transformer_param(const Parameter* p);

  // Text forward for a batch of prepared inputs, dispatched on the encoder kind.
  Var encode_text(Tape& t, const std::vector<TextInput>& batch);
};

// Single-line JSON header (format, seed, config echo, vocabulary, classes,
// word table meta, named tensor shapes) followed by the tensors as raw
// little-endian doubles in header order.
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace xmusic
