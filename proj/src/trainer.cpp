#include "xmusic/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "xmusic/audio.hpp"

namespace xmusic {

void TrainConfig::validate() const {
  if (batch_size < 1)
    throw std::invalid_argument("train config: batch_size " + std::to_string(batch_size) +
                                " must be at least 1");
  if (steps < 0)
    throw std::invalid_argument("train config: steps must be nonnegative");
  if (!(lr_main > 0.0) || !(lr_text_transformer > 0.0))
    throw std::invalid_argument("train config: learning rates must be positive");
  if (!(chunk_seconds > 0.0))
    throw std::invalid_argument("train config: chunk_seconds must be positive");
  if (checkpoint_interval < 0)
    throw std::invalid_argument("train config: checkpoint_interval must be nonnegative");
  if (!(model.objective.margin > 0.0))
    throw std::invalid_argument("train config: margin must be positive");
  if (!(model.objective.temperature_init > 0.0))
    throw std::invalid_argument("train config: temperature must be positive");
  if (!(model.objective.lambda > 0.0 && model.objective.lambda < 2.0))
    throw std::invalid_argument("train config: lambda must lie in (0, 2)");
}

TrainConfig parse_train_config(const std::string& path) {
  const std::map<std::string, std::string> kv = parse_key_value_file(path);
  TrainConfig cfg;

  auto as_int = [&](const std::string& key, const std::string& value) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error(path + ": key " + key + ": cannot parse integer from '" + value + "'");
    }
  };
  auto as_double = [&](const std::string& key, const std::string& value) {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error(path + ": key " + key + ": cannot parse number from '" + value + "'");
    }
  };

  for (const auto& [key, value] : kv) {
    if (key == "sample_rate") {
      if (as_int(key, value) != 16000)
        throw std::runtime_error(path + ": sample_rate " + value + " unsupported, frontend is fixed at 16000");
    } else if (key == "n_mels") {
      if (as_int(key, value) != 128)
        throw std::runtime_error(path + ": n_mels " + value + " unsupported, frontend is fixed at 128");
    } else if (key == "n_fft") {
      if (as_int(key, value) != 1024)
        throw std::runtime_error(path + ": n_fft " + value + " unsupported, frontend is fixed at 1024");
    } else if (key == "hop_ms") {
      if (as_int(key, value) != 10)
        throw std::runtime_error(path + ": hop_ms " + value + " unsupported, frontend is fixed at 10");
    } else if (key == "chunk_seconds") cfg.chunk_seconds = as_double(key, value);
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_int(key, value));
    else if (key == "steps") cfg.steps = static_cast<int>(as_int(key, value));
    else if (key == "seed") cfg.seed = static_cast<unsigned long long>(as_int(key, value));
    else if (key == "lr_main") cfg.lr_main = as_double(key, value);
    else if (key == "lr_text_transformer") cfg.lr_text_transformer = as_double(key, value);
    else if (key == "checkpoint_interval") cfg.checkpoint_interval = static_cast<int>(as_int(key, value));
    else if (key == "dataset") cfg.dataset_path = value;
    else if (key == "word_vectors") cfg.word_vectors_path = value;
    else if (key == "embed_dim") {
      cfg.model.audio.embed_dim = static_cast<int>(as_int(key, value));
      cfg.model.text.embed_dim = cfg.model.audio.embed_dim;
    } else if (key == "depth") {
      cfg.model.audio.depth = static_cast<int>(as_int(key, value));
      cfg.model.text.depth = cfg.model.audio.depth;
    } else if (key == "heads") {
      cfg.model.audio.heads = static_cast<int>(as_int(key, value));
      cfg.model.text.heads = cfg.model.audio.heads;
    } else if (key == "width") {
      cfg.model.audio.width = static_cast<int>(as_int(key, value));
      cfg.model.text.width = cfg.model.audio.width;
    } else if (key == "ff_mult") {
      cfg.model.audio.ff_mult = static_cast<int>(as_int(key, value));
      cfg.model.text.ff_mult = cfg.model.audio.ff_mult;
    } else if (key == "patch_frames") cfg.model.audio.patch_frames = static_cast<int>(as_int(key, value));
    else if (key == "max_len") cfg.model.text.max_len = static_cast<int>(as_int(key, value));
    else if (key == "margin") cfg.model.objective.margin = as_double(key, value);
    else if (key == "temperature") cfg.model.objective.temperature_init = as_double(key, value);
    else if (key == "lambda") cfg.model.objective.lambda = as_double(key, value);
    else throw std::runtime_error(path + ": unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               const std::vector<double>& lrs) {
  if (params.size() != lrs.size())
    throw std::invalid_argument("adam_step: " + std::to_string(lrs.size()) +
                                " learning rates for " + std::to_string(params.size()) +
                                " parameters");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Parameter* p : params) {
      state.m.push_back(Tensor2::zeros(p->value.rows, p->value.cols));
      state.v.push_back(Tensor2::zeros(p->value.rows, p->value.cols));
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                " parameters, got " + std::to_string(params.size()));
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor2& m = state.m[i];
    Tensor2& v = state.v[i];
    if (m.rows != p.value.rows || m.cols != p.value.cols)
      throw std::invalid_argument("adam_step: parameter " + p.name + " changed shape");
    const double lr = lrs[i];
    if (!(lr > 0.0))
      throw std::invalid_argument("adam_step: learning rate for " + p.name + " must be positive");
    for (std::size_t j = 0; j < p.value.data.size(); ++j) {
      const double g = p.grad.data[j];
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in " + p.name +
                                 " at step " + std::to_string(state.t));
      m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * g;
      v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * g * g;
      const double m_hat = m.data[j] / bc1;
      const double v_hat = v.data[j] / bc2;
      p.value.data[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

Tensor2 audio_frame_for(const TrackRecord& record, double chunk_seconds, Rng& rng) {
  if (!record.feature.empty()) {
    Tensor2 frame(1, static_cast<int>(record.feature.size()));
    for (std::size_t k = 0; k < record.feature.size(); ++k) frame.data[k] = record.feature[k];
    return frame;
  }
  if (record.audio_path.empty())
    throw std::runtime_error("track " + record.id + " has neither a feature nor an audio path");
  const AudioClip clip = load_wav(record.audio_path);
  const AudioClip chunk = sample_chunk(clip, chunk_seconds, rng);
  return mel_spectrogram(chunk).values;
}

namespace {

TextInput text_input_for(const Vocabulary& vocab, const TrackRecord& record,
                         TextMode mode, Rng& rng) {
  switch (mode) {
    case TextMode::kTag: return tag_representation(vocab, record.tags, rng);
    case TextMode::kSentence: return sentence_representation(vocab, record.tags, rng);
    case TextMode::kStochastic: return stochastic_representation(vocab, record.tags, rng).first;
  }
  throw std::logic_error("unreachable text mode");
}

void write_loss_csv(const TrainResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write loss log " + path);
  out << "step,loss,tau\n";
  char buf[96];
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    const double tau = result.tau_trace[i];
    if (std::isnan(tau)) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,\n", i + 1, result.loss_trace[i]);
    } else {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i + 1, result.loss_trace[i], tau);
    }
    out << buf;
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<TrackRecord>& records) {
  cfg.validate();
  if (records.empty()) throw std::invalid_argument("train: empty dataset");
  validate_splits(records);

  std::vector<const TrackRecord*> train_set;
  for (const TrackRecord& r : records)
    if (r.split == Split::kTrain) train_set.push_back(&r);
  if (train_set.empty()) throw std::invalid_argument("train: no records in the train split");
  if (static_cast<int>(train_set.size()) < cfg.batch_size)
    throw std::invalid_argument("train: train split of " + std::to_string(train_set.size()) +
                                " cannot fill a batch of " + std::to_string(cfg.batch_size));

  const bool feature_data = !train_set.front()->feature.empty();
  for (const TrackRecord* r : train_set) {
    if (r->feature.empty() == feature_data)
      throw std::invalid_argument("train: track " + r->id +
                                  " mixes feature and audio-file records in one dataset");
    if (feature_data && r->feature.size() != train_set.front()->feature.size())
      throw std::invalid_argument("train: track " + r->id + " has feature dimension " +
                                  std::to_string(r->feature.size()) + ", expected " +
                                  std::to_string(train_set.front()->feature.size()));
  }

  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  if (feature_data) {
    mc.audio.input_bins = static_cast<int>(train_set.front()->feature.size());
    mc.audio.patch_frames = 1;
  } else {
    mc.audio.input_bins = 128;
  }

  Vocabulary vocab;
  std::set<std::string> class_set;
  for (const TrackRecord* r : train_set) {
    for (const std::string& tag : r->tags) {
      class_set.insert(tag);
      for (const std::string& word : tokenize(tag)) vocab.add(word);
    }
  }
  std::vector<std::string> classes(class_set.begin(), class_set.end());

  WordVectorTable table;
  if (mc.text_encoder == TextEncoderKind::kBow) {
    if (cfg.word_vectors_path.empty())
      throw std::invalid_argument("train: the bag-of-words encoder needs word_vectors in the config");
    table = load_word_vectors(cfg.word_vectors_path);
  }

  Rng rng(cfg.seed);
  TrainResult result{Model(mc, std::move(vocab), std::move(classes), std::move(table), rng),
                     {}, {}};
  Model& model = result.model;

  const std::vector<Parameter*> params = model.trainable();
  std::vector<double> lrs;
  lrs.reserve(params.size());
  for (Parameter* p : params)
    lrs.push_back(model.is_text_transformer_param(p) ? cfg.lr_text_transformer : cfg.lr_main);

  AdamState adam;
  const bool contrastive = mc.objective.kind == ObjectiveKind::kContrastive;
  const bool classification = mc.objective.kind == ObjectiveKind::kClassification;

  const int n_train = static_cast<int>(train_set.size());
  std::vector<int> order(static_cast<std::size_t>(n_train));
  int step = 0;
  while (step < cfg.steps) {
    for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    for (int start = 0; start + cfg.batch_size <= n_train && step < cfg.steps;
         start += cfg.batch_size) {
      ++step;

      std::vector<Tensor2> mels;
      std::vector<TextInput> texts;
      mels.reserve(static_cast<std::size_t>(cfg.batch_size));
      Tensor2 labels;
      if (classification) labels = Tensor2(cfg.batch_size, static_cast<int>(model.classes.size()));
      for (int b = 0; b < cfg.batch_size; ++b) {
        const TrackRecord& r = *train_set[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        mels.push_back(audio_frame_for(r, cfg.chunk_seconds, rng));
        if (classification) {
          for (std::size_t c = 0; c < model.classes.size(); ++c) {
            const bool has = std::find(r.tags.begin(), r.tags.end(), model.classes[c]) != r.tags.end();
            labels.at(b, static_cast<int>(c)) = has ? 1.0 : 0.0;
          }
        } else {
          texts.push_back(text_input_for(model.vocab, r, mc.text_rep, rng));
        }
      }
      std::vector<const Tensor2*> mel_ptrs;
      mel_ptrs.reserve(mels.size());
      for (const Tensor2& m : mels) mel_ptrs.push_back(&m);

      Tape t;
      Var za = model.audio.forward(t, mel_ptrs);
      Var loss;
      if (classification) {
        Var scores = classify_scores(t, za, model.centroids);
        loss = bce_classification_loss(t, scores, labels);
      } else if (contrastive) {
        Var zt = model.encode_text(t, texts);
        loss = info_nce_symmetric(t, za, zt, t.param(model.tau));
      } else {
        Var zt = model.encode_text(t, texts);
        const TripletNegatives negs =
            sample_triplet_negatives(t.value(za), t.value(zt), mc.objective.lambda, rng);
        loss = triplet_loss_symmetric(t, za, zt, negs, mc.objective.margin);
      }
      const double loss_value = t.value(loss).data[0];
      if (!std::isfinite(loss_value))
        throw std::runtime_error("training aborted at step " + std::to_string(step) +
                                 ": loss is " + std::to_string(loss_value));
      for (Parameter* p : params) p->zero_grad();
      t.backward(loss);
      adam_step(params, adam, lrs);
      if (contrastive && model.tau.value.data[0] < 1e-3) model.tau.value.data[0] = 1e-3;

      result.loss_trace.push_back(loss_value);
      result.tau_trace.push_back(contrastive ? model.tau.value.data[0]
                                             : std::numeric_limits<double>::quiet_NaN());
      if (!cfg.checkpoint_path.empty() && cfg.checkpoint_interval > 0 &&
          step % cfg.checkpoint_interval == 0) {
        save_checkpoint(model, cfg.checkpoint_path);
      }
    }
  }

  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  if (!cfg.loss_csv_path.empty()) write_loss_csv(result, cfg.loss_csv_path);
  return result;
}

}  // namespace xmusic
