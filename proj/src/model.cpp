#include "xmusic/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace xmusic {

namespace {

using ordered_json = nlohmann::ordered_json;

Tensor2 normal_scaled(Rng& rng, int rows, int cols, double stddev) {
  Tensor2 m(rows, cols);
  for (auto& v : m.data) v = stddev * rng.normal();
  return m;
}

}  // namespace

TextEncoderKind text_encoder_from_string(const std::string& name) {
  if (name == "bow") return TextEncoderKind::kBow;
  if (name == "transformer") return TextEncoderKind::kTransformer;
  throw std::invalid_argument("unknown text encoder '" + name + "', expected bow or transformer");
}

std::string to_string(TextEncoderKind kind) {
  return kind == TextEncoderKind::kBow ? "bow" : "transformer";
}

TextMode text_mode_from_string(const std::string& name) {
  if (name == "tag") return TextMode::kTag;
  if (name == "sentence") return TextMode::kSentence;
  if (name == "stochastic") return TextMode::kStochastic;
  throw std::invalid_argument("unknown text representation '" + name +
                              "', expected tag, sentence, or stochastic");
}

std::string to_string(TextMode mode) {
  switch (mode) {
    case TextMode::kTag: return "tag";
    case TextMode::kSentence: return "sentence";
    case TextMode::kStochastic: return "stochastic";
  }
  throw std::logic_error("unreachable text mode");
}

Model::Model(ModelConfig cfg, Vocabulary vocabulary, std::vector<std::string> class_names,
             WordVectorTable table, Rng& rng)
    : config(cfg),
      vocab(std::move(vocabulary)),
      classes(std::move(class_names)),
      word_table(std::move(table)),
      audio(cfg.audio, rng) {
  if (config.text_encoder == TextEncoderKind::kTransformer) {
    text_transformer = std::make_unique<TextTransformerEncoder>(config.text, vocab.size(), rng);
  } else {
    if (word_table.dimension <= 0)
      throw std::invalid_argument("bag-of-words model needs a word vector table");
    text_bow = std::make_unique<TextBowEncoder>(word_table.dimension, config.text.embed_dim, rng);
  }
  if (config.objective.kind == ObjectiveKind::kContrastive) {
    tau = Parameter{"objective.tau", Tensor2::full(1, 1, config.objective.temperature_init)};
    if (!(config.objective.temperature_init > 0.0))
      throw std::invalid_argument("temperature init must be positive");
  }
  if (config.objective.kind == ObjectiveKind::kClassification) {
    if (classes.empty())
      throw std::invalid_argument("classification model needs a class list");
    centroids = Parameter{"objective.centroids",
                          normal_scaled(rng, static_cast<int>(classes.size()),
                                        config.audio.embed_dim,
                                        1.0 / std::sqrt(static_cast<double>(config.audio.embed_dim)))};
  }
}

std::vector<Parameter*> Model::trainable() {
  std::vector<Parameter*> params = audio.parameters();
  if (text_transformer) {
    for (Parameter* p : text_transformer->parameters()) params.push_back(p);
  }
  if (text_bow) {
    for (Parameter* p : text_bow->parameters()) params.push_back(p);
  }
  if (config.objective.kind == ObjectiveKind::kContrastive) params.push_back(&tau);
  if (config.objective.kind == ObjectiveKind::kClassification) params.push_back(&centroids);
  return params;
}

bool Model::is_text_transformer_param(const Parameter* p) {
  if (!text_transformer) return false;
  for (Parameter* q : text_transformer->parameters())
    if (q == p) return true;
  return false;
}

Var Model::encode_text(Tape& t, const std::vector<TextInput>& batch) {
  if (text_transformer) {
    std::vector<std::vector<int>> tokens;
    tokens.reserve(batch.size());
    for (const TextInput& in : batch) tokens.push_back(in.tokens);
    return text_transformer->forward(t, tokens);
  }
  std::vector<std::vector<std::string>> words;
  words.reserve(batch.size());
  for (const TextInput& in : batch) words.push_back(in.words);
  return text_bow->forward(t, words, word_table);
}

namespace {

ordered_json encoder_to_json(const EncoderConfig& c) {
  ordered_json j;
  j["embed_dim"] = c.embed_dim;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["width"] = c.width;
  j["ff_mult"] = c.ff_mult;
  j["patch_frames"] = c.patch_frames;
  j["input_bins"] = c.input_bins;
  j["max_len"] = c.max_len;
  return j;
}

EncoderConfig encoder_from_json(const ordered_json& j) {
  EncoderConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.width = j.at("width").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  c.patch_frames = j.at("patch_frames").get<int>();
  c.input_bins = j.at("input_bins").get<int>();
  c.max_len = j.at("max_len").get<int>();
  return c;
}

void append_tensor(std::string& buf, const Tensor2& t) {
  static_assert(sizeof(double) == 8);
  const std::size_t bytes = t.data.size() * 8;
  const std::size_t off = buf.size();
  buf.resize(off + bytes);
  std::memcpy(buf.data() + off, t.data.data(), bytes);
}

void read_tensor(const std::string& buf, std::size_t& pos, Tensor2& t, const std::string& path) {
  const std::size_t bytes = t.data.size() * 8;
  if (pos + bytes > buf.size())
    throw std::runtime_error("checkpoint " + path + " is truncated");
  std::memcpy(t.data.data(), buf.data() + pos, bytes);
  pos += bytes;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  ordered_json header;
  header["format"] = "xmusic-checkpoint";
  header["version"] = 1;
  header["seed"] = model.config.seed;
  ordered_json cfg;
  cfg["objective"] = to_string(model.config.objective.kind);
  cfg["margin"] = model.config.objective.margin;
  cfg["temperature_init"] = model.config.objective.temperature_init;
  cfg["lambda"] = model.config.objective.lambda;
  cfg["text_rep"] = to_string(model.config.text_rep);
  cfg["text_encoder"] = to_string(model.config.text_encoder);
  cfg["audio"] = encoder_to_json(model.config.audio);
  cfg["text"] = encoder_to_json(model.config.text);
  header["config"] = cfg;
  header["vocab"] = model.vocab.tokens();
  header["classes"] = model.classes;
  if (model.config.text_encoder == TextEncoderKind::kBow) {
    ordered_json wt;
    wt["dim"] = model.word_table.dimension;
    std::vector<std::string> words;
    words.reserve(model.word_table.vectors.size());
    for (const auto& [word, vec] : model.word_table.vectors) words.push_back(word);
    std::sort(words.begin(), words.end());
    wt["words"] = words;
    header["word_table"] = wt;
  } else {
    header["word_table"] = nullptr;
  }
  ordered_json params = ordered_json::array();
  for (Parameter* p : model.trainable()) {
    ordered_json e;
    e["name"] = p->name;
    e["rows"] = p->value.rows;
    e["cols"] = p->value.cols;
    params.push_back(e);
  }
  header["params"] = params;

  std::string buf = header.dump();
  buf += '\n';
  for (Parameter* p : model.trainable()) append_tensor(buf, p->value);
  if (model.config.text_encoder == TextEncoderKind::kBow) {
    const auto& words = header["word_table"]["words"];
    Tensor2 wt(static_cast<int>(words.size()), model.word_table.dimension);
    int row = 0;
    for (const auto& w : words) {
      const std::vector<double> vec = model.word_table.lookup(w.get<std::string>());
      for (int k = 0; k < model.word_table.dimension; ++k) wt.at(row, k) = vec[static_cast<std::size_t>(k)];
      ++row;
    }
    append_tensor(buf, wt);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("short write to checkpoint " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::ostringstream raw;
  raw << in.rdbuf();
  const std::string buf = raw.str();
  const std::size_t nl = buf.find('\n');
  if (nl == std::string::npos)
    throw std::runtime_error("checkpoint " + path + " has no header line");
  ordered_json header;
  try {
    header = ordered_json::parse(buf.substr(0, nl));
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error("checkpoint " + path + ": bad header: " + e.what());
  }
  if (header.value("format", std::string()) != "xmusic-checkpoint")
    throw std::runtime_error("checkpoint " + path + " has unknown format");
  if (header.value("version", 0) != 1)
    throw std::runtime_error("checkpoint " + path + " has unsupported version");

  ModelConfig cfg;
  const ordered_json& jc = header.at("config");
  cfg.objective.kind = objective_kind_from_string(jc.at("objective").get<std::string>());
  cfg.objective.margin = jc.at("margin").get<double>();
  cfg.objective.temperature_init = jc.at("temperature_init").get<double>();
  cfg.objective.lambda = jc.at("lambda").get<double>();
  cfg.text_rep = text_mode_from_string(jc.at("text_rep").get<std::string>());
  cfg.text_encoder = text_encoder_from_string(jc.at("text_encoder").get<std::string>());
  cfg.audio = encoder_from_json(jc.at("audio"));
  cfg.text = encoder_from_json(jc.at("text"));
  cfg.seed = header.at("seed").get<unsigned long long>();

  const std::vector<std::string> vocab_tokens =
      header.at("vocab").get<std::vector<std::string>>();
  Vocabulary vocab(vocab_tokens);
  if (vocab.size() != static_cast<int>(vocab_tokens.size()))
    throw std::runtime_error("checkpoint " + path + " has a malformed vocabulary");
  std::vector<std::string> classes = header.at("classes").get<std::vector<std::string>>();

  WordVectorTable table;
  std::vector<std::string> table_words;
  if (!header.at("word_table").is_null()) {
    table.dimension = header["word_table"].at("dim").get<int>();
    table_words = header["word_table"].at("words").get<std::vector<std::string>>();
  }

  std::size_t pos = nl + 1;
  // The rng only shapes the initialization, which the stored tensors replace.
  Rng rng(cfg.seed);
  if (!table_words.empty()) {
    // Placeholder entries let the bag-of-words encoder validate dimensions.
    for (const std::string& w : table_words)
      table.vectors.emplace(w, std::vector<double>(static_cast<std::size_t>(table.dimension), 0.0));
  }
  Model model(cfg, std::move(vocab), std::move(classes), std::move(table), rng);

  const ordered_json& params = header.at("params");
  std::vector<Parameter*> live = model.trainable();
  if (params.size() != live.size())
    throw std::runtime_error("checkpoint " + path + " lists " + std::to_string(params.size()) +
                             " tensors for a model with " + std::to_string(live.size()));
  for (std::size_t i = 0; i < live.size(); ++i) {
    const ordered_json& e = params[i];
    const std::string name = e.at("name").get<std::string>();
    const int rows = e.at("rows").get<int>();
    const int cols = e.at("cols").get<int>();
    if (name != live[i]->name || rows != live[i]->value.rows || cols != live[i]->value.cols)
      throw std::runtime_error("checkpoint " + path + " tensor " + std::to_string(i) + " (" +
                               name + " " + std::to_string(rows) + "x" + std::to_string(cols) +
                               ") does not match model parameter " + live[i]->name);
    read_tensor(buf, pos, live[i]->value, path);
    live[i]->grad = Tensor2::zeros(rows, cols);
  }
  if (!table_words.empty()) {
    Tensor2 wt(static_cast<int>(table_words.size()), model.word_table.dimension);
    read_tensor(buf, pos, wt, path);
    for (std::size_t i = 0; i < table_words.size(); ++i) {
      std::vector<double>& vec = model.word_table.vectors[table_words[i]];
      for (int k = 0; k < wt.cols; ++k) vec[static_cast<std::size_t>(k)] = wt.at(static_cast<int>(i), k);
    }
  }
  if (pos != buf.size())
    throw std::runtime_error("checkpoint " + path + " has " + std::to_string(buf.size() - pos) +
                             " trailing bytes");
  return model;
}

}  // namespace xmusic
