#include "xmusic/text.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace xmusic {

namespace {

constexpr int kMaxTokens = 64;  // including SOS

}  // namespace

Vocabulary::Vocabulary() {
  index_to_token_ = {"<sos>", "<unk>"};
  token_to_index_ = {{"<sos>", kSos}, {"<unk>", kUnk}};
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
  for (const std::string& t : tokens) add(t);
}

int Vocabulary::add(const std::string& token) {
  auto it = token_to_index_.find(token);
  if (it != token_to_index_.end()) return it->second;
  const int idx = size();
  token_to_index_.emplace(token, idx);
  index_to_token_.push_back(token);
  return idx;
}

int Vocabulary::index_of(const std::string& token) const {
  auto it = token_to_index_.find(token);
  return it == token_to_index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_at(int index) const {
  if (index < 0 || index >= size()) {
    throw std::invalid_argument("Vocabulary: index " + std::to_string(index) +
                                " out of range, size " + std::to_string(size()));
  }
  return index_to_token_[static_cast<std::size_t>(index)];
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) {
        out.push_back(current);
        current.clear();
      }
    } else {
      current.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) out.push_back(current);
  if (out.empty()) {
    throw std::invalid_argument("tokenize: empty or whitespace-only text");
  }
  return out;
}

namespace {

// Shuffles the tag list and flattens it to words. This is the shared first
// rng draw of sentence and stochastic representations, so a common seed
// yields a common word order.
std::vector<std::string> shuffled_sentence_words(const std::vector<std::string>& tags,
                                                 Rng& rng) {
  std::vector<std::string> order = tags;
  rng.shuffle(order);
  std::vector<std::string> words;
  for (const std::string& tag : order) {
    for (std::string& w : tokenize(tag)) words.push_back(std::move(w));
  }
  return words;
}

TextInput make_text_input(const Vocabulary& vocab, std::vector<std::string> words,
                          TextMode mode, const std::vector<std::string>& source_tags) {
  if (words.size() > kMaxTokens - 1) words.resize(kMaxTokens - 1);
  TextInput input;
  input.mode = mode;
  input.source_tags = source_tags;
  input.tokens.reserve(words.size() + 1);
  input.tokens.push_back(Vocabulary::kSos);
  for (const std::string& w : words) input.tokens.push_back(vocab.index_of(w));
  input.words = std::move(words);
  return input;
}

void require_tags(const std::vector<std::string>& tags, const char* op) {
  if (tags.empty()) {
    throw std::invalid_argument(std::string(op) + ": empty tag list");
  }
}

}  // namespace

TextInput tag_representation(const Vocabulary& vocab,
                             const std::vector<std::string>& tags, Rng& rng) {
  require_tags(tags, "tag_representation");
  const std::size_t pick =
      static_cast<std::size_t>(rng.uniform_u64(static_cast<std::uint64_t>(tags.size())));
  return make_text_input(vocab, tokenize(tags[pick]), TextMode::kTag, tags);
}

TextInput sentence_representation(const Vocabulary& vocab,
                                  const std::vector<std::string>& tags, Rng& rng) {
  require_tags(tags, "sentence_representation");
  return make_text_input(vocab, shuffled_sentence_words(tags, rng),
                         TextMode::kSentence, tags);
}

std::pair<TextInput, StochasticSample> stochastic_representation(
    const Vocabulary& vocab, const std::vector<std::string>& tags, Rng& rng) {
  require_tags(tags, "stochastic_representation");
  std::vector<std::string> sentence = shuffled_sentence_words(tags, rng);
  const int L = static_cast<int>(sentence.size());
  const int K = rng.uniform_int(1, L);
  StochasticSample sample;
  sample.L = L;
  sample.K = K;
  sample.kept_positions = rng.sample_without_replacement(L, K);
  std::vector<std::string> kept;
  kept.reserve(static_cast<std::size_t>(K));
  for (int pos : sample.kept_positions) {
    kept.push_back(sentence[static_cast<std::size_t>(pos)]);
  }
  return {make_text_input(vocab, std::move(kept), TextMode::kStochastic, tags),
          std::move(sample)};
}

TextInput plain_text_input(const Vocabulary& vocab, const std::string& text,
                           int max_len) {
  if (max_len < 2) {
    throw std::invalid_argument("plain_text_input: max_len " +
                                std::to_string(max_len) + " leaves no room for words");
  }
  std::vector<std::string> words = tokenize(text);
  const std::size_t budget = static_cast<std::size_t>(max_len) - 1;
  if (words.size() > budget) words.resize(budget);
  TextInput input;
  input.mode = TextMode::kSentence;
  input.tokens.reserve(words.size() + 1);
  input.tokens.push_back(Vocabulary::kSos);
  for (const std::string& w : words) input.tokens.push_back(vocab.index_of(w));
  input.words = std::move(words);
  return input;
}

std::vector<double> WordVectorTable::lookup(const std::string& token) const {
  auto it = vectors.find(token);
  if (it != vectors.end()) return it->second;
  return std::vector<double>(static_cast<std::size_t>(dimension), 0.0);
}

WordVectorTable load_word_vectors(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_word_vectors: cannot open '" + path + "'");
  WordVectorTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t at = 0;
    while (at < line.size() && !std::isspace(static_cast<unsigned char>(line[at]))) ++at;
    if (at == 0 || at == line.size()) {
      throw std::runtime_error("load_word_vectors: line " + std::to_string(line_no) +
                               ": expected a token followed by numbers");
    }
    std::string token = line.substr(0, at);
    std::vector<double> vec;
    const char* cursor = line.c_str() + at;
    const char* end = line.c_str() + line.size();
    while (cursor < end) {
      while (cursor < end && std::isspace(static_cast<unsigned char>(*cursor))) ++cursor;
      if (cursor >= end) break;
      char* after = nullptr;
      const double v = std::strtod(cursor, &after);
      if (after == cursor ||
          (after < end && !std::isspace(static_cast<unsigned char>(*after)))) {
        throw std::runtime_error("load_word_vectors: line " + std::to_string(line_no) +
                                 ": unparseable number starting at '" +
                                 std::string(cursor, std::min<std::size_t>(8, end - cursor)) +
                                 "'");
      }
      vec.push_back(v);
      cursor = after;
    }
    if (vec.empty()) {
      throw std::runtime_error("load_word_vectors: line " + std::to_string(line_no) +
                               ": no vector values");
    }
    if (table.dimension == 0) {
      table.dimension = static_cast<int>(vec.size());
    } else if (static_cast<int>(vec.size()) != table.dimension) {
      throw std::runtime_error("load_word_vectors: line " + std::to_string(line_no) +
                               ": dimension " + std::to_string(vec.size()) +
                               " does not match established dimension " +
                               std::to_string(table.dimension));
    }
    table.vectors.emplace(std::move(token), std::move(vec));  // keeps first
  }
  if (table.vectors.empty()) {
    throw std::runtime_error("load_word_vectors: no entries in '" + path + "'");
  }
  return table;
}

}  // namespace xmusic
