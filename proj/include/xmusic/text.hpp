#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xmusic/rng.hpp"

namespace xmusic {

// Token index space shared by the text encoders. Index 0 is SOS, index 1 is
// UNK; all other indices map one-to-one onto vocabulary tokens.
class Vocabulary {
 public:
  static constexpr int kSos = 0;
  static constexpr int kUnk = 1;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  int add(const std::string& token);              // idempotent
  int index_of(const std::string& token) const;   // kUnk when absent
  const std::string& token_at(int index) const;
  int size() const { return static_cast<int>(index_to_token_.size()); }
  const std::vector<std::string>& tokens() const { return index_to_token_; }

 private:
  std::unordered_map<std::string, int> token_to_index_;
  std::vector<std::string> index_to_token_;
};

enum class TextMode { kTag, kSentence, kStochastic };

// One encoded text view of a track's tags. tokens always starts with SOS and
// holds at most 64 entries; words mirrors tokens[1..] as strings for the
// bag-of-words path.
struct TextInput {
  std::vector<int> tokens;
  std::vector<std::string> words;
  TextMode mode = TextMode::kTag;
  std::vector<std::string> source_tags;
};

struct StochasticSample {
  int L = 0;                        // sentence word count before truncation
  int K = 0;                        // sampled word count, uniform on {1..L}
  std::vector<int> kept_positions;  // strictly increasing, size K
};

struct WordVectorTable {
  int dimension = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;

  // Unknown tokens map to the zero vector.
  std::vector<double> lookup(const std::string& token) const;
};

// Lowercases (ASCII) and splits on whitespace runs. Throws
// std::invalid_argument on empty or whitespace-only text.
std::vector<std::string> tokenize(const std::string& text);

// One tag drawn uniformly.
TextInput tag_representation(const Vocabulary& vocab,
                             const std::vector<std::string>& tags, Rng& rng);

// All tags in a seeded-shuffled order, joined by single spaces.
TextInput sentence_representation(const Vocabulary& vocab,
                                  const std::vector<std::string>& tags, Rng& rng);

// Sentence word list (same shuffle draw as sentence_representation), then
// K ~ Uniform{1..L} distinct word positions kept in original order.
std::pair<TextInput, StochasticSample> stochastic_representation(
    const Vocabulary& vocab, const std::vector<std::string>& tags, Rng& rng);

// Evaluation-time input: every word of the text in written order, no
// sampling, truncated to max_len tokens including the SOS slot.
TextInput plain_text_input(const Vocabulary& vocab, const std::string& text, int max_len);

// GloVe-style text file: token then D decimals per line; the first line fixes
// D; duplicate tokens keep their first occurrence. Errors name line numbers.
WordVectorTable load_word_vectors(const std::string& path);

}  // namespace xmusic
