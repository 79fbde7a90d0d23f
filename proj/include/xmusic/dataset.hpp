#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xmusic/rng.hpp"
#include "xmusic/tensor.hpp"

namespace xmusic {

enum class Split { kTrain, kValid, kTest };

Split split_from_string(const std::string& name);
std::string to_string(Split split);

struct TrackRecord {
  std::string id;
  std::string artist_id;
  std::string album_id;
  std::vector<std::string> tags;
  std::string caption;          // empty means absent
  std::string audio_path;       // empty means absent
  std::vector<double> feature;  // empty means absent
  Split split = Split::kTrain;
};

// One JSON object per line. Errors name the path and 1-based line number.
std::vector<TrackRecord> load_dataset(const std::string& path);
void save_dataset(const std::vector<TrackRecord>& records, const std::string& path);

// Artist ids that appear in more than one split, sorted ascending.
std::vector<std::string> split_violations(const std::vector<TrackRecord>& records);

// Throws std::runtime_error naming every offending artist.
void validate_splits(const std::vector<TrackRecord>& records);

struct SyntheticSpec {
  int clusters = 8;
  int tracks_per_cluster = 64;
  int words_per_cluster = 12;
  int shared_words = 4;
  int feature_dim = 32;
  double sigma = 0.1;
  double word_pull = 1.0;  // weight of the mean tag-word direction in a feature
  unsigned long long seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<TrackRecord> records;
  std::vector<std::string> words;  // full vocabulary in generation order
  Tensor2 word_directions;         // words x feature_dim, unit rows
  Tensor2 centroids;               // clusters x feature_dim, unit rows
  std::vector<int> cluster_of_track;
};

// Fully seeded: the same spec produces byte-identical output files.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Writes dataset.jsonl, train.jsonl, valid.jsonl, test.jsonl,
// pairs_test.jsonl, and word_vectors.txt into out_dir (created if missing).
void write_synthetic_dataset(const SyntheticDataset& data, const std::string& out_dir);

// Flat key=value text, one pair per line; blank lines and lines starting
// with '#' are skipped. Duplicate keys are an error naming the line.
std::map<std::string, std::string> parse_key_value_file(const std::string& path);

SyntheticSpec parse_synthetic_spec(const std::string& path);

struct EmbeddingStore {
  std::vector<std::string> ids;
  Tensor2 vectors;  // rows unit-norm within 1e-6

  int count() const { return vectors.rows; }
  int dim() const { return vectors.cols; }
};

// Binary format: magic "XMEB", version u32, count u64, dim u32, row-major
// little-endian f32 matrix, then length-prefixed UTF-8 ids.
void store_write(const EmbeddingStore& store, const std::string& path);
EmbeddingStore store_read(const std::string& path);

// FNV-1a 64-bit hash of a whole file, as fixed-width hex.
std::string file_checksum(const std::string& path);

}  // namespace xmusic
