#include "xmusic/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace xmusic {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + name + "', expected train, valid, or test");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  throw std::logic_error("unreachable split");
}

namespace {

TrackRecord record_from_json(const ordered_json& j, const std::string& where) {
  TrackRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.artist_id = j.at("artist_id").get<std::string>();
    r.album_id = j.value("album_id", std::string());
    r.tags = j.at("tags").get<std::vector<std::string>>();
    if (j.contains("caption") && !j["caption"].is_null())
      r.caption = j["caption"].get<std::string>();
    if (j.contains("audio_path") && !j["audio_path"].is_null())
      r.audio_path = j["audio_path"].get<std::string>();
    if (j.contains("feature") && !j["feature"].is_null())
      r.feature = j["feature"].get<std::vector<double>>();
    r.split = split_from_string(j.at("split").get<std::string>());
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
  if (r.id.empty()) throw std::runtime_error(where + ": empty track id");
  if (r.artist_id.empty()) throw std::runtime_error(where + ": empty artist id for track " + r.id);
  if (r.tags.empty()) throw std::runtime_error(where + ": track " + r.id + " has no tags");
  return r;
}

ordered_json record_to_json(const TrackRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["artist_id"] = r.artist_id;
  j["album_id"] = r.album_id;
  j["tags"] = r.tags;
  if (r.caption.empty()) j["caption"] = nullptr; else j["caption"] = r.caption;
  if (r.audio_path.empty()) j["audio_path"] = nullptr; else j["audio_path"] = r.audio_path;
  if (r.feature.empty()) j["feature"] = nullptr; else j["feature"] = r.feature;
  j["split"] = to_string(r.split);
  return j;
}

}  // namespace

std::vector<TrackRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  std::vector<TrackRecord> records;
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + " line " + std::to_string(line_no);
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const ordered_json::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    TrackRecord r = record_from_json(j, where);
    if (!seen_ids.insert(r.id).second)
      throw std::runtime_error(where + ": duplicate track id " + r.id);
    records.push_back(std::move(r));
  }
  return records;
}

void save_dataset(const std::vector<TrackRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  for (const TrackRecord& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<std::string> split_violations(const std::vector<TrackRecord>& records) {
  std::unordered_map<std::string, std::set<Split>> splits_of;
  for (const TrackRecord& r : records) splits_of[r.artist_id].insert(r.split);
  std::vector<std::string> offenders;
  for (const auto& [artist, splits] : splits_of)
    if (splits.size() > 1) offenders.push_back(artist);
  std::sort(offenders.begin(), offenders.end());
  return offenders;
}

void validate_splits(const std::vector<TrackRecord>& records) {
  const std::vector<std::string> offenders = split_violations(records);
  if (offenders.empty()) return;
  std::string msg = "artist-stratification violated by: ";
  for (std::size_t i = 0; i < offenders.size(); ++i) {
    if (i) msg += ", ";
    msg += offenders[i];
  }
  throw std::runtime_error(msg);
}

void SyntheticSpec::validate() const {
  if (clusters < 2)
    throw std::invalid_argument("synthetic spec: clusters " + std::to_string(clusters) +
                                " must be at least 2");
  if (tracks_per_cluster < 3)
    throw std::invalid_argument("synthetic spec: tracks_per_cluster " +
                                std::to_string(tracks_per_cluster) +
                                " cannot be stratified over three splits");
  if (words_per_cluster + shared_words < 5)
    throw std::invalid_argument("synthetic spec: vocabulary of " +
                                std::to_string(words_per_cluster + shared_words) +
                                " words cannot supply up to 5 tags");
  if (words_per_cluster < 1 || shared_words < 0)
    throw std::invalid_argument("synthetic spec: invalid vocabulary sizes");
  if (feature_dim < 2)
    throw std::invalid_argument("synthetic spec: feature_dim must be at least 2");
  if (sigma < 0.0)
    throw std::invalid_argument("synthetic spec: sigma must be nonnegative");
  if (word_pull < 0.0)
    throw std::invalid_argument("synthetic spec: word_pull must be nonnegative");
}

namespace {

void fill_unit_row(Tensor2& m, int row, Rng& rng) {
  double norm_sq = 0.0;
  for (int k = 0; k < m.cols; ++k) {
    const double v = rng.normal();
    m.at(row, k) = v;
    norm_sq += v * v;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (int k = 0; k < m.cols; ++k) m.at(row, k) *= inv;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticDataset out;
  out.spec = spec;

  const int cluster_vocab = spec.words_per_cluster + spec.shared_words;
  for (int c = 0; c < spec.clusters; ++c)
    for (int k = 0; k < spec.words_per_cluster; ++k)
      out.words.push_back("w" + std::to_string(c) + "_" + std::to_string(k));
  for (int k = 0; k < spec.shared_words; ++k)
    out.words.push_back("shared_" + std::to_string(k));

  out.word_directions = Tensor2(static_cast<int>(out.words.size()), spec.feature_dim);
  for (int w = 0; w < out.word_directions.rows; ++w) fill_unit_row(out.word_directions, w, rng);

  // Rejection keeps centroids well separated so nearest-centroid labels stay
  // unambiguous even with the tag-word pull applied.
  out.centroids = Tensor2(spec.clusters, spec.feature_dim);
  for (int c = 0; c < spec.clusters; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000)
        throw std::runtime_error("synthetic generation: cannot separate " +
                                 std::to_string(spec.clusters) + " centroids in dimension " +
                                 std::to_string(spec.feature_dim));
      fill_unit_row(out.centroids, c, rng);
      bool ok = true;
      for (int prev = 0; prev < c && ok; ++prev) {
        double dot = 0.0;
        for (int k = 0; k < spec.feature_dim; ++k) dot += out.centroids.at(c, k) * out.centroids.at(prev, k);
        ok = dot <= 0.25;
      }
      if (ok) break;
    }
  }

  // Whole artists land in one split; roughly 80 percent of them train.
  const int artists_per_cluster =
      std::min(spec.tracks_per_cluster, std::max(5, spec.tracks_per_cluster / 8));
  const int n_side = std::max(1, artists_per_cluster / 8);
  const int n_train_artists = artists_per_cluster - 2 * n_side;

  char buf[64];
  int global_track = 0;
  for (int c = 0; c < spec.clusters; ++c) {
    for (int i = 0; i < spec.tracks_per_cluster; ++i, ++global_track) {
      TrackRecord r;
      std::snprintf(buf, sizeof(buf), "track_%05d", global_track);
      r.id = buf;
      const int artist = i % artists_per_cluster;
      std::snprintf(buf, sizeof(buf), "artist_c%d_%d", c, artist);
      r.artist_id = buf;
      std::snprintf(buf, sizeof(buf), "album_c%d_%d", c, artist);
      r.album_id = buf;
      if (artist < n_train_artists) r.split = Split::kTrain;
      else if (artist < n_train_artists + n_side) r.split = Split::kValid;
      else r.split = Split::kTest;

      const int n_tags = rng.uniform_int(2, 5);
      const std::vector<int> picks = rng.sample_without_replacement(cluster_vocab, n_tags);
      std::vector<int> word_ids;
      for (int p : picks) {
        const int wid = p < spec.words_per_cluster
                            ? c * spec.words_per_cluster + p
                            : spec.clusters * spec.words_per_cluster + (p - spec.words_per_cluster);
        word_ids.push_back(wid);
        r.tags.push_back(out.words[static_cast<std::size_t>(wid)]);
      }
      std::string caption;
      for (std::size_t k = 0; k < r.tags.size(); ++k) {
        if (k) caption += ' ';
        caption += r.tags[k];
      }
      r.caption = caption;

      r.feature.resize(static_cast<std::size_t>(spec.feature_dim));
      for (int k = 0; k < spec.feature_dim; ++k) {
        double mean_dir = 0.0;
        for (int wid : word_ids) mean_dir += out.word_directions.at(wid, k);
        mean_dir /= static_cast<double>(word_ids.size());
        r.feature[static_cast<std::size_t>(k)] =
            out.centroids.at(c, k) + spec.word_pull * mean_dir + spec.sigma * rng.normal();
      }

      out.records.push_back(std::move(r));
      out.cluster_of_track.push_back(c);
    }
  }
  validate_splits(out.records);
  return out;
}

void write_synthetic_dataset(const SyntheticDataset& data, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  save_dataset(data.records, (dir / "dataset.jsonl").string());
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    std::vector<TrackRecord> part;
    for (const TrackRecord& r : data.records)
      if (r.split == s) part.push_back(r);
    save_dataset(part, (dir / (to_string(s) + ".jsonl")).string());
  }

  std::ofstream pairs((dir / "pairs_test.jsonl").string(), std::ios::binary);
  if (!pairs) throw std::runtime_error("cannot write " + (dir / "pairs_test.jsonl").string());
  for (const TrackRecord& r : data.records) {
    if (r.split != Split::kTest) continue;
    ordered_json j;
    j["query_id"] = r.id;
    j["item_id"] = r.id;
    j["text"] = r.caption;
    pairs << j.dump() << '\n';
  }

  std::ofstream wv((dir / "word_vectors.txt").string(), std::ios::binary);
  if (!wv) throw std::runtime_error("cannot write " + (dir / "word_vectors.txt").string());
  char num[64];
  for (int w = 0; w < data.word_directions.rows; ++w) {
    wv << data.words[static_cast<std::size_t>(w)];
    for (int k = 0; k < data.word_directions.cols; ++k) {
      std::snprintf(num, sizeof(num), " %.17g", data.word_directions.at(w, k));
      wv << num;
    }
    wv << '\n';
  }
}

std::map<std::string, std::string> parse_key_value_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r";
    const std::size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return std::string();
    const std::size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": expected key=value, got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(path + " line " + std::to_string(line_no) + ": empty key");
    if (!out.emplace(key, value).second)
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": duplicate key '" + key + "'");
  }
  return out;
}

namespace {

long long parse_int_value(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key " + key + ": cannot parse integer from '" + value + "'");
  }
}

double parse_double_value(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key " + key + ": cannot parse number from '" + value + "'");
  }
}

}  // namespace

SyntheticSpec parse_synthetic_spec(const std::string& path) {
  const std::map<std::string, std::string> kv = parse_key_value_file(path);
  SyntheticSpec spec;
  for (const auto& [key, value] : kv) {
    if (key == "clusters") spec.clusters = static_cast<int>(parse_int_value(key, value));
    else if (key == "tracks_per_cluster") spec.tracks_per_cluster = static_cast<int>(parse_int_value(key, value));
    else if (key == "words_per_cluster") spec.words_per_cluster = static_cast<int>(parse_int_value(key, value));
    else if (key == "shared_words") spec.shared_words = static_cast<int>(parse_int_value(key, value));
    else if (key == "feature_dim") spec.feature_dim = static_cast<int>(parse_int_value(key, value));
    else if (key == "sigma") spec.sigma = parse_double_value(key, value);
    else if (key == "word_pull") spec.word_pull = parse_double_value(key, value);
    else if (key == "seed") spec.seed = static_cast<unsigned long long>(parse_int_value(key, value));
    else throw std::runtime_error(path + ": unknown synthetic spec key '" + key + "'");
  }
  spec.validate();
  return spec;
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t& pos, const std::string& path) {
  if (pos + 4 > s.size()) throw std::runtime_error("embedding store " + path + " is truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  pos += 4;
  return v;
}

std::uint64_t get_u64(const std::string& s, std::size_t& pos, const std::string& path) {
  if (pos + 8 > s.size()) throw std::runtime_error("embedding store " + path + " is truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  pos += 8;
  return v;
}

void check_store_rows(const EmbeddingStore& store, double tol, const std::string& what) {
  if (store.ids.size() != static_cast<std::size_t>(store.vectors.rows))
    throw std::runtime_error(what + ": " + std::to_string(store.ids.size()) + " ids for " +
                             std::to_string(store.vectors.rows) + " vectors");
  std::set<std::string> seen;
  for (const std::string& id : store.ids)
    if (!seen.insert(id).second) throw std::runtime_error(what + ": duplicate id " + id);
  for (int i = 0; i < store.vectors.rows; ++i) {
    double norm_sq = 0.0;
    for (int k = 0; k < store.vectors.cols; ++k) norm_sq += store.vectors.at(i, k) * store.vectors.at(i, k);
    if (std::abs(std::sqrt(norm_sq) - 1.0) > tol)
      throw std::runtime_error(what + ": row " + std::to_string(i) + " (" + store.ids[static_cast<std::size_t>(i)] +
                               ") has norm " + std::to_string(std::sqrt(norm_sq)));
  }
}

}  // namespace

void store_write(const EmbeddingStore& store, const std::string& path) {
  check_store_rows(store, 1e-6, "store_write " + path);
  std::string buf;
  buf += "XMEB";
  put_u32(buf, 1);
  put_u64(buf, static_cast<std::uint64_t>(store.vectors.rows));
  put_u32(buf, static_cast<std::uint32_t>(store.vectors.cols));
  for (double v : store.vectors.data) {
    const float f = static_cast<float>(v);
    char raw[4];
    std::memcpy(raw, &f, 4);
    buf.append(raw, 4);
  }
  for (const std::string& id : store.ids) {
    put_u32(buf, static_cast<std::uint32_t>(id.size()));
    buf += id;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embedding store " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("short write to embedding store " + path);
}

EmbeddingStore store_read(const std::string& path) {
  const std::string buf = read_file(path);
  std::size_t pos = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "XMEB") != 0)
    throw std::runtime_error("embedding store " + path + " has bad magic");
  pos = 4;
  const std::uint32_t version = get_u32(buf, pos, path);
  if (version != 1)
    throw std::runtime_error("embedding store " + path + " has unsupported version " +
                             std::to_string(version));
  const std::uint64_t count = get_u64(buf, pos, path);
  const std::uint32_t dim = get_u32(buf, pos, path);
  if (count > (1ull << 32))
    throw std::runtime_error("embedding store " + path + " has implausible count");
  EmbeddingStore store;
  store.vectors = Tensor2(static_cast<int>(count), static_cast<int>(dim));
  const std::size_t payload = static_cast<std::size_t>(count) * dim * 4;
  if (pos + payload > buf.size())
    throw std::runtime_error("embedding store " + path + " is truncated");
  for (std::size_t i = 0; i < static_cast<std::size_t>(count) * dim; ++i) {
    float f;
    std::memcpy(&f, buf.data() + pos + i * 4, 4);
    store.vectors.data[i] = static_cast<double>(f);
  }
  pos += payload;
  store.ids.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(buf, pos, path);
    if (pos + len > buf.size())
      throw std::runtime_error("embedding store " + path + " is truncated");
    store.ids.emplace_back(buf.substr(pos, len));
    pos += len;
  }
  if (pos != buf.size())
    throw std::runtime_error("embedding store " + path + " has " +
                             std::to_string(buf.size() - pos) + " trailing bytes");
  check_store_rows(store, 1e-6, "store_read " + path);
  return store;
}

std::string file_checksum(const std::string& path) {
  const std::string buf = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : buf) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

}  // namespace xmusic
