#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xmusic/dataset.hpp"
#include "xmusic/model.hpp"
#include "xmusic/text.hpp"
#include "xmusic/trainer.hpp"

using namespace xmusic;

namespace {

std::filesystem::path temp_dir() {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "xmusic_trainer_tests";
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.clusters = 2;
  spec.tracks_per_cluster = 24;
  spec.words_per_cluster = 6;
  spec.shared_words = 2;
  spec.feature_dim = 8;
  spec.sigma = 0.05;
  spec.seed = 11;
  return spec;
}

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.width = 16;
  cfg.ff_mult = 2;
  cfg.patch_frames = 1;
  cfg.input_bins = 8;
  cfg.max_len = 32;
  return cfg;
}

TrainConfig tiny_train_config(ObjectiveKind kind) {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.steps = 4;
  cfg.seed = 5;
  cfg.model.objective.kind = kind;
  cfg.model.text_rep = TextMode::kStochastic;
  cfg.model.text_encoder = TextEncoderKind::kTransformer;
  cfg.model.audio = tiny_encoder();
  cfg.model.text = tiny_encoder();
  return cfg;
}

}  // namespace

TEST_CASE("adam update") {
  SUBCASE("zero gradient leaves parameters untouched") {
    Parameter p("p", Tensor2::full(2, 2, 1.5));
    AdamState state;
    adam_step({&p}, state, {1e-3});
    for (double v : p.value.data) CHECK(v == 1.5);
    CHECK(state.t == 1);
  }
  SUBCASE("unit gradient moves a scalar to about 0.999") {
    Parameter p("p", Tensor2::full(1, 1, 1.0));
    p.grad.data[0] = 1.0;
    AdamState state;
    adam_step({&p}, state, {1e-3});
    // bias correction makes m_hat = v_hat = 1 on the first step
    CHECK(std::abs(p.value.data[0] - (1.0 - 1e-3 / (1.0 + 1e-8))) <= 1e-15);
    CHECK(std::abs(p.value.data[0] - 0.999) <= 1e-9);
  }
  SUBCASE("non-finite gradient names the parameter and step") {
    Parameter p("rotten", Tensor2::full(1, 1, 1.0));
    p.grad.data[0] = std::nan("");
    AdamState state;
    CHECK_THROWS_WITH_AS(adam_step({&p}, state, {1e-3}), doctest::Contains("rotten"),
                         std::runtime_error);
  }
  SUBCASE("rate list must match parameters") {
    Parameter p("p", Tensor2::full(1, 1, 1.0));
    AdamState state;
    CHECK_THROWS_AS(adam_step({&p}, state, {1e-3, 1e-3}), std::invalid_argument);
  }
}

TEST_CASE("train config parsing") {
  const std::string path = (temp_dir() / "train.cfg").string();
  {
    std::ofstream out(path);
    out << "sample_rate=16000\nn_mels=128\nn_fft=1024\nhop_ms=10\n"
           "chunk_seconds=9.91\nbatch_size=8\nembed_dim=8\nmargin=0.4\n"
           "temperature=0.2\nlr_main=1e-3\nlr_text_transformer=5e-5\n"
           "steps=4\nseed=5\ndataset=ds.jsonl\ndepth=1\nheads=2\nwidth=16\nff_mult=2\n";
  }
  const TrainConfig cfg = parse_train_config(path);
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.steps == 4);
  CHECK(cfg.seed == 5);
  CHECK(cfg.lr_main == 1e-3);
  CHECK(cfg.lr_text_transformer == 5e-5);
  CHECK(cfg.dataset_path == "ds.jsonl");
  CHECK(cfg.model.audio.embed_dim == 8);
  CHECK(cfg.model.text.width == 16);
  CHECK(cfg.model.objective.margin == 0.4);
  CHECK(cfg.model.objective.temperature_init == 0.2);

  const std::string bad_key = (temp_dir() / "bad_key.cfg").string();
  {
    std::ofstream out(bad_key);
    out << "learning_rate=0.1\n";
  }
  CHECK_THROWS_WITH_AS((void)parse_train_config(bad_key), doctest::Contains("learning_rate"),
                       std::runtime_error);

  const std::string bad_rate = (temp_dir() / "bad_rate.cfg").string();
  {
    std::ofstream out(bad_rate);
    out << "sample_rate=44100\n";
  }
  CHECK_THROWS_WITH_AS((void)parse_train_config(bad_rate), doctest::Contains("44100"),
                       std::runtime_error);
}

TEST_CASE("training runs are deterministic") {
  const SyntheticDataset data = generate_synthetic(small_spec());
  TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
  const std::string ck1 = (temp_dir() / "det1.ckpt").string();
  const std::string ck2 = (temp_dir() / "det2.ckpt").string();
  const std::string csv1 = (temp_dir() / "det1.csv").string();
  const std::string csv2 = (temp_dir() / "det2.csv").string();

  cfg.checkpoint_path = ck1;
  cfg.loss_csv_path = csv1;
  const TrainResult r1 = train(cfg, data.records);
  cfg.checkpoint_path = ck2;
  cfg.loss_csv_path = csv2;
  const TrainResult r2 = train(cfg, data.records);

  CHECK(r1.loss_trace.size() == 4);
  REQUIRE(r1.loss_trace.size() == r2.loss_trace.size());
  CHECK(std::memcmp(r1.loss_trace.data(), r2.loss_trace.data(),
                    r1.loss_trace.size() * sizeof(double)) == 0);
  CHECK(slurp(ck1) == slurp(ck2));
  CHECK(slurp(csv1) == slurp(csv2));
  CHECK(!slurp(ck1).empty());

  const std::string csv = slurp(csv1);
  CHECK(csv.rfind("step,loss,tau\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  TrainConfig other = cfg;
  other.seed = 6;
  other.checkpoint_path.clear();
  other.loss_csv_path.clear();
  const TrainResult r3 = train(other, data.records);
  CHECK(r3.loss_trace != r1.loss_trace);
}

TEST_CASE("zero steps checkpoints the initialization") {
  const SyntheticDataset data = generate_synthetic(small_spec());
  TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
  cfg.steps = 0;
  const std::string path = (temp_dir() / "init.ckpt").string();
  cfg.checkpoint_path = path;
  (void)train(cfg, data.records);

  // Rebuild the same initialization by hand: vocabulary from the train split
  // in record order, then parameters from the seed.
  Vocabulary vocab;
  std::set<std::string> class_set;
  for (const TrackRecord& r : data.records) {
    if (r.split != Split::kTrain) continue;
    for (const std::string& tag : r.tags) {
      class_set.insert(tag);
      for (const std::string& word : tokenize(tag)) vocab.add(word);
    }
  }
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  mc.audio.input_bins = 8;
  mc.audio.patch_frames = 1;
  Rng rng(cfg.seed);
  Model expected(mc, vocab, std::vector<std::string>(class_set.begin(), class_set.end()),
                 WordVectorTable{}, rng);

  Model loaded = load_checkpoint(path);
  CHECK(loaded.vocab.tokens() == expected.vocab.tokens());
  const std::vector<Parameter*> lp = loaded.trainable();
  const std::vector<Parameter*> ep = expected.trainable();
  REQUIRE(lp.size() == ep.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    CAPTURE(lp[i]->name);
    REQUIRE(lp[i]->name == ep[i]->name);
    REQUIRE(lp[i]->value.data.size() == ep[i]->value.data.size());
    CHECK(std::memcmp(lp[i]->value.data.data(), ep[i]->value.data.data(),
                      lp[i]->value.data.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("checkpoint round trip") {
  const SyntheticDataset data = generate_synthetic(small_spec());
  TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
  const std::string p1 = (temp_dir() / "rt1.ckpt").string();
  cfg.checkpoint_path = p1;
  (void)train(cfg, data.records);

  Model loaded = load_checkpoint(p1);
  const std::string p2 = (temp_dir() / "rt2.ckpt").string();
  save_checkpoint(loaded, p2);
  CHECK(slurp(p1) == slurp(p2));

  CHECK(loaded.config.objective.kind == ObjectiveKind::kContrastive);
  CHECK(loaded.config.text_rep == TextMode::kStochastic);
  CHECK(loaded.config.audio.input_bins == 8);
  CHECK(loaded.config.audio.patch_frames == 1);
  CHECK(loaded.tau.value.data[0] > 0.0);

  const std::string garbage = (temp_dir() / "garbage.ckpt").string();
  {
    std::ofstream out(garbage, std::ios::binary);
    out << "{\"format\":\"something-else\"}\n";
  }
  CHECK_THROWS_WITH_AS((void)load_checkpoint(garbage), doctest::Contains("format"),
                       std::runtime_error);

  const std::string truncated = (temp_dir() / "trunc.ckpt").string();
  {
    const std::string full = slurp(p1);
    std::ofstream out(truncated, std::ios::binary);
    out.write(full.data(), static_cast<std::streamsize>(full.size() - 64));
  }
  CHECK_THROWS_WITH_AS((void)load_checkpoint(truncated), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("objective and encoder variants train") {
  const SyntheticDataset data = generate_synthetic(small_spec());
  const std::string wv_dir = (temp_dir() / "wv").string();
  write_synthetic_dataset(data, wv_dir);

  SUBCASE("triplet objective") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kTriplet);
    const TrainResult r = train(cfg, data.records);
    CHECK(r.loss_trace.size() == 4);
    for (double v : r.loss_trace) CHECK(std::isfinite(v));
    for (double v : r.tau_trace) CHECK(std::isnan(v));
  }
  SUBCASE("classification objective") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kClassification);
    const TrainResult r = train(cfg, data.records);
    CHECK(r.loss_trace.size() == 4);
    for (double v : r.loss_trace) CHECK(std::isfinite(v));
    TrainConfig again = cfg;
    const TrainResult r2 = train(again, data.records);
    CHECK(r.loss_trace == r2.loss_trace);
  }
  SUBCASE("bag-of-words text encoder") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    cfg.model.text_encoder = TextEncoderKind::kBow;
    cfg.model.text_rep = TextMode::kSentence;
    cfg.word_vectors_path = wv_dir + "/word_vectors.txt";
    const std::string ck = (temp_dir() / "bow.ckpt").string();
    cfg.checkpoint_path = ck;
    const TrainResult r = train(cfg, data.records);
    CHECK(r.loss_trace.size() == 4);
    Model loaded = load_checkpoint(ck);
    CHECK(loaded.word_table.dimension == 8);
    CHECK(loaded.word_table.vectors.size() == data.words.size());
    const std::string ck2 = (temp_dir() / "bow2.ckpt").string();
    save_checkpoint(loaded, ck2);
    CHECK(slurp(ck) == slurp(ck2));
  }
  SUBCASE("bag-of-words without a table is rejected") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    cfg.model.text_encoder = TextEncoderKind::kBow;
    CHECK_THROWS_WITH_AS((void)train(cfg, data.records), doctest::Contains("word_vectors"),
                         std::invalid_argument);
  }
}

TEST_CASE("tau stays clamped and positive") {
  const SyntheticDataset data = generate_synthetic(small_spec());
  TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
  cfg.steps = 12;
  cfg.lr_main = 0.5;  // aggressive rate drives tau toward the floor
  const TrainResult r = train(cfg, data.records);
  for (double tau : r.tau_trace) {
    CHECK(tau >= 1e-3);
    CHECK(std::isfinite(tau));
  }
}

TEST_CASE("training failure modes") {
  const SyntheticDataset data = generate_synthetic(small_spec());

  SUBCASE("batch larger than the train split") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    cfg.batch_size = 10000;
    CHECK_THROWS_WITH_AS((void)train(cfg, data.records), doctest::Contains("batch"),
                         std::invalid_argument);
  }
  SUBCASE("empty dataset") {
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    CHECK_THROWS_AS((void)train(cfg, {}), std::invalid_argument);
  }
  SUBCASE("non-finite feature aborts with the step number") {
    std::vector<TrackRecord> records = data.records;
    for (TrackRecord& r : records)
      if (r.split == Split::kTrain) {
        r.feature[0] = std::nan("");
        break;
      }
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    cfg.steps = 3;
    cfg.batch_size = static_cast<int>(std::count_if(
        records.begin(), records.end(),
        [](const TrackRecord& r) { return r.split == Split::kTrain; }));
    CHECK_THROWS_WITH_AS((void)train(cfg, records), doctest::Contains("step 1"),
                         std::runtime_error);
  }
  SUBCASE("mixed feature and audio records") {
    std::vector<TrackRecord> records = data.records;
    for (TrackRecord& r : records)
      if (r.split == Split::kTrain) {
        r.feature.clear();
        r.audio_path = "missing.wav";
        break;
      }
    TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
    CHECK_THROWS_WITH_AS((void)train(cfg, records), doctest::Contains("mixes"),
                         std::invalid_argument);
  }
}

TEST_CASE("loss trends downward on an easy contrastive problem") {
  SyntheticSpec spec = small_spec();
  spec.clusters = 4;
  spec.feature_dim = 12;
  const SyntheticDataset data = generate_synthetic(spec);
  TrainConfig cfg = tiny_train_config(ObjectiveKind::kContrastive);
  cfg.model.audio.input_bins = 12;
  cfg.batch_size = 16;
  cfg.steps = 60;
  const TrainResult r = train(cfg, data.records);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.loss_trace[static_cast<std::size_t>(i)];
    tail += r.loss_trace[r.loss_trace.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(tail < head);
}
