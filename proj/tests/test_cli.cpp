#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "xmusic/dataset.hpp"

using namespace xmusic;
namespace fs = std::filesystem;

namespace {

#ifndef XMUSIC_CLI_PATH
#error "XMUSIC_CLI_PATH must point at the xmusic binary"
#endif

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run(const std::string& args, bool merge_stderr = false) {
  const std::string cmd = std::string(XMUSIC_CLI_PATH) + " " + args +
                          (merge_stderr ? " 2>&1" : " 2>/dev/null");
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One generated dataset and trained checkpoint shared by the whole suite.
struct CliFixture {
  fs::path root;

  CliFixture() {
    char tmpl[] = "/tmp/xmusic_cli_XXXXXX";
    REQUIRE(mkdtemp(tmpl) != nullptr);
    root = tmpl;

    std::ofstream spec(root / "spec.txt");
    spec << "clusters = 4\ntracks_per_cluster = 24\nwords_per_cluster = 8\n"
            "shared_words = 3\nfeature_dim = 16\nsigma = 0.1\n";
    spec.close();
    REQUIRE(run("gen-synth --spec " + (root / "spec.txt").string() + " --out " +
                (root / "data").string() + " --seed 7")
                .exit_code == 0);

    std::ofstream cfg(root / "train.cfg");
    cfg << "dataset = " << (root / "data" / "dataset.jsonl").string() << "\n"
        << "word_vectors = " << (root / "data" / "word_vectors.txt").string() << "\n"
        << "batch_size = 16\nsteps = 120\nseed = 3\nembed_dim = 16\ndepth = 1\n"
           "heads = 2\nwidth = 32\nff_mult = 2\ntemperature = 0.2\n";
    cfg.close();
    REQUIRE(run("train --config " + (root / "train.cfg").string() +
                " --objective contrastive --text-rep stochastic --text-encoder transformer"
                " --out " + (root / "model.ckpt").string())
                .exit_code == 0);
    REQUIRE(run("embed --ckpt " + (root / "model.ckpt").string() + " --dataset " +
                (root / "data" / "dataset.jsonl").string() + " --modality audio --out " +
                (root / "all.store").string())
                .exit_code == 0);
  }

  ~CliFixture() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }

  std::string p(const std::string& rel) const { return (root / rel).string(); }
};

CliFixture& fixture() {
  static CliFixture f;
  return f;
}

}  // namespace

TEST_CASE("gen-synth writes a stratified dataset deterministically") {
  CliFixture& f = fixture();
  for (const char* name :
       {"dataset.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl", "pairs_test.jsonl",
        "word_vectors.txt"})
    CHECK(fs::exists(f.root / "data" / name));

  const auto rerun = run("gen-synth --spec " + f.p("spec.txt") + " --out " + f.p("data2") +
                         " --seed 7");
  REQUIRE(rerun.exit_code == 0);
  CHECK(slurp(f.root / "data" / "dataset.jsonl") == slurp(f.root / "data2" / "dataset.jsonl"));
  CHECK(slurp(f.root / "data" / "pairs_test.jsonl") ==
        slurp(f.root / "data2" / "pairs_test.jsonl"));

  const auto other_seed = run("gen-synth --spec " + f.p("spec.txt") + " --out " + f.p("data3") +
                              " --seed 8");
  REQUIRE(other_seed.exit_code == 0);
  CHECK(slurp(f.root / "data" / "dataset.jsonl") != slurp(f.root / "data3" / "dataset.jsonl"));

  CHECK(run("gen-synth --spec " + f.p("spec.txt") + " --out " + f.p("dx")).exit_code != 0);
}

TEST_CASE("train emits a checkpoint, a loss csv, and is seed-deterministic") {
  CliFixture& f = fixture();
  CHECK(fs::exists(f.root / "model.ckpt"));
  CHECK(fs::exists(f.root / "model.ckpt.loss.csv"));

  const auto again = run("train --config " + f.p("train.cfg") +
                         " --objective contrastive --text-rep stochastic"
                         " --text-encoder transformer --out " + f.p("model2.ckpt"));
  REQUIRE(again.exit_code == 0);
  CHECK(slurp(f.root / "model.ckpt") == slurp(f.root / "model2.ckpt"));
  CHECK(slurp(f.root / "model.ckpt.loss.csv") == slurp(f.root / "model2.ckpt.loss.csv"));

  const auto j = nlohmann::json::parse(again.output);
  CHECK(j.at("steps").get<int>() == 120);
  CHECK(j.at("train_records").get<int>() == 60);

  CHECK(run("train --config " + f.p("missing.cfg") +
            " --objective contrastive --text-rep stochastic --text-encoder transformer"
            " --out " + f.p("x.ckpt"))
            .exit_code != 0);
  CHECK(run("train --config " + f.p("train.cfg") +
            " --objective nonsense --text-rep stochastic --text-encoder transformer --out " +
            f.p("x.ckpt"))
            .exit_code != 0);
}

TEST_CASE("embed writes valid stores for both modalities") {
  CliFixture& f = fixture();
  const auto audio = run("embed --ckpt " + f.p("model.ckpt") + " --dataset " +
                         f.p("data/test.jsonl") + " --modality audio --out " +
                         f.p("audio.store"));
  REQUIRE(audio.exit_code == 0);
  const auto ja = nlohmann::json::parse(audio.output);
  CHECK(ja.at("items").get<int>() == 16);
  CHECK(ja.at("dim").get<int>() == 16);

  const EmbeddingStore on_disk = store_read(f.p("audio.store"));
  CHECK(on_disk.count() == 16);
  CHECK(on_disk.dim() == 16);

  // Text from the pairs file: ids are query ids.
  const auto text = run("embed --ckpt " + f.p("model.ckpt") + " --dataset " +
                        f.p("data/pairs_test.jsonl") + " --modality text --out " +
                        f.p("text.store"));
  REQUIRE(text.exit_code == 0);
  const EmbeddingStore queries = store_read(f.p("text.store"));
  CHECK(queries.count() == 16);
  CHECK(queries.ids.front().rfind("track_", 0) == 0);  // pairs query ids are track ids

  // Text from a track dataset: ids are track ids, captions embedded.
  REQUIRE(run("embed --ckpt " + f.p("model.ckpt") + " --dataset " + f.p("data/test.jsonl") +
              " --modality text --out " + f.p("cap.store"))
              .exit_code == 0);
  const EmbeddingStore captions = store_read(f.p("cap.store"));
  CHECK(captions.ids == on_disk.ids);

  // Same command twice: byte-identical store.
  REQUIRE(run("embed --ckpt " + f.p("model.ckpt") + " --dataset " + f.p("data/test.jsonl") +
              " --modality audio --out " + f.p("audio2.store"))
              .exit_code == 0);
  CHECK(slurp(f.root / "audio.store") == slurp(f.root / "audio2.store"));

  CHECK(run("embed --ckpt " + f.p("model.ckpt") + " --dataset " + f.p("data/test.jsonl") +
            " --modality video --out " + f.p("bad.store"))
            .exit_code != 0);
}

TEST_CASE("eval-sentence reports retrieval metrics and is reproducible") {
  CliFixture& f = fixture();
  const std::string cmd = "eval-sentence --text-store " + f.p("text.store") +
                          " --audio-store " + f.p("audio.store") + " --pairs " +
                          f.p("data/pairs_test.jsonl");
  const auto r = run(cmd);
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.output);
  for (const char* key : {"r_at_1", "r_at_5", "r_at_10", "map10", "medr"}) {
    REQUIRE(j.at(key).is_number());
    if (std::string(key) != "medr") {
      CHECK(j.at(key).get<double>() >= 0.0);
      CHECK(j.at(key).get<double>() <= 1.0);
    }
  }
  CHECK(j.at("roc_auc_macro").is_null());
  CHECK(j.at("metadata").at("store_checksum").get<std::string>().find('+') !=
        std::string::npos);

  REQUIRE(run(cmd + " --out " + f.p("sent1.json")).exit_code == 0);
  REQUIRE(run(cmd + " --out " + f.p("sent2.json")).exit_code == 0);
  CHECK(slurp(f.root / "sent1.json") == slurp(f.root / "sent2.json"));
  CHECK(slurp(f.root / "sent1.json") == r.output);

  CHECK(run("eval-sentence --text-store " + f.p("text.store") + " --audio-store " +
            f.p("audio.store") + " --pairs " + f.p("data/test.jsonl"), true)
            .exit_code != 0);
}

TEST_CASE("eval-tags scores tags from a checkpoint") {
  CliFixture& f = fixture();
  const auto r = run("eval-tags --audio-store " + f.p("all.store") + " --dataset " +
                     f.p("data/dataset.jsonl") + " --ckpt " + f.p("model.ckpt"));
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.output);
  REQUIRE(j.at("roc_auc_macro").is_number());
  CHECK(j.at("roc_auc_macro").get<double>() > 0.5);  // trained model beats chance
  CHECK(j.at("map10").is_null());
  CHECK(j.at("per_tag").at("roc").size() >= 1);
  CHECK(j.at("metadata").at("seed").get<int>() == 3);

  // --zeroshot is idempotent for metric-trained models.
  const auto zs = run("eval-tags --audio-store " + f.p("all.store") + " --dataset " +
                      f.p("data/dataset.jsonl") + " --ckpt " + f.p("model.ckpt") +
                      " --zeroshot");
  REQUIRE(zs.exit_code == 0);
  CHECK(zs.output == r.output);

  const auto no_ckpt = run("eval-tags --audio-store " + f.p("all.store") + " --dataset " +
                           f.p("data/dataset.jsonl"), true);
  CHECK(no_ckpt.exit_code != 0);
  CHECK(no_ckpt.output.find("--ckpt") != std::string::npos);
}

TEST_CASE("classification checkpoints score with centroids and refuse --zeroshot") {
  CliFixture& f = fixture();
  REQUIRE(run("train --config " + f.p("train.cfg") +
              " --objective classification --text-rep tag --text-encoder transformer --out " +
              f.p("cls.ckpt"))
              .exit_code == 0);
  const auto r = run("eval-tags --audio-store " + f.p("all.store") + " --dataset " +
                     f.p("data/dataset.jsonl") + " --ckpt " + f.p("cls.ckpt"));
  REQUIRE(r.exit_code == 0);
  CHECK(nlohmann::json::parse(r.output).at("roc_auc_macro").is_number());

  const auto zs = run("eval-tags --audio-store " + f.p("all.store") + " --dataset " +
                      f.p("data/dataset.jsonl") + " --ckpt " + f.p("cls.ckpt") + " --zeroshot",
                      true);
  CHECK(zs.exit_code != 0);
  CHECK(zs.output.find("text encoder") != std::string::npos);
}

TEST_CASE("probe runs shallow classifiers over a full-split store") {
  CliFixture& f = fixture();
  const auto r = run("probe --store " + f.p("all.store") + " --dataset " +
                     f.p("data/dataset.jsonl") + " --classifier linear");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.output);
  REQUIRE(j.at("roc_auc_macro").is_number());
  CHECK(j.at("roc_auc_macro").get<double>() > 0.5);
  CHECK(j.at("accuracy").is_null());  // tag probing is multi-label
  CHECK(j.at("classifier").get<std::string>() == "linear");

  CHECK(run("probe --store " + f.p("all.store") + " --dataset " + f.p("data/dataset.jsonl") +
            " --classifier forest")
            .exit_code != 0);
  // A single-split store cannot be probed.
  CHECK(run("probe --store " + f.p("audio.store") + " --dataset " + f.p("data/dataset.jsonl") +
            " --classifier linear")
            .exit_code != 0);
}

TEST_CASE("query returns descending top-k matches") {
  CliFixture& f = fixture();
  const auto r = run("query --ckpt " + f.p("model.ckpt") + " --audio-store " +
                     f.p("audio.store") + " --text \"w0_1 w0_3\" --topk 5");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.output);
  REQUIRE(j.at("results").size() == 5);
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& row : j.at("results")) {
    const double score = row.at("score").get<double>();
    CHECK(score <= prev);
    prev = score;
  }
  CHECK(run("query --ckpt " + f.p("model.ckpt") + " --audio-store " + f.p("audio.store") +
            " --text \"w0_1\" --topk 0")
            .exit_code != 0);
}

TEST_CASE("bad invocations fail without touching the filesystem") {
  CHECK(run("").exit_code != 0);
  CHECK(run("frobnicate --x 1").exit_code != 0);
  CHECK(run("gen-synth --out /tmp/nowhere").exit_code != 0);  // missing required flags
}
