#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmusic/dataset.hpp"
#include "xmusic/evaluation.hpp"
#include "xmusic/model.hpp"
#include "xmusic/tape.hpp"
#include "xmusic/text.hpp"
#include "xmusic/trainer.hpp"

namespace {

using namespace xmusic;
using ordered_json = nlohmann::ordered_json;

constexpr double kEvalChunkSeconds = 9.91;  // fixed eval-time audio window
constexpr int kEmbedBatch = 64;

void emit_report(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file " + out_path);
  out << text;
}

std::string record_text(const TrackRecord& record) {
  if (!record.caption.empty()) return record.caption;
  std::string joined;
  for (const std::string& tag : record.tags) {
    if (!joined.empty()) joined += ' ';
    joined += tag;
  }
  return joined;
}

struct TextItem {
  std::string id;
  std::string text;
};

// embed --modality text accepts either a track dataset (caption or joined
// tags per record) or a retrieval pairs file (query_id + text per line).
std::vector<TextItem> load_text_items(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file " + path);
  std::string first_line;
  while (std::getline(in, first_line)) {
    if (!first_line.empty()) break;
  }
  const auto first = nlohmann::json::parse(first_line, nullptr, false);
  const bool pairs_format = first.is_object() && first.contains("query_id");
  std::vector<TextItem> items;
  if (!pairs_format) {
    for (const TrackRecord& r : load_dataset(path)) items.push_back({r.id, record_text(r)});
    return items;
  }
  in.clear();
  in.seekg(0);
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() || !row.contains("query_id") ||
        !row.contains("text"))
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": expected an object with query_id and text");
    TextItem item{row.at("query_id").get<std::string>(), row.at("text").get<std::string>()};
    if (!seen.insert(item.id).second)
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": duplicate query_id " + item.id);
    items.push_back(std::move(item));
  }
  return items;
}

EmbeddingStore embed_audio(Model& model, const std::vector<TrackRecord>& records) {
  EmbeddingStore store;
  store.vectors = Tensor2(static_cast<int>(records.size()), model.config.audio.embed_dim);
  Rng rng(model.config.seed);  // fixes the audio chunk offsets for wav inputs
  for (std::size_t begin = 0; begin < records.size(); begin += kEmbedBatch) {
    const std::size_t end = std::min(records.size(), begin + kEmbedBatch);
    std::vector<Tensor2> frames;
    frames.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
      frames.push_back(audio_frame_for(records[i], kEvalChunkSeconds, rng));
    std::vector<const Tensor2*> ptrs;
    for (const Tensor2& f : frames) ptrs.push_back(&f);
    Tape t;
    const Tensor2 z = t.value(model.audio.forward(t, ptrs));
    for (std::size_t i = begin; i < end; ++i)
      for (int k = 0; k < z.cols; ++k)
        store.vectors.at(static_cast<int>(i), k) = z.at(static_cast<int>(i - begin), k);
  }
  for (const TrackRecord& r : records) store.ids.push_back(r.id);
  return store;
}

EmbeddingStore embed_text(Model& model, const std::vector<TextItem>& items) {
  EmbeddingStore store;
  store.vectors = Tensor2(static_cast<int>(items.size()), model.config.text.embed_dim);
  for (std::size_t begin = 0; begin < items.size(); begin += kEmbedBatch) {
    const std::size_t end = std::min(items.size(), begin + kEmbedBatch);
    std::vector<TextInput> batch;
    for (std::size_t i = begin; i < end; ++i)
      batch.push_back(plain_text_input(model.vocab, items[i].text,
                                       model.config.text.max_len));
    Tape t;
    const Tensor2 z = t.value(model.encode_text(t, batch));
    for (std::size_t i = begin; i < end; ++i)
      for (int k = 0; k < z.cols; ++k)
        store.vectors.at(static_cast<int>(i), k) = z.at(static_cast<int>(i - begin), k);
  }
  for (const TextItem& item : items) store.ids.push_back(item.id);
  return store;
}

// Rows of the store joined with their records; every stored id must exist.
std::vector<const TrackRecord*> records_for_store(
    const EmbeddingStore& store, const std::vector<TrackRecord>& records,
    const std::string& dataset_path) {
  std::map<std::string, const TrackRecord*> by_id;
  for (const TrackRecord& r : records) by_id.emplace(r.id, &r);
  std::vector<const TrackRecord*> out;
  for (const std::string& id : store.ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::runtime_error("store item " + id + " is not in dataset " + dataset_path);
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::string> sorted_tag_universe(const std::vector<const TrackRecord*>& records) {
  std::set<std::string> tags;
  for (const TrackRecord* r : records) tags.insert(r->tags.begin(), r->tags.end());
  return {tags.begin(), tags.end()};
}

int run_gen_synth(const std::string& spec_path, const std::string& out_dir,
                  unsigned long long seed) {
  SyntheticSpec spec = parse_synthetic_spec(spec_path);
  spec.seed = seed;
  const SyntheticDataset data = generate_synthetic(spec);
  write_synthetic_dataset(data, out_dir);
  ordered_json j;
  j["out"] = out_dir;
  j["tracks"] = data.records.size();
  j["clusters"] = spec.clusters;
  j["words"] = data.words.size();
  j["seed"] = seed;
  std::fputs((j.dump(2) + "\n").c_str(), stdout);
  return 0;
}

int run_train(const std::string& config_path, const std::string& objective,
              const std::string& text_rep, const std::string& text_encoder,
              const std::string& out_path) {
  TrainConfig cfg = parse_train_config(config_path);
  cfg.model.objective.kind = objective_kind_from_string(objective);
  cfg.model.text_rep = text_mode_from_string(text_rep);
  cfg.model.text_encoder = text_encoder_from_string(text_encoder);
  cfg.checkpoint_path = out_path;
  if (cfg.loss_csv_path.empty()) cfg.loss_csv_path = out_path + ".loss.csv";
  if (cfg.dataset_path.empty())
    throw std::runtime_error("config " + config_path + " does not set dataset");
  const std::vector<TrackRecord> records = load_dataset(cfg.dataset_path);
  std::vector<TrackRecord> train_split;
  for (const TrackRecord& r : records)
    if (r.split == Split::kTrain) train_split.push_back(r);
  const TrainResult result = train(cfg, train_split);
  ordered_json j;
  j["checkpoint"] = out_path;
  j["loss_csv"] = cfg.loss_csv_path;
  j["steps"] = result.loss_trace.size();
  j["final_loss"] = result.loss_trace.empty() ? nullptr
                                              : ordered_json(result.loss_trace.back());
  j["train_records"] = train_split.size();
  std::fputs((j.dump(2) + "\n").c_str(), stdout);
  return 0;
}

int run_embed(const std::string& ckpt, const std::string& dataset, const std::string& modality,
              const std::string& out_path) {
  Model model = load_checkpoint(ckpt);
  EmbeddingStore store;
  if (modality == "audio") {
    store = embed_audio(model, load_dataset(dataset));
  } else if (modality == "text") {
    store = embed_text(model, load_text_items(dataset));
  } else {
    throw std::invalid_argument("unknown modality '" + modality + "', expected audio or text");
  }
  store_write(store, out_path);
  ordered_json j;
  j["out"] = out_path;
  j["items"] = store.count();
  j["dim"] = store.dim();
  j["checksum"] = file_checksum(out_path);
  std::fputs((j.dump(2) + "\n").c_str(), stdout);
  return 0;
}

int run_eval_tags(const std::string& store_path, const std::string& dataset_path, bool zeroshot,
                  const std::string& ckpt, const std::string& out_path) {
  if (ckpt.empty())
    throw std::runtime_error("eval-tags needs --ckpt to score tags against the audio store");
  const EmbeddingStore store = store_read(store_path);
  if (store.count() == 0) throw std::runtime_error("audio store " + store_path + " is empty");
  const std::vector<TrackRecord> records = load_dataset(dataset_path);
  const std::vector<const TrackRecord*> items = records_for_store(store, records, dataset_path);
  const std::vector<std::string> universe = sorted_tag_universe(items);

  Model model = load_checkpoint(ckpt);
  if (model.config.audio.embed_dim != store.dim())
    throw std::runtime_error("store dimension " + std::to_string(store.dim()) +
                             " does not match checkpoint embedding dimension " +
                             std::to_string(model.config.audio.embed_dim));
  const bool classification = model.config.objective.kind == ObjectiveKind::kClassification;
  if (classification && zeroshot)
    throw std::invalid_argument(
        "--zeroshot needs a trained text encoder; the classification objective has none");

  std::vector<std::string> scored_tags;
  std::vector<std::string> unscorable;
  MetricReport report;
  if (classification) {
    // Trained class centroids score their own classes; other tags are unseen.
    std::map<std::string, int> class_index;
    for (std::size_t c = 0; c < model.classes.size(); ++c)
      class_index.emplace(model.classes[c], static_cast<int>(c));
    for (const std::string& tag : universe) {
      if (class_index.count(tag)) scored_tags.push_back(tag);
      else unscorable.push_back(tag);
    }
    if (scored_tags.empty())
      throw std::runtime_error("no dataset tag matches a checkpoint class");
    Tensor2 scores(store.count(), static_cast<int>(scored_tags.size()));
    for (int i = 0; i < store.count(); ++i)
      for (std::size_t tc = 0; tc < scored_tags.size(); ++tc) {
        const int c = class_index.at(scored_tags[tc]);
        double dot = 0.0;
        for (int k = 0; k < store.dim(); ++k)
          dot += store.vectors.at(i, k) * model.centroids.value.at(c, k);
        scores.at(i, static_cast<int>(tc)) = 1.0 / (1.0 + std::exp(-dot));
      }
    Tensor2 labels(store.count(), static_cast<int>(scored_tags.size()));
    for (int i = 0; i < store.count(); ++i)
      for (std::size_t tc = 0; tc < scored_tags.size(); ++tc)
        labels.at(i, static_cast<int>(tc)) =
            std::count(items[static_cast<std::size_t>(i)]->tags.begin(),
                       items[static_cast<std::size_t>(i)]->tags.end(), scored_tags[tc])
                ? 1.0
                : 0.0;
    report = evaluate_tags(scores, labels, scored_tags);
  } else {
    // Metric-trained models score every tag by embedding its text.
    scored_tags = universe;
    std::vector<TextItem> tag_texts;
    for (const std::string& tag : universe) tag_texts.push_back({tag, tag});
    const EmbeddingStore tag_vectors = embed_text(model, tag_texts);
    const Tensor2 scores = zero_shot_scores(store.vectors, tag_vectors.vectors);
    Tensor2 labels(store.count(), static_cast<int>(universe.size()));
    for (int i = 0; i < store.count(); ++i)
      for (std::size_t tc = 0; tc < universe.size(); ++tc)
        labels.at(i, static_cast<int>(tc)) =
            std::count(items[static_cast<std::size_t>(i)]->tags.begin(),
                       items[static_cast<std::size_t>(i)]->tags.end(), universe[tc])
                ? 1.0
                : 0.0;
    report = evaluate_tags(scores, labels, universe);
  }
  report.skipped_tags.insert(report.skipped_tags.end(), unscorable.begin(), unscorable.end());
  std::sort(report.skipped_tags.begin(), report.skipped_tags.end());
  report.seed = model.config.seed;
  report.store_checksum = file_checksum(store_path);
  emit_report(to_json(report), out_path);
  return 0;
}

int run_eval_sentence(const std::string& text_store_path, const std::string& audio_store_path,
                      const std::string& pairs_path, const std::string& out_path) {
  const EmbeddingStore queries = store_read(text_store_path);
  const EmbeddingStore corpus = store_read(audio_store_path);
  std::ifstream in(pairs_path);
  if (!in) throw std::runtime_error("cannot open pairs file " + pairs_path);
  std::map<std::string, std::string> ground_truth;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() || !row.contains("query_id") ||
        !row.contains("item_id"))
      throw std::runtime_error(pairs_path + " line " + std::to_string(line_no) +
                               ": expected an object with query_id and item_id");
    const auto [it, inserted] = ground_truth.emplace(row.at("query_id").get<std::string>(),
                                                     row.at("item_id").get<std::string>());
    if (!inserted)
      throw std::runtime_error(pairs_path + " line " + std::to_string(line_no) +
                               ": duplicate query_id " + it->first);
  }
  MetricReport report = sentence_retrieval(queries, corpus, ground_truth);
  report.store_checksum =
      file_checksum(text_store_path) + "+" + file_checksum(audio_store_path);
  emit_report(to_json(report), out_path);
  return 0;
}

int run_probe(const std::string& store_path, const std::string& dataset_path,
              const std::string& classifier, const std::string& out_path) {
  const EmbeddingStore store = store_read(store_path);
  if (store.count() == 0) throw std::runtime_error("store " + store_path + " is empty");
  const std::vector<TrackRecord> records = load_dataset(dataset_path);
  const std::vector<const TrackRecord*> items = records_for_store(store, records, dataset_path);
  const std::vector<std::string> universe = sorted_tag_universe(items);

  ProbeData data;
  data.features = store.vectors;
  data.labels = Tensor2(store.count(), static_cast<int>(universe.size()));
  for (int i = 0; i < store.count(); ++i)
    for (std::size_t tc = 0; tc < universe.size(); ++tc)
      data.labels.at(i, static_cast<int>(tc)) =
          std::count(items[static_cast<std::size_t>(i)]->tags.begin(),
                     items[static_cast<std::size_t>(i)]->tags.end(), universe[tc])
              ? 1.0
              : 0.0;
  for (const TrackRecord* r : items) data.splits.push_back(r->split);
  data.class_names = universe;
  data.single_label = false;
  const ProbeResult result = probe(data, probe_kind_from_string(classifier), 0);

  ordered_json j;
  auto put = [&](const char* key, double v) {
    if (std::isnan(v)) j[key] = nullptr; else j[key] = v;
  };
  put("accuracy", result.accuracy);
  put("f1_macro", result.f1_macro);
  put("roc_auc_macro", result.roc_auc_macro);
  put("pr_auc_macro", result.pr_auc_macro);
  put("validation_metric", result.validation_metric);
  j["classifier"] = classifier;
  j["store_checksum"] = file_checksum(store_path);
  emit_report(j.dump(2) + "\n", out_path);
  return 0;
}

int run_query(const std::string& ckpt, const std::string& store_path, const std::string& text,
              int topk, const std::string& out_path) {
  if (topk < 1) throw std::invalid_argument("--topk must be at least 1");
  Model model = load_checkpoint(ckpt);
  const EmbeddingStore store = store_read(store_path);
  if (model.config.text.embed_dim != store.dim())
    throw std::runtime_error("store dimension " + std::to_string(store.dim()) +
                             " does not match checkpoint embedding dimension " +
                             std::to_string(model.config.text.embed_dim));
  const EmbeddingStore query_vec = embed_text(model, {{"query", text}});
  std::vector<std::pair<std::string, double>> scored;
  for (int i = 0; i < store.count(); ++i) {
    double dot = 0.0;
    for (int k = 0; k < store.dim(); ++k)
      dot += query_vec.vectors.at(0, k) * store.vectors.at(i, k);
    scored.emplace_back(store.ids[static_cast<std::size_t>(i)], dot);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const int k = std::min<int>(topk, static_cast<int>(scored.size()));
  ordered_json j;
  j["query"] = text;
  j["topk"] = topk;
  j["results"] = ordered_json::array();
  for (int i = 0; i < k; ++i) {
    ordered_json row;
    row["id"] = scored[static_cast<std::size_t>(i)].first;
    row["score"] = scored[static_cast<std::size_t>(i)].second;
    j["results"].push_back(row);
  }
  emit_report(j.dump(2) + "\n", out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-to-music retrieval toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  unsigned long long seed = 0;
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "synthetic spec key=value file")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "generation seed")->required();

  std::string config_path, objective = "contrastive", text_rep = "stochastic",
              text_encoder = "transformer", train_out;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "training config key=value file")->required();
  tr->add_option("--objective", objective, "classification|triplet|contrastive");
  tr->add_option("--text-rep", text_rep, "tag|sentence|stochastic");
  tr->add_option("--text-encoder", text_encoder, "bow|transformer");
  tr->add_option("--out", train_out, "checkpoint output path")->required();

  std::string ckpt, dataset, modality, store_out;
  auto* em = app.add_subcommand("embed", "embed a dataset into a store");
  em->add_option("--ckpt", ckpt, "model checkpoint")->required();
  em->add_option("--dataset", dataset, "dataset jsonl (or pairs jsonl for text)")->required();
  em->add_option("--modality", modality, "audio|text")->required();
  em->add_option("--out", store_out, "embedding store output path")->required();

  std::string et_store, et_dataset, et_ckpt, et_out;
  bool et_zeroshot = false;
  auto* et = app.add_subcommand("eval-tags", "tag-level retrieval metrics");
  et->add_option("--audio-store", et_store, "audio embedding store")->required();
  et->add_option("--dataset", et_dataset, "dataset jsonl with tag labels")->required();
  et->add_flag("--zeroshot", et_zeroshot, "force cosine scoring against tag text embeddings");
  et->add_option("--ckpt", et_ckpt, "model checkpoint used for scoring");
  et->add_option("--out", et_out, "write the JSON report here instead of stdout");

  std::string es_text, es_audio, es_pairs, es_out;
  auto* es = app.add_subcommand("eval-sentence", "sentence-level retrieval metrics");
  es->add_option("--text-store", es_text, "query text embedding store")->required();
  es->add_option("--audio-store", es_audio, "corpus audio embedding store")->required();
  es->add_option("--pairs", es_pairs, "jsonl of query_id/item_id ground truth")->required();
  es->add_option("--out", es_out, "write the JSON report here instead of stdout");

  std::string pr_store, pr_dataset, pr_classifier, pr_out;
  auto* pr = app.add_subcommand("probe", "shallow classifier on frozen embeddings");
  pr->add_option("--store", pr_store, "embedding store with features")->required();
  pr->add_option("--dataset", pr_dataset, "dataset jsonl with labels and splits")->required();
  pr->add_option("--classifier", pr_classifier, "linear|mlp")->required();
  pr->add_option("--out", pr_out, "write the JSON report here instead of stdout");

  std::string q_ckpt, q_store, q_text, q_out;
  int q_topk = 10;
  auto* qu = app.add_subcommand("query", "free-text search against an audio store");
  qu->add_option("--ckpt", q_ckpt, "model checkpoint")->required();
  qu->add_option("--audio-store", q_store, "audio embedding store")->required();
  qu->add_option("--text", q_text, "query text")->required();
  qu->add_option("--topk", q_topk, "number of results")->required();
  qu->add_option("--out", q_out, "write the JSON result here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_synth(spec_path, out_dir, seed);
    if (tr->parsed()) return run_train(config_path, objective, text_rep, text_encoder, train_out);
    if (em->parsed()) return run_embed(ckpt, dataset, modality, store_out);
    if (et->parsed()) return run_eval_tags(et_store, et_dataset, et_zeroshot, et_ckpt, et_out);
    if (es->parsed()) return run_eval_sentence(es_text, es_audio, es_pairs, es_out);
    if (pr->parsed()) return run_probe(pr_store, pr_dataset, pr_classifier, pr_out);
    if (qu->parsed()) return run_query(q_ckpt, q_store, q_text, q_topk, q_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "xmusic: %s\n", e.what());
    return 1;
  }
  return 1;
}
