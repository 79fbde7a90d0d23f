#include "xmusic/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xmusic {

namespace {

Tensor2 normal_init(Rng& rng, int rows, int cols, double stddev) {
  Tensor2 t(rows, cols);
  for (double& v : t.data) v = rng.normal() * stddev;
  return t;
}

Tensor2 fan_in_init(Rng& rng, int rows, int cols) {
  return normal_init(rng, rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)));
}

TransformerLayer make_layer(const std::string& prefix, int width, int ff, Rng& rng) {
  TransformerLayer l;
  l.ln1_g = Parameter{prefix + ".ln1.g", Tensor2::full(1, width, 1.0)};
  l.ln1_b = Parameter{prefix + ".ln1.b", Tensor2::zeros(1, width)};
  l.qkv_w = Parameter{prefix + ".qkv.w", fan_in_init(rng, width, 3 * width)};
  l.qkv_b = Parameter{prefix + ".qkv.b", Tensor2::zeros(1, 3 * width)};
  l.out_w = Parameter{prefix + ".out.w", fan_in_init(rng, width, width)};
  l.out_b = Parameter{prefix + ".out.b", Tensor2::zeros(1, width)};
  l.ln2_g = Parameter{prefix + ".ln2.g", Tensor2::full(1, width, 1.0)};
  l.ln2_b = Parameter{prefix + ".ln2.b", Tensor2::zeros(1, width)};
  l.ff1_w = Parameter{prefix + ".ff1.w", fan_in_init(rng, width, ff)};
  l.ff1_b = Parameter{prefix + ".ff1.b", Tensor2::zeros(1, ff)};
  l.ff2_w = Parameter{prefix + ".ff2.w", fan_in_init(rng, ff, width)};
  l.ff2_b = Parameter{prefix + ".ff2.b", Tensor2::zeros(1, width)};
  return l;
}

void append_layer_params(std::vector<Parameter*>& out, TransformerLayer& l) {
  out.push_back(&l.ln1_g);
  out.push_back(&l.ln1_b);
  out.push_back(&l.qkv_w);
  out.push_back(&l.qkv_b);
  out.push_back(&l.out_w);
  out.push_back(&l.out_b);
  out.push_back(&l.ln2_g);
  out.push_back(&l.ln2_b);
  out.push_back(&l.ff1_w);
  out.push_back(&l.ff1_b);
  out.push_back(&l.ff2_w);
  out.push_back(&l.ff2_b);
}

}  // namespace

void EncoderConfig::validate() const {
  if (embed_dim <= 0) throw std::invalid_argument("EncoderConfig: embed_dim must be positive");
  if (depth <= 0) throw std::invalid_argument("EncoderConfig: depth must be positive");
  if (width <= 0 || heads <= 0 || width % heads != 0) {
    throw std::invalid_argument("EncoderConfig: heads must divide width");
  }
  if (ff_mult <= 0) throw std::invalid_argument("EncoderConfig: ff_mult must be positive");
  if (patch_frames <= 0 || input_bins <= 0) {
    throw std::invalid_argument("EncoderConfig: patch shape must be positive");
  }
  if (max_len <= 0) throw std::invalid_argument("EncoderConfig: max_len must be positive");
}

Tensor2 sinusoid_positions(int rows, int width) {
  Tensor2 pos(rows, width);
  for (int i = 0; i < rows; ++i) {
    for (int k = 0; k < width; ++k) {
      const double rate = std::pow(10000.0, -static_cast<double>(k - (k % 2)) / width);
      pos.at(i, k) = (k % 2 == 0) ? std::sin(i * rate) : std::cos(i * rate);
    }
  }
  return pos;
}

Var transformer_stack(Tape& t, Var x, const std::vector<int>& seq_lengths,
                      std::vector<TransformerLayer>& layers, int heads) {
  for (TransformerLayer& l : layers) {
    Var normed = layer_norm_rows(x, t.param(l.ln1_g), t.param(l.ln1_b));
    Var qkv = add_row_broadcast(matmul(normed, t.param(l.qkv_w)), t.param(l.qkv_b));
    Var attended = segmented_attention(qkv, seq_lengths, heads);
    Var attn_out =
        add_row_broadcast(matmul(attended, t.param(l.out_w)), t.param(l.out_b));
    x = add(x, attn_out);

    Var normed2 = layer_norm_rows(x, t.param(l.ln2_g), t.param(l.ln2_b));
    Var hidden =
        gelu(add_row_broadcast(matmul(normed2, t.param(l.ff1_w)), t.param(l.ff1_b)));
    Var ff_out =
        add_row_broadcast(matmul(hidden, t.param(l.ff2_w)), t.param(l.ff2_b));
    x = add(x, ff_out);
  }
  return x;
}

AudioEncoder::AudioEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int in_dim = cfg_.patch_frames * cfg_.input_bins;
  const int w = cfg_.width;
  patch_w_ = Parameter{"audio.patch.w", fan_in_init(rng, in_dim, w)};
  patch_b_ = Parameter{"audio.patch.b", Tensor2::zeros(1, w)};
  cls_ = Parameter{"audio.cls", normal_init(rng, 1, w, 0.02)};
  layers_.reserve(static_cast<std::size_t>(cfg_.depth));
  for (int i = 0; i < cfg_.depth; ++i) {
    layers_.push_back(make_layer("audio.layer" + std::to_string(i), w,
                                 cfg_.ff_mult * w, rng));
  }
  proj_w_ = Parameter{"audio.proj.w", fan_in_init(rng, w, cfg_.embed_dim)};
  proj_b_ = Parameter{"audio.proj.b", Tensor2::zeros(1, cfg_.embed_dim)};
}

Var AudioEncoder::forward(Tape& t, const std::vector<const Tensor2*>& mels) {
  if (mels.empty()) throw std::invalid_argument("AudioEncoder: empty batch");
  const int P = cfg_.patch_frames;
  const int B = cfg_.input_bins;
  const int in_dim = P * B;

  // Flatten every clip into patch rows (constant inputs), remember lengths.
  int total_patches = 0;
  std::vector<int> n_patches(mels.size());
  for (std::size_t i = 0; i < mels.size(); ++i) {
    const Tensor2& mel = *mels[i];
    if (mel.cols != B) {
      throw std::invalid_argument("AudioEncoder: expected " + std::to_string(B) +
                                  " mel bins, got " + std::to_string(mel.cols));
    }
    if (mel.rows < P) {
      throw std::invalid_argument("AudioEncoder: clip has " + std::to_string(mel.rows) +
                                  " frames, fewer than one patch of " +
                                  std::to_string(P));
    }
    n_patches[i] = mel.rows / P;
    total_patches += n_patches[i];
  }

  Tensor2 patch_rows(total_patches, in_dim);
  int row = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    const Tensor2& mel = *mels[i];
    for (int p = 0; p < n_patches[i]; ++p, ++row) {
      double* dst = patch_rows.row(row);
      for (int f = 0; f < P; ++f) {
        const double* src = mel.row(p * P + f);
        std::copy(src, src + B, dst + f * B);
      }
    }
  }

  Var patches = add_row_broadcast(matmul(t.input(std::move(patch_rows)),
                                         t.param(patch_w_)),
                                  t.param(patch_b_));

  // Prepend the shared CLS row to every clip and add sinusoidal positions.
  Var cls = t.param(cls_);
  std::vector<Var> parts;
  std::vector<int> lens(mels.size());
  int max_len = 0;
  int offset = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    parts.push_back(cls);
    parts.push_back(slice_rows(patches, offset, offset + n_patches[i]));
    offset += n_patches[i];
    lens[i] = n_patches[i] + 1;
    max_len = std::max(max_len, lens[i]);
  }
  Var x = concat_rows(parts);

  const Tensor2 sinus = sinusoid_positions(max_len, cfg_.width);
  Tensor2 pos(offset + static_cast<int>(mels.size()), cfg_.width);
  int at = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    for (int p = 0; p < lens[i]; ++p, ++at) {
      std::copy(sinus.row(p), sinus.row(p) + cfg_.width, pos.row(at));
    }
  }
  x = add(x, t.input(std::move(pos)));

  x = transformer_stack(t, x, lens, layers_, cfg_.heads);

  std::vector<int> cls_rows(mels.size());
  int acc = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    cls_rows[i] = acc;
    acc += lens[i];
  }
  Var pooled = gather_rows(x, cls_rows);
  Var projected =
      add_row_broadcast(matmul(pooled, t.param(proj_w_)), t.param(proj_b_));
  return l2_normalize_rows(projected);
}

std::vector<Parameter*> AudioEncoder::parameters() {
  std::vector<Parameter*> out{&patch_w_, &patch_b_, &cls_};
  for (TransformerLayer& l : layers_) append_layer_params(out, l);
  out.push_back(&proj_w_);
  out.push_back(&proj_b_);
  return out;
}

TextTransformerEncoder::TextTransformerEncoder(const EncoderConfig& cfg,
                                               int vocab_size, Rng& rng)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size < 2) {
    throw std::invalid_argument("TextTransformerEncoder: vocabulary too small");
  }
  const int w = cfg_.width;
  token_embed_ = Parameter{"text.token_embed", normal_init(rng, vocab_size, w, 0.02)};
  pos_embed_ = Parameter{"text.pos_embed", normal_init(rng, cfg_.max_len, w, 0.02)};
  layers_.reserve(static_cast<std::size_t>(cfg_.depth));
  for (int i = 0; i < cfg_.depth; ++i) {
    layers_.push_back(make_layer("text.layer" + std::to_string(i), w,
                                 cfg_.ff_mult * w, rng));
  }
  final_ln_g_ = Parameter{"text.final_ln.g", Tensor2::full(1, w, 1.0)};
  final_ln_b_ = Parameter{"text.final_ln.b", Tensor2::zeros(1, w)};
  proj_w_ = Parameter{"text.proj.w", fan_in_init(rng, w, cfg_.embed_dim)};
  proj_b_ = Parameter{"text.proj.b", Tensor2::zeros(1, cfg_.embed_dim)};
}

Var TextTransformerEncoder::forward(Tape& t,
                                    const std::vector<std::vector<int>>& token_batch) {
  if (token_batch.empty()) {
    throw std::invalid_argument("TextTransformerEncoder: empty batch");
  }
  std::vector<int> flat_tokens, flat_positions, lens;
  lens.reserve(token_batch.size());
  for (const auto& tokens : token_batch) {
    if (tokens.empty() || tokens.front() != Vocabulary::kSos) {
      throw std::invalid_argument(
          "TextTransformerEncoder: sequence must start with SOS");
    }
    if (static_cast<int>(tokens.size()) > cfg_.max_len) {
      throw std::invalid_argument("TextTransformerEncoder: sequence length " +
                                  std::to_string(tokens.size()) + " exceeds max " +
                                  std::to_string(cfg_.max_len));
    }
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      if (tokens[p] < 0 || tokens[p] >= vocab_size_) {
        throw std::invalid_argument("TextTransformerEncoder: token index " +
                                    std::to_string(tokens[p]) + " outside vocabulary");
      }
      flat_tokens.push_back(tokens[p]);
      flat_positions.push_back(static_cast<int>(p));
    }
    lens.push_back(static_cast<int>(tokens.size()));
  }

  Var tok = gather_rows(t.param(token_embed_), flat_tokens);
  Var pos = gather_rows(t.param(pos_embed_), flat_positions);
  Var x = add(tok, pos);
  x = transformer_stack(t, x, lens, layers_, cfg_.heads);

  std::vector<int> sos_rows(token_batch.size());
  int acc = 0;
  for (std::size_t i = 0; i < lens.size(); ++i) {
    sos_rows[i] = acc;
    acc += lens[i];
  }
  Var pooled = gather_rows(x, sos_rows);
  Var normed = layer_norm_rows(pooled, t.param(final_ln_g_), t.param(final_ln_b_));
  Var projected =
      add_row_broadcast(matmul(normed, t.param(proj_w_)), t.param(proj_b_));
  return l2_normalize_rows(projected);
}

std::vector<Parameter*> TextTransformerEncoder::parameters() {
  std::vector<Parameter*> out{&token_embed_, &pos_embed_};
  for (TransformerLayer& l : layers_) append_layer_params(out, l);
  out.push_back(&final_ln_g_);
  out.push_back(&final_ln_b_);
  out.push_back(&proj_w_);
  out.push_back(&proj_b_);
  return out;
}

TextBowEncoder::TextBowEncoder(int word_dim, int embed_dim, Rng& rng)
    : word_dim_(word_dim), embed_dim_(embed_dim) {
  if (word_dim <= 0 || embed_dim <= 0) {
    throw std::invalid_argument("TextBowEncoder: dimensions must be positive");
  }
  proj_ = Parameter{"bow.proj.w", fan_in_init(rng, word_dim, embed_dim)};
}

Var TextBowEncoder::forward(Tape& t,
                            const std::vector<std::vector<std::string>>& word_batch,
                            const WordVectorTable& table) {
  if (word_batch.empty()) throw std::invalid_argument("TextBowEncoder: empty batch");
  if (table.dimension != word_dim_) {
    throw std::invalid_argument("TextBowEncoder: table dimension " +
                                std::to_string(table.dimension) + " != " +
                                std::to_string(word_dim_));
  }
  Tensor2 means(static_cast<int>(word_batch.size()), word_dim_);
  for (std::size_t i = 0; i < word_batch.size(); ++i) {
    if (word_batch[i].empty()) {
      throw std::invalid_argument("TextBowEncoder: empty word list in batch item " +
                                  std::to_string(i));
    }
    // Sorted accumulation makes the average bitwise permutation-invariant.
    std::vector<std::string> words = word_batch[i];
    std::sort(words.begin(), words.end());
    double* mrow = means.row(static_cast<int>(i));
    for (const std::string& w : words) {
      const std::vector<double> vec = table.lookup(w);
      for (int c = 0; c < word_dim_; ++c) mrow[c] += vec[static_cast<std::size_t>(c)];
    }
    double norm_sq = 0.0;
    for (int c = 0; c < word_dim_; ++c) {
      mrow[c] /= static_cast<double>(words.size());
      norm_sq += mrow[c] * mrow[c];
    }
    if (norm_sq <= 1e-24) {
      throw std::invalid_argument(
          "TextBowEncoder: zero word-vector average (all tokens unknown) in batch item " +
          std::to_string(i));
    }
  }
  // Averaging frozen vectors first, then projecting, equals projecting each
  // and averaging (the map is linear), at a fraction of the cost.
  Var projected = matmul(t.input(std::move(means)), t.param(proj_));
  return l2_normalize_rows(projected);
}

std::vector<Parameter*> TextBowEncoder::parameters() { return {&proj_}; }

Var classify_scores(Tape& t, Var embeddings, Parameter& centroids) {
  const Tensor2& z = t.value(embeddings);
  if (z.cols != centroids.value.cols) {
    throw std::invalid_argument("classify_scores: embedding dim " +
                                std::to_string(z.cols) + " != centroid dim " +
                                std::to_string(centroids.value.cols));
  }
  return sigmoid(matmul(embeddings, transpose(t.param(centroids))));
}

}  // namespace xmusic
