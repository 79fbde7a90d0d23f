#include "xmusic/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace xmusic {

namespace {

constexpr int kSampleRate = 16000;
constexpr int kNFft = 1024;
constexpr int kHop = 160;
constexpr int kNMels = 128;
constexpr double kFMin = 0.0;
constexpr double kFMax = 8000.0;
constexpr double kLogFloor = 1e-10;

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_wav: cannot open '" + path + "'");

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) {
    throw std::runtime_error("load_wav: '" + path + "' is not a RIFF file");
  }
  read_u32(in);  // overall size, unused
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) {
    throw std::runtime_error("load_wav: '" + path + "' is not a WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::vector<char> payload;

  while (in.read(tag, 4)) {
    const std::uint32_t chunk_size = read_u32(in);
    if (!in) throw std::runtime_error("load_wav: truncated chunk header in '" + path + "'");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (chunk_size < 16) {
        throw std::runtime_error("load_wav: malformed fmt chunk in '" + path + "'");
      }
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      in.ignore(chunk_size - 16);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      payload.resize(chunk_size);
      in.read(payload.data(), chunk_size);
      if (static_cast<std::uint32_t>(in.gcount()) != chunk_size) {
        throw std::runtime_error("load_wav: truncated data chunk in '" + path + "'");
      }
      break;
    } else {
      in.ignore(chunk_size + (chunk_size % 2));  // chunks are word-aligned
    }
  }
  if (!have_fmt) throw std::runtime_error("load_wav: missing fmt chunk in '" + path + "'");
  if (payload.empty()) {
    throw std::runtime_error("load_wav: missing or empty data chunk in '" + path + "'");
  }
  if (channels != 1 && channels != 2) {
    throw std::runtime_error("load_wav: unsupported channel count " +
                             std::to_string(channels) + " in '" + path + "'");
  }
  const bool pcm16 = (format == 1 && bits == 16);
  const bool f32 = (format == 3 && bits == 32);
  if (!pcm16 && !f32) {
    throw std::runtime_error("load_wav: unsupported encoding (format " +
                             std::to_string(format) + ", " + std::to_string(bits) +
                             "-bit) in '" + path + "'");
  }
  if (rate != kSampleRate) {
    throw std::runtime_error("load_wav: sample rate " + std::to_string(rate) +
                             " not supported, expected 16000 in '" + path + "'");
  }

  const std::size_t bytes_per_sample = pcm16 ? 2 : 4;
  const std::size_t n_values = payload.size() / (bytes_per_sample * channels);
  if (n_values == 0) throw std::runtime_error("load_wav: no samples in '" + path + "'");

  AudioClip clip;
  clip.sample_rate = kSampleRate;
  clip.samples.resize(n_values);
  const unsigned char* raw = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < n_values; ++i) {
    double acc = 0.0;
    for (int ch = 0; ch < channels; ++ch) {
      const std::size_t at = (i * channels + ch) * bytes_per_sample;
      if (pcm16) {
        const std::int16_t v =
            static_cast<std::int16_t>(raw[at] | (raw[at + 1] << 8));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        float f;
        std::memcpy(&f, raw + at, 4);
        acc += static_cast<double>(f);
      }
    }
    clip.samples[i] = acc / channels;
  }
  return clip;
}

void fft_inplace(std::complex<double>* a, int n) {
  if (n <= 0 || (n & (n - 1)) != 0) {
    throw std::invalid_argument("fft: size must be a power of two, got " +
                                std::to_string(n));
  }
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / len;
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

namespace {

// 128 triangular filters over the 513 rFFT bins, HTK mel spacing 0..8000 Hz,
// each scaled by 2 / (upper edge - lower edge) so filter areas match.
Tensor2 build_mel_filterbank() {
  const int n_bins = kNFft / 2 + 1;
  const double mel_lo = hz_to_mel(kFMin);
  const double mel_hi = hz_to_mel(kFMax);
  std::vector<double> edges(kNMels + 2);
  for (int i = 0; i < kNMels + 2; ++i) {
    edges[static_cast<std::size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kNMels + 1));
  }
  Tensor2 fb(kNMels, n_bins);
  for (int m = 0; m < kNMels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double mid = edges[static_cast<std::size_t>(m + 1)];
    const double hi = edges[static_cast<std::size_t>(m + 2)];
    const double norm = 2.0 / (hi - lo);
    for (int k = 0; k < n_bins; ++k) {
      const double fk = static_cast<double>(k) * kSampleRate / kNFft;
      double w = 0.0;
      if (fk >= lo && fk <= mid && mid > lo) {
        w = (fk - lo) / (mid - lo);
      } else if (fk > mid && fk <= hi && hi > mid) {
        w = (hi - fk) / (hi - mid);
      }
      fb.at(m, k) = w * norm;
    }
  }
  return fb;
}

}  // namespace

MelSpectrogram mel_spectrogram(const AudioClip& clip) {
  const int len = static_cast<int>(clip.samples.size());
  if (len < kNFft) {
    throw std::invalid_argument("mel_spectrogram: clip too short, " +
                                std::to_string(len) + " < 1024 samples");
  }
  const int pad = kNFft / 2;
  const int frames = 1 + len / kHop;

  // Reflect padding without edge repetition: padded[-k] = samples[k].
  std::vector<double> padded(static_cast<std::size_t>(len + 2 * pad));
  for (int i = 0; i < pad; ++i) {
    padded[static_cast<std::size_t>(i)] = clip.samples[static_cast<std::size_t>(pad - i)];
  }
  std::copy(clip.samples.begin(), clip.samples.end(), padded.begin() + pad);
  for (int i = 0; i < pad; ++i) {
    padded[static_cast<std::size_t>(len + pad + i)] =
        clip.samples[static_cast<std::size_t>(len - 2 - i)];
  }

  std::vector<double> window(kNFft);
  for (int n = 0; n < kNFft; ++n) {
    window[static_cast<std::size_t>(n)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / kNFft));
  }

  static const Tensor2 filterbank = build_mel_filterbank();
  const int n_bins = kNFft / 2 + 1;

  MelSpectrogram mel;
  mel.frames = frames;
  mel.mel_bins = kNMels;
  mel.values = Tensor2(frames, kNMels);

  std::vector<std::complex<double>> buf(kNFft);
  std::vector<double> power(static_cast<std::size_t>(n_bins));
  for (int t = 0; t < frames; ++t) {
    const double* frame = padded.data() + static_cast<std::size_t>(t) * kHop;
    for (int n = 0; n < kNFft; ++n) {
      buf[static_cast<std::size_t>(n)] = frame[n] * window[static_cast<std::size_t>(n)];
    }
    fft_inplace(buf.data(), kNFft);
    for (int k = 0; k < n_bins; ++k) {
      power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
    }
    for (int m = 0; m < kNMels; ++m) {
      const double* fb = filterbank.row(m);
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) acc += fb[k] * power[static_cast<std::size_t>(k)];
      mel.values.at(t, m) = std::log(std::max(acc, kLogFloor));
    }
  }
  return mel;
}

AudioClip sample_chunk(const AudioClip& clip, double seconds, Rng& rng) {
  const long chunk_len = std::lround(seconds * clip.sample_rate);
  const long len = static_cast<long>(clip.samples.size());
  if (chunk_len <= 0) throw std::invalid_argument("sample_chunk: non-positive length");
  if (len < chunk_len) {
    throw std::invalid_argument("sample_chunk: clip has " + std::to_string(len) +
                                " samples, chunk needs " + std::to_string(chunk_len));
  }
  const std::uint64_t offset = rng.uniform_u64(static_cast<std::uint64_t>(len - chunk_len) + 1);
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.samples.assign(clip.samples.begin() + static_cast<long>(offset),
                     clip.samples.begin() + static_cast<long>(offset) + chunk_len);
  return out;
}

}  // namespace xmusic
