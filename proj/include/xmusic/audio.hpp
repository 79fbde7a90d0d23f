#pragma once

#include <complex>
#include <string>
#include <vector>

#include "xmusic/rng.hpp"
#include "xmusic/tensor.hpp"

namespace xmusic {

// PCM audio after ingestion. Samples lie in [-1, 1]; rate is always 16 kHz
// because load_wav rejects anything else (no resampler).
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 16000;
};

struct MelSpectrogram {
  int frames = 0;
  int mel_bins = 0;
  Tensor2 values;  // frames x mel_bins, natural-log power, floored at log(1e-10)
};

// Reads a RIFF/WAVE file: PCM 16-bit or IEEE float 32-bit, mono or stereo
// (stereo is averaged down to mono). int16 samples are scaled by 1/32768.
// Throws std::runtime_error on malformed headers, unsupported encodings, or a
// sample rate other than 16000.
AudioClip load_wav(const std::string& path);

// Center-padded STFT (1024-point FFT, periodic Hann, reflect pad 512 each
// side, hop 160 samples) -> power spectrum -> 128 triangular area-normalized
// mel filters (HTK scale, 0..8000 Hz) -> natural log floored at 1e-10.
// Frame count is 1 + floor(len/160). Requires at least 1024 samples.
MelSpectrogram mel_spectrogram(const AudioClip& clip);

// Contiguous random window of exactly round(seconds * 16000) samples; the
// start offset is uniform over the valid range. Throws std::invalid_argument
// if the clip is shorter than the chunk.
AudioClip sample_chunk(const AudioClip& clip, double seconds, Rng& rng);

// In-place iterative radix-2 FFT; n must be a power of two.
void fft_inplace(std::complex<double>* a, int n);

// HTK mel scale helpers.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

}  // namespace xmusic
