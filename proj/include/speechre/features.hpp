#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "speechre/audio.hpp"
#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/fft.hpp"
#include "speechre/rng.hpp"
#include "speechre/tensor.hpp"

namespace speechre {

enum class FeatureKind { LogMel, Encoded };

// L_frames x d_dims matrix of either log-mel input features or encoder
// output features, with the producing parameterization in meta.
struct FeatureMatrix {
    Tensor data;  // {frames, dims}
    FeatureKind kind = FeatureKind::LogMel;
    nlohmann::json meta;

    std::size_t frames() const { return data.dim(0); }
    std::size_t dims() const { return data.dim(1); }
};

struct SynthConfig {
    int d_dims = 16;
    int frames_per_token = 4;
    double noise_std = 0.0;
    std::uint64_t master_seed = 0x5eedull;
};

// Deterministic stand-in for real audio features: every transcript token maps
// to a fixed hash-seeded embedding repeated frames_per_token times, plus
// optional Gaussian noise seeded by (synthetic_seed, master_seed).
inline FeatureMatrix synth_features(const Sample& sample, const SynthConfig& config) {
    if (!sample.synthetic_seed) {
        throw ContractError("synth_features: sample " + sample.id + " has no synthetic_seed");
    }
    if (config.d_dims < 1 || config.frames_per_token < 1) {
        throw ConfigError("synth_features: d_dims and frames_per_token must be >= 1");
    }
    const auto tokens = split_whitespace(sample.transcript);
    if (tokens.empty()) {
        throw ContractError("synth_features: empty transcript for sample " + sample.id);
    }

    const auto frames = tokens.size() * static_cast<std::size_t>(config.frames_per_token);
    const auto dims = static_cast<std::size_t>(config.d_dims);
    FeatureMatrix fm;
    fm.kind = FeatureKind::LogMel;
    fm.data = Tensor({frames, dims});

    std::size_t row = 0;
    for (const auto& token : tokens) {
        Rng tok_rng(substream_seed(config.master_seed, "synth.token:" + token));
        std::vector<double> embedding(dims);
        for (auto& v : embedding) v = tok_rng.normal();
        for (int rep = 0; rep < config.frames_per_token; ++rep, ++row) {
            for (std::size_t d = 0; d < dims; ++d) fm.data(row, d) = embedding[d];
        }
    }

    if (config.noise_std > 0.0) {
        Rng noise(substream_seed(config.master_seed ^ splitmix64(*sample.synthetic_seed),
                                 "synth.noise"));
        for (double& v : fm.data.data) v += noise.normal(0.0, config.noise_std);
    }

    fm.meta = {{"source", "synthetic"},
               {"d_dims", config.d_dims},
               {"frames_per_token", config.frames_per_token},
               {"noise_std", config.noise_std}};
    return fm;
}

struct MelConfig {
    int sample_rate = 16000;
    int n_mels = 80;
    int hop_ms = 10;
    int win_ms = 25;
    double fmin = 0.0;
    double fmax = 0.0;  // 0 -> sample_rate / 2
};

namespace detail {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filterbank, one row per mel band over n_fft/2+1 bins.
inline std::vector<std::vector<double>> mel_filterbank(int n_mels, std::size_t n_fft,
                                                       double sample_rate, double fmin,
                                                       double fmax) {
    const std::size_t n_bins = n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(fmin);
    const double mel_hi = hz_to_mel(fmax);
    std::vector<double> centers(static_cast<std::size_t>(n_mels) + 2);
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                        static_cast<double>(n_mels + 1);
        centers[i] = mel_to_hz(mel);
    }
    std::vector<std::vector<double>> bank(static_cast<std::size_t>(n_mels),
                                          std::vector<double>(n_bins, 0.0));
    for (int m = 0; m < n_mels; ++m) {
        const double left = centers[static_cast<std::size_t>(m)];
        const double center = centers[static_cast<std::size_t>(m) + 1];
        const double right = centers[static_cast<std::size_t>(m) + 2];
        for (std::size_t b = 0; b < n_bins; ++b) {
            const double freq = sample_rate * static_cast<double>(b) / static_cast<double>(n_fft);
            double w = 0.0;
            if (freq >= left && freq <= center && center > left) {
                w = (freq - left) / (center - left);
            } else if (freq > center && freq <= right && right > center) {
                w = (right - freq) / (right - center);
            }
            bank[static_cast<std::size_t>(m)][b] = w;
        }
    }
    return bank;
}

}  // namespace detail

// Log-mel spectrogram of a mono clip: Hann window, power spectrum, triangular
// mel filterbank, natural log with a 1e-10 floor.
inline FeatureMatrix log_mel_spectrogram(const AudioClip& clip, const MelConfig& config) {
    if (clip.samples.empty()) throw IoError("log-mel: empty audio");
    if (config.sample_rate != clip.sample_rate) {
        throw ConfigError("log-mel: clip sample rate " + std::to_string(clip.sample_rate) +
                          " != configured " + std::to_string(config.sample_rate));
    }
    const auto win = static_cast<std::size_t>(config.sample_rate * config.win_ms / 1000);
    const auto hop = static_cast<std::size_t>(config.sample_rate * config.hop_ms / 1000);
    if (win == 0 || hop == 0) throw ConfigError("log-mel: window and hop must be positive");
    if (clip.samples.size() < win) {
        throw IoError("log-mel: clip shorter than one analysis window");
    }
    const std::size_t n_fft = next_pow2(win);
    const std::size_t n_frames = 1 + (clip.samples.size() - win) / hop;
    const double fmax = config.fmax > 0.0 ? config.fmax : config.sample_rate / 2.0;

    std::vector<double> window(win);
    for (std::size_t i = 0; i < win; ++i) {
        window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                         static_cast<double>(win));
    }
    const auto bank = detail::mel_filterbank(config.n_mels, n_fft,
                                             static_cast<double>(config.sample_rate),
                                             config.fmin, fmax);

    FeatureMatrix fm;
    fm.kind = FeatureKind::LogMel;
    fm.data = Tensor({n_frames, static_cast<std::size_t>(config.n_mels)});

    std::vector<double> re(n_fft), im(n_fft);
    std::vector<double> power(n_fft / 2 + 1);
    for (std::size_t f = 0; f < n_frames; ++f) {
        std::fill(re.begin(), re.end(), 0.0);
        std::fill(im.begin(), im.end(), 0.0);
        const std::size_t start = f * hop;
        for (std::size_t i = 0; i < win; ++i) re[i] = clip.samples[start + i] * window[i];
        fft_radix2(re, im);
        for (std::size_t b = 0; b < power.size(); ++b) power[b] = re[b] * re[b] + im[b] * im[b];
        for (int m = 0; m < config.n_mels; ++m) {
            double acc = 0.0;
            const auto& filt = bank[static_cast<std::size_t>(m)];
            for (std::size_t b = 0; b < power.size(); ++b) acc += filt[b] * power[b];
            fm.data(f, static_cast<std::size_t>(m)) = std::log(std::max(acc, 1e-10));
        }
    }
    fm.meta = {{"source", "log_mel"},
               {"sample_rate", config.sample_rate},
               {"n_mels", config.n_mels},
               {"hop_ms", config.hop_ms},
               {"win_ms", config.win_ms},
               {"n_fft", n_fft},
               {"fmin", config.fmin},
               {"fmax", fmax}};
    return fm;
}

inline FeatureMatrix extract_log_mel(const std::string& audio_path, const MelConfig& config) {
    return log_mel_spectrogram(wav_read(audio_path), config);
}

// Dispatch on the sample's feature source.
inline FeatureMatrix sample_features(const Sample& sample, const SynthConfig& synth,
                                     const MelConfig& mel) {
    if (sample.synthetic_seed) return synth_features(sample, synth);
    if (sample.audio_path) return extract_log_mel(*sample.audio_path, mel);
    throw ContractError("sample " + sample.id + " has no feature source");
}

}  // namespace speechre
