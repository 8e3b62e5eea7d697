#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "speechre/common.hpp"

namespace speechre {

struct AudioClip {
    std::vector<double> samples;  // mono, in [-1, 1]
    int sample_rate = 0;
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

// Minimal RIFF/WAV reader: 16-bit PCM, mono or multi-channel (channels are
// averaged down to mono).
inline AudioClip wav_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("wav: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw IoError("wav: not a RIFF/WAVE file: " + path);
    }

    AudioClip clip;
    int channels = 0;
    int bits = 0;
    bool have_fmt = false;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* tag = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t chunk_size = detail::read_u32le(bytes.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (body + chunk_size > bytes.size()) break;
        if (std::memcmp(tag, "fmt ", 4) == 0 && chunk_size >= 16) {
            const std::uint16_t format = detail::read_u16le(bytes.data() + body);
            channels = detail::read_u16le(bytes.data() + body + 2);
            clip.sample_rate = static_cast<int>(detail::read_u32le(bytes.data() + body + 4));
            bits = detail::read_u16le(bytes.data() + body + 14);
            if (format != 1 || bits != 16) {
                throw IoError("wav: only 16-bit PCM supported: " + path);
            }
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt || channels <= 0) throw IoError("wav: data chunk before fmt: " + path);
            const std::size_t n_frames = chunk_size / (2u * static_cast<unsigned>(channels));
            clip.samples.reserve(n_frames);
            for (std::size_t f = 0; f < n_frames; ++f) {
                double acc = 0.0;
                for (int c = 0; c < channels; ++c) {
                    const std::size_t off = body + (f * static_cast<std::size_t>(channels) +
                                                    static_cast<std::size_t>(c)) * 2;
                    std::int16_t v;
                    std::memcpy(&v, bytes.data() + off, 2);
                    acc += static_cast<double>(v) / 32768.0;
                }
                clip.samples.push_back(acc / channels);
            }
        }
        pos = body + chunk_size + (chunk_size & 1u);
    }
    if (!have_fmt) throw IoError("wav: missing fmt chunk: " + path);
    if (clip.samples.empty()) throw IoError("wav: no audio data in " + path);
    return clip;
}

inline void wav_write(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("wav: cannot write " + path);
    auto put_u32 = [&out](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    auto put_u16 = [&out](std::uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
        out.write(reinterpret_cast<const char*>(b), 2);
    };
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
    out.write("RIFF", 4);
    put_u32(36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(static_cast<std::uint32_t>(sample_rate));
    put_u32(static_cast<std::uint32_t>(sample_rate) * 2);
    put_u16(2);
    put_u16(16);
    out.write("data", 4);
    put_u32(data_bytes);
    for (double s : samples) {
        double clamped = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
        auto v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
        put_u16(static_cast<std::uint16_t>(v));
    }
}

}  // namespace speechre
