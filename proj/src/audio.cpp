// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace itervc {

namespace {

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

void write_wav(const fs::path& path, const Waveform& wav) {
  const uint32_t n = static_cast<uint32_t>(wav.samples.size());
  const uint32_t data_bytes = n * 2;
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(wav.sample_rate_hz));
  put_u32(out, static_cast<uint32_t>(wav.sample_rate_hz * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, data_bytes);
  for (double x : wav.samples) {
    double c = std::clamp(x, -1.0, 1.0);
    auto v = static_cast<int16_t>(std::lrint(c * 32767.0));
    put_u16(out, static_cast<uint16_t>(v));
  }
  write_file_atomic(path, out.data(), out.size());
}

Waveform read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open wav file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 44 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw Error("not a RIFF/WAVE file: " + path.string());

  Waveform wav;
  size_t pos = 12;
  bool have_fmt = false;
  while (pos + 8 <= bytes.size()) {
    const uint32_t chunk_size = get_u32(p + pos + 4);
    const bool is_fmt = std::memcmp(p + pos, "fmt ", 4) == 0;
    const bool is_data = std::memcmp(p + pos, "data", 4) == 0;
    const size_t body = pos + 8;
    if (is_fmt) {
      if (body + 16 > bytes.size()) throw Error("truncated fmt chunk: " + path.string());
      const uint16_t format = get_u16(p + body);
      const uint16_t channels = get_u16(p + body + 2);
      const uint32_t rate = get_u32(p + body + 4);
      const uint16_t bits = get_u16(p + body + 14);
      if (format != 1 || channels != 1 || bits != 16)
        throw Error("unsupported wav format (need 16-bit PCM mono): " + path.string());
      wav.sample_rate_hz = static_cast<int>(rate);
      have_fmt = true;
    } else if (is_data) {
      if (!have_fmt) throw Error("data chunk before fmt chunk: " + path.string());
      if (body + chunk_size > bytes.size()) throw Error("truncated data chunk: " + path.string());
      const size_t n = chunk_size / 2;
      wav.samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        auto v = static_cast<int16_t>(get_u16(p + body + 2 * i));
        wav.samples[i] = static_cast<double>(v) / 32767.0;
      }
      return wav;
    }
    pos = body + chunk_size + (chunk_size & 1);
  }
  throw Error("wav file has no data chunk: " + path.string());
}

}  // namespace itervc
