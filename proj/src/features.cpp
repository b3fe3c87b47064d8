// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/features.hpp"

#include <json.hpp>

#include <cmath>
#include <complex>
#include <cstdlib>
#include <cstring>
#include <fstream>

namespace itervc {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT. Hand-rolled so results are bit-stable across
// machines and library versions.
void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

void FeatureConfig::validate() const {
  if (!is_pow2(n_fft)) throw ConfigError("features: n_fft must be a power of two");
  if (!(hop <= window && window <= n_fft)) throw ConfigError("features: need hop <= window <= n_fft");
  if (hop < 1) throw ConfigError("features: hop must be >= 1");
  if (n_mels < 1) throw ConfigError("features: n_mels must be >= 1");
  if (!(fmin < fmax && fmax <= sample_rate_hz / 2.0))
    throw ConfigError("features: need fmin < fmax <= sample_rate/2");
  if (log_floor <= 0) throw ConfigError("features: log_floor must be positive");
}

std::string FeatureConfig::hash() const {
  nlohmann::json j = {{"n_fft", n_fft}, {"window", window}, {"hop", hop},      {"n_mels", n_mels},
                      {"fmin", fmin},   {"fmax", fmax},     {"floor", log_floor}, {"sr", sample_rate_hz}};
  return hex64(fnv1a64(j.dump()));
}

std::vector<double> mel_filter_centers_hz(const FeatureConfig& config) {
  const double mel_lo = hz_to_mel(config.fmin), mel_hi = hz_to_mel(config.fmax);
  std::vector<double> centers(static_cast<size_t>(config.n_mels));
  for (int i = 0; i < config.n_mels; ++i)
    centers[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (i + 1) / (config.n_mels + 1));
  return centers;
}

Mat mel_filterbank(const FeatureConfig& config) {
  const int n_bins = config.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(config.fmin), mel_hi = hz_to_mel(config.fmax);
  std::vector<double> pts(static_cast<size_t>(config.n_mels) + 2);
  for (int i = 0; i < config.n_mels + 2; ++i)
    pts[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (config.n_mels + 1));

  Mat fb = Mat::Zero(n_bins, config.n_mels);
  for (int b = 0; b < n_bins; ++b) {
    const double f = static_cast<double>(b) * config.sample_rate_hz / config.n_fft;
    for (int m = 0; m < config.n_mels; ++m) {
      const double lo = pts[static_cast<size_t>(m)], mid = pts[static_cast<size_t>(m) + 1],
                   hi = pts[static_cast<size_t>(m) + 2];
      if (f <= lo || f >= hi) continue;
      fb(b, m) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

MelSpectrogram melspectrogram(const Waveform& wav, const FeatureConfig& config) {
  config.validate();
  if (wav.sample_rate_hz != config.sample_rate_hz)
    throw Error("melspectrogram: waveform sample rate " + std::to_string(wav.sample_rate_hz) +
                " does not match config " + std::to_string(config.sample_rate_hz));
  const auto len = static_cast<long>(wav.samples.size());
  if (len < config.window)
    throw Error("melspectrogram: waveform shorter than analysis window (" + std::to_string(len) + " < " +
                std::to_string(config.window) + " samples)");
  for (double x : wav.samples)
    if (!std::isfinite(x)) throw Error("melspectrogram: non-finite sample in waveform");

  const long frames = 1 + (len - config.window) / config.hop;
  const int n_bins = config.n_fft / 2 + 1;

  std::vector<double> hann(static_cast<size_t>(config.window));
  for (int n = 0; n < config.window; ++n)
    hann[static_cast<size_t>(n)] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / config.window);

  const Mat fb = mel_filterbank(config);
  Mat power(frames, n_bins);
  std::vector<std::complex<double>> buf(static_cast<size_t>(config.n_fft));
  for (long t = 0; t < frames; ++t) {
    const long off = t * config.hop;
    for (int n = 0; n < config.window; ++n)
      buf[static_cast<size_t>(n)] = wav.samples[static_cast<size_t>(off + n)] * hann[static_cast<size_t>(n)];
    for (int n = config.window; n < config.n_fft; ++n) buf[static_cast<size_t>(n)] = 0.0;
    fft_inplace(buf);
    for (int b = 0; b < n_bins; ++b) power(t, b) = std::norm(buf[static_cast<size_t>(b)]);
  }

  MelSpectrogram mel;
  mel.data = (power * fb).array().max(config.log_floor).log().matrix();
  mel.frame_hop_s = static_cast<double>(config.hop) / config.sample_rate_hz;
  mel.sample_rate_hz = config.sample_rate_hz;
  return mel;
}

NormalizationStats fit_normalization(const std::vector<const MelSpectrogram*>& mels) {
  if (mels.empty()) throw Error("fit_normalization: empty input");
  const auto bins = mels.front()->bins();
  RowVec sum = RowVec::Zero(bins), sumsq = RowVec::Zero(bins);
  long n = 0;
  for (const auto* m : mels) {
    if (m->bins() != bins) throw Error("fit_normalization: inconsistent bin counts");
    sum += m->data.colwise().sum();
    sumsq += m->data.array().square().matrix().colwise().sum();
    n += m->frames();
  }
  NormalizationStats stats;
  stats.mean = sum / static_cast<double>(n);
  RowVec var = (sumsq / static_cast<double>(n)) - stats.mean.array().square().matrix();
  stats.std.resize(bins);
  for (Eigen::Index b = 0; b < bins; ++b) {
    const double v = std::max(var(b), 0.0);
    if (v < 1e-12)
      throw Error("fit_normalization: bin " + std::to_string(b) + " is constant over the corpus");
    stats.std(b) = std::sqrt(v);
  }
  return stats;
}

MelSpectrogram normalize(const MelSpectrogram& mel, const NormalizationStats& stats) {
  MelSpectrogram out = mel;
  out.data = (mel.data.rowwise() - stats.mean).array().rowwise() / stats.std.array();
  return out;
}

MelSpectrogram denormalize(const MelSpectrogram& mel, const NormalizationStats& stats) {
  MelSpectrogram out = mel;
  out.data = (mel.data.array().rowwise() * stats.std.array()).matrix().rowwise() + stats.mean;
  return out;
}

void save_fmat(const fs::path& path, const Mat& m) {
  const auto rows = static_cast<int32_t>(m.rows()), cols = static_cast<int32_t>(m.cols());
  std::string out;
  out.reserve(12 + static_cast<size_t>(rows) * static_cast<size_t>(cols) * 4);
  out += "FMAT";
  out.append(reinterpret_cast<const char*>(&rows), 4);
  out.append(reinterpret_cast<const char*>(&cols), 4);
  for (int32_t r = 0; r < rows; ++r)
    for (int32_t c = 0; c < cols; ++c) {
      const auto v = static_cast<float>(m(r, c));
      out.append(reinterpret_cast<const char*>(&v), 4);
    }
  write_file_atomic(path, out.data(), out.size());
}

Mat load_fmat(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open matrix file: " + path.string());
  char magic[4];
  int32_t rows = 0, cols = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  if (!in || std::memcmp(magic, "FMAT", 4) != 0)
    throw Error("bad matrix file header: " + path.string());
  if (rows < 0 || cols < 0) throw Error("bad matrix shape in " + path.string());
  Mat m(rows, cols);
  std::vector<float> row(static_cast<size_t>(cols));
  for (int32_t r = 0; r < rows; ++r) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(4 * row.size()));
    if (!in) throw Error("truncated matrix file: " + path.string());
    for (int32_t c = 0; c < cols; ++c) m(r, c) = row[static_cast<size_t>(c)];
  }
  return m;
}

FeatureStore::FeatureStore(FeatureConfig config, fs::path cache_root)
    : config_(std::move(config)), cache_root_(std::move(cache_root)) {
  config_.validate();
}

fs::path FeatureStore::default_cache_root() {
  const char* env = std::getenv("ITERVC_CACHE");
  return env && *env ? fs::path(env) : fs::path();
}

const MelSpectrogram& FeatureStore::get(const DatasetManifest& manifest, const Utterance& utt) {
  auto it = memo_.find(utt.id);
  if (it != memo_.end()) return it->second;

  MelSpectrogram mel;
  if (utt.mel_backed()) {
    mel.data = load_fmat(manifest.resolve(utt.features_path));
    mel.frame_hop_s = static_cast<double>(config_.hop) / config_.sample_rate_hz;
    mel.sample_rate_hz = config_.sample_rate_hz;
  } else {
    fs::path cached;
    if (!cache_root_.empty()) {
      cached = cache_root_ / config_.hash() / (utt.id + ".fmat");
      if (fs::exists(cached)) {
        mel.data = load_fmat(cached);
        mel.frame_hop_s = static_cast<double>(config_.hop) / config_.sample_rate_hz;
        mel.sample_rate_hz = config_.sample_rate_hz;
        return memo_.emplace(utt.id, std::move(mel)).first->second;
      }
    }
    mel = melspectrogram(read_wav(manifest.resolve(utt.audio_path)), config_);
    // Quantize through float32 so a cache hit and a fresh computation yield
    // identical values; keeps training runs reproducible across cache states.
    mel.data = mel.data.cast<float>().cast<double>();
    if (!cached.empty()) save_fmat(cached, mel.data);
  }
  if (mel.bins() != config_.n_mels)
    throw Error("feature store: utterance '" + utt.id + "' has " + std::to_string(mel.bins()) +
                " bins, expected " + std::to_string(config_.n_mels));
  return memo_.emplace(utt.id, std::move(mel)).first->second;
}

NormalizationStats fit_normalization(const DatasetManifest& manifest, FeatureStore& store) {
  if (manifest.utterances.empty()) throw Error("fit_normalization: empty manifest");
  std::vector<const MelSpectrogram*> mels;
  mels.reserve(manifest.utterances.size());
  for (const auto& u : manifest.utterances) mels.push_back(&store.get(manifest, u));
  return fit_normalization(mels);
}

}  // namespace itervc
