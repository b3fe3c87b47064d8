// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/audio.hpp"
#include "itervc/common.hpp"
#include "itervc/corpus.hpp"

#include <unordered_map>

namespace itervc {

struct FeatureConfig {
  int n_fft = 1024;
  int window = 1024;
  int hop = 256;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 12000.0;
  double log_floor = 1e-5;
  int sample_rate_hz = 24000;

  void validate() const;
  std::string hash() const;
};

struct MelSpectrogram {
  Mat data;  // frames x n_mels, log-mel magnitude
  double frame_hop_s = 256.0 / 24000.0;
  int sample_rate_hz = 24000;

  Eigen::Index frames() const { return data.rows(); }
  Eigen::Index bins() const { return data.cols(); }
};

// Center frequencies (Hz) of the triangular mel filters; n_mels entries.
std::vector<double> mel_filter_centers_hz(const FeatureConfig& config);

// Mel filterbank as an (n_fft/2+1) x n_mels matrix of triangle weights.
Mat mel_filterbank(const FeatureConfig& config);

MelSpectrogram melspectrogram(const Waveform& wav, const FeatureConfig& config);

struct NormalizationStats {
  RowVec mean;  // 1 x n_mels
  RowVec std;   // 1 x n_mels, strictly positive
};

NormalizationStats fit_normalization(const std::vector<const MelSpectrogram*>& mels);
MelSpectrogram normalize(const MelSpectrogram& mel, const NormalizationStats& stats);
MelSpectrogram denormalize(const MelSpectrogram& mel, const NormalizationStats& stats);

// Simple binary matrix container: magic, shape header, row-major float32.
void save_fmat(const fs::path& path, const Mat& m);
Mat load_fmat(const fs::path& path);

// Per-utterance feature access with an in-memory memo and an optional on-disk
// cache keyed by (utterance id, feature-config hash). Honors ITERVC_CACHE.
class FeatureStore {
 public:
  FeatureStore(FeatureConfig config, fs::path cache_root);

  // cache_root from ITERVC_CACHE, or empty (memory-only) if unset.
  static fs::path default_cache_root();

  const MelSpectrogram& get(const DatasetManifest& manifest, const Utterance& utt);
  const FeatureConfig& config() const { return config_; }

 private:
  FeatureConfig config_;
  fs::path cache_root_;
  std::unordered_map<std::string, MelSpectrogram> memo_;
};

NormalizationStats fit_normalization(const DatasetManifest& manifest, FeatureStore& store);

}  // namespace itervc
