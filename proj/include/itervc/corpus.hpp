// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/audio.hpp"
#include "itervc/common.hpp"

#include <optional>
#include <set>

namespace itervc {

struct TokenVocabulary {
  std::vector<std::string> tokens;  // lexical tokens, indices 0..V-1
  int blank_index = 0;              // CTC blank, one past the lexical tokens

  int size() const { return static_cast<int>(tokens.size()); }
  int index_of(const std::string& tok) const;  // throws on unknown token

  static TokenVocabulary letters(int vocab_size);

  bool operator==(const TokenVocabulary& o) const {
    return tokens == o.tokens && blank_index == o.blank_index;
  }
};

using Transcript = std::vector<std::string>;

std::string join_tokens(const Transcript& t);
Transcript split_tokens(const std::string& s);

// Provenance of augmented utterances (VC output). Absent on real data.
struct AugmentProvenance {
  std::string source_id;
  std::string reference_speaker;
  std::string vc_hash;
  int iteration = 0;
};

struct Utterance {
  std::string id;
  std::string audio_path;     // relative to the manifest directory; empty for mel-backed items
  std::string features_path;  // relative path to an .fmat matrix; empty for waveform-backed items
  Transcript transcript;
  std::string speaker;
  double duration_s = 0.0;
  std::optional<AugmentProvenance> provenance;

  bool mel_backed() const { return !features_path.empty(); }
};

struct DatasetManifest {
  std::vector<Utterance> utterances;
  TokenVocabulary vocabulary;
  int sample_rate_hz = 24000;
  std::string tag = "target";  // one of {base, target, augmented, validation}
  std::string config_hash;     // hash of the producing run's config, when known
  fs::path base_dir;           // directory the relative paths resolve against

  std::set<std::string> speakers() const;
  fs::path resolve(const std::string& rel) const { return base_dir / rel; }
};

struct SyntheticCorpusSpec {
  int n_speakers = 10;
  int n_utterances_per_speaker = 40;
  int vocab_size = 12;
  int min_tokens = 4;
  int max_tokens = 8;
  uint64_t seed = 1;

  void validate() const;
};

// Token unit length in samples at 24 kHz (~150 ms).
inline constexpr int kUnitSamples = 3600;
inline constexpr int kSampleRate = 24000;

// Renders one utterance of the synthetic corpus. Each token is a fixed unit
// signal (harmonic envelope + noise band, keyed by the corpus seed); a speaker
// is a fixed positive spectral gain curve plus a pitch offset.
Waveform synthesize_utterance(const SyntheticCorpusSpec& spec, int speaker_index,
                              const std::vector<int>& token_ids);

DatasetManifest generate_synthetic_corpus(const SyntheticCorpusSpec& spec, const fs::path& out_dir,
                                          const std::string& tag = "target");

void save_manifest(const DatasetManifest& manifest, const fs::path& path);
DatasetManifest load_manifest(const fs::path& path);

std::pair<DatasetManifest, DatasetManifest> split_by_speaker(
    const DatasetManifest& manifest, const std::set<std::string>& held_out_speakers);

}  // namespace itervc
