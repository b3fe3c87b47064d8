// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace itervc {

using json = nlohmann::json;

int TokenVocabulary::index_of(const std::string& tok) const {
  for (int i = 0; i < size(); ++i)
    if (tokens[i] == tok) return i;
  throw Error("token not in vocabulary: '" + tok + "'");
}

TokenVocabulary TokenVocabulary::letters(int vocab_size) {
  if (vocab_size < 1 || vocab_size > 26) throw ConfigError("vocab_size must be in [1, 26]");
  TokenVocabulary v;
  for (int i = 0; i < vocab_size; ++i) v.tokens.push_back(std::string(1, static_cast<char>('a' + i)));
  v.blank_index = vocab_size;
  return v;
}

std::string join_tokens(const Transcript& t) {
  std::string s;
  for (size_t i = 0; i < t.size(); ++i) {
    if (i) s += ' ';
    s += t[i];
  }
  return s;
}

Transcript split_tokens(const std::string& s) {
  Transcript t;
  std::istringstream ss(s);
  std::string tok;
  while (ss >> tok) t.push_back(tok);
  return t;
}

std::set<std::string> DatasetManifest::speakers() const {
  std::set<std::string> out;
  for (const auto& u : utterances) out.insert(u.speaker);
  return out;
}

void SyntheticCorpusSpec::validate() const {
  if (n_speakers < 2) throw ConfigError("corpus spec: n_speakers must be >= 2");
  if (n_utterances_per_speaker < 1)
    throw ConfigError("corpus spec: n_utterances_per_speaker must be >= 1");
  if (vocab_size < 4 || vocab_size > 26) throw ConfigError("corpus spec: vocab_size must be in [4, 26]");
  if (min_tokens < 1 || max_tokens < min_tokens)
    throw ConfigError("corpus spec: tokens_per_utterance range is degenerate");
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// One harmonic "formant" of a token's spectral envelope.
struct EnvBump {
  double center_hz;
  double bw_hz;
  double amp;
};

struct TokenPattern {
  std::vector<EnvBump> formants;
  double noise_center_log2;  // log2 Hz
  double noise_width_log2;
  std::vector<double> harmonic_phase;  // indexed by harmonic number
  std::vector<double> noise_phase;     // indexed by noise component
};

constexpr int kNoiseComponents = 64;
constexpr double kNoiseLoHz = 300.0;
constexpr double kNoiseHiHz = 11000.0;
constexpr double kMaxPartialHz = 11000.0;

TokenPattern make_token_pattern(uint64_t corpus_seed, int token_id) {
  Rng rng(derive_seed(corpus_seed, "token:" + std::to_string(token_id)));
  TokenPattern p;
  const int n_formants = 2;
  for (int i = 0; i < n_formants; ++i) {
    EnvBump b;
    b.center_hz = 350.0 * std::pow(2.0, rng.uniform(0.0, 4.6));  // ~350..8500 Hz
    b.bw_hz = rng.uniform(120.0, 260.0);
    b.amp = rng.uniform(0.5, 1.0);
    p.formants.push_back(b);
  }
  p.noise_center_log2 = rng.uniform(std::log2(800.0), std::log2(9000.0));
  p.noise_width_log2 = rng.uniform(0.3, 0.8);
  p.harmonic_phase.resize(160);
  for (auto& ph : p.harmonic_phase) ph = rng.uniform(0.0, 2.0 * kPi);
  p.noise_phase.resize(kNoiseComponents);
  for (auto& ph : p.noise_phase) ph = rng.uniform(0.0, 2.0 * kPi);
  return p;
}

double token_envelope(const TokenPattern& p, double f_hz) {
  double e = 0.02;
  for (const auto& b : p.formants) {
    const double d = (f_hz - b.center_hz) / b.bw_hz;
    e += b.amp * std::exp(-d * d);
  }
  return e;
}

double token_noise_envelope(const TokenPattern& p, double f_hz) {
  const double d = (std::log2(f_hz) - p.noise_center_log2) / p.noise_width_log2;
  return std::exp(-d * d);
}

struct SpeakerVoice {
  double f0_hz;
  std::vector<double> eq_center_log2;
  std::vector<double> eq_width_log2;
  std::vector<double> eq_gain_log2;
};

SpeakerVoice make_speaker_voice(uint64_t corpus_seed, int speaker_index) {
  Rng rng(derive_seed(corpus_seed, "speaker:" + std::to_string(speaker_index)));
  SpeakerVoice v;
  v.f0_hz = 110.0 * std::pow(2.0, rng.uniform(-0.6, 0.6));
  const int n_bumps = 5;
  for (int k = 0; k < n_bumps; ++k) {
    v.eq_center_log2.push_back(rng.uniform(std::log2(300.0), std::log2(10000.0)));
    v.eq_width_log2.push_back(rng.uniform(0.4, 1.1));
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v.eq_gain_log2.push_back(sign * rng.uniform(0.8, 2.2));
  }
  return v;
}

// Strictly positive gain curve, so the speaker transform is invertible.
double speaker_gain(const SpeakerVoice& v, double f_hz) {
  const double lf = std::log2(std::max(f_hz, 1.0));
  double g = 0.0;
  for (size_t k = 0; k < v.eq_gain_log2.size(); ++k) {
    const double d = (lf - v.eq_center_log2[k]) / v.eq_width_log2[k];
    g += v.eq_gain_log2[k] * std::exp(-d * d);
  }
  return std::pow(2.0, g);
}

std::vector<double> render_unit(const TokenPattern& tok, const SpeakerVoice& voice) {
  std::vector<double> unit(kUnitSamples, 0.0);
  const double sr = kSampleRate;

  const int n_harm = static_cast<int>(kMaxPartialHz / voice.f0_hz);
  for (int h = 1; h <= n_harm; ++h) {
    const double f = h * voice.f0_hz;
    const double amp = token_envelope(tok, f) * speaker_gain(voice, f);
    const double w = 2.0 * kPi * f / sr;
    const double ph = tok.harmonic_phase[static_cast<size_t>(h) % tok.harmonic_phase.size()];
    for (int n = 0; n < kUnitSamples; ++n) unit[n] += amp * std::sin(w * n + ph);
  }

  const double log_lo = std::log2(kNoiseLoHz), log_hi = std::log2(kNoiseHiHz);
  for (int j = 0; j < kNoiseComponents; ++j) {
    const double f = std::pow(2.0, log_lo + (log_hi - log_lo) * (j + 0.5) / kNoiseComponents);
    const double amp = 0.35 * token_noise_envelope(tok, f) * speaker_gain(voice, f);
    if (amp < 1e-5) continue;
    const double w = 2.0 * kPi * f / sr;
    const double ph = tok.noise_phase[j];
    for (int n = 0; n < kUnitSamples; ++n) unit[n] += amp * std::sin(w * n + ph);
  }

  // 5 ms fade at both edges; avoids clicks at token boundaries.
  const int ramp = 120;
  for (int n = 0; n < ramp; ++n) {
    const double g = static_cast<double>(n) / ramp;
    unit[n] *= g;
    unit[kUnitSamples - 1 - n] *= g;
  }

  double peak = 1e-9;
  for (double x : unit) peak = std::max(peak, std::abs(x));
  const double scale = 0.45 / peak;
  for (double& x : unit) x *= scale;
  return unit;
}

std::string speaker_name(uint64_t seed, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "spk%02d_%04x", index,
                static_cast<unsigned>(fnv1a64("corpus:" + std::to_string(seed)) & 0xffff));
  return std::string(buf);
}

// Speakers read non-overlapping material: each speaker's transcripts draw
// from a fixed subset of half the vocabulary, so many (token, speaker) pairs
// never occur in the real corpus. Conversion-based augmentation is what fills
// those holes.
std::vector<int> speaker_token_pool(const SyntheticCorpusSpec& spec, int speaker_index) {
  Rng rng(derive_seed(spec.seed, "spk-vocab:" + std::to_string(speaker_index)));
  std::vector<int> all(static_cast<size_t>(spec.vocab_size));
  for (int t = 0; t < spec.vocab_size; ++t) all[static_cast<size_t>(t)] = t;
  rng.shuffle(all);
  const int keep = std::max(2, spec.vocab_size / 2);
  all.resize(static_cast<size_t>(keep));
  std::sort(all.begin(), all.end());
  return all;
}

json utterance_to_json(const Utterance& u) {
  json j;
  j["id"] = u.id;
  if (!u.audio_path.empty()) j["audio"] = u.audio_path;
  if (!u.features_path.empty()) j["features"] = u.features_path;
  j["text"] = join_tokens(u.transcript);
  j["speaker"] = u.speaker;
  j["duration"] = u.duration_s;
  if (u.provenance) {
    j["source_id"] = u.provenance->source_id;
    j["reference_speaker"] = u.provenance->reference_speaker;
    j["vc_hash"] = u.provenance->vc_hash;
    j["iteration"] = u.provenance->iteration;
  }
  return j;
}

}  // namespace

Waveform synthesize_utterance(const SyntheticCorpusSpec& spec, int speaker_index,
                              const std::vector<int>& token_ids) {
  const SpeakerVoice voice = make_speaker_voice(spec.seed, speaker_index);
  Waveform wav;
  wav.sample_rate_hz = kSampleRate;
  wav.samples.reserve(token_ids.size() * kUnitSamples);
  std::vector<std::vector<double>> unit_cache(static_cast<size_t>(spec.vocab_size));
  for (int t : token_ids) {
    auto& unit = unit_cache[static_cast<size_t>(t)];
    if (unit.empty()) unit = render_unit(make_token_pattern(spec.seed, t), voice);
    wav.samples.insert(wav.samples.end(), unit.begin(), unit.end());
  }
  return wav;
}

DatasetManifest generate_synthetic_corpus(const SyntheticCorpusSpec& spec, const fs::path& out_dir,
                                          const std::string& tag) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  if (ec) throw Error("cannot create corpus directory " + (out_dir / "wav").string() + ": " + ec.message());

  DatasetManifest m;
  m.vocabulary = TokenVocabulary::letters(spec.vocab_size);
  m.sample_rate_hz = kSampleRate;
  m.tag = tag;
  m.base_dir = out_dir;

  for (int s = 0; s < spec.n_speakers; ++s) {
    const std::string spk = speaker_name(spec.seed, s);
    // Units rendered once per (speaker, token) and reused across utterances.
    std::vector<std::vector<double>> unit_cache(static_cast<size_t>(spec.vocab_size));
    const SpeakerVoice voice = make_speaker_voice(spec.seed, s);
    const std::vector<int> pool = speaker_token_pool(spec, s);
    for (int u = 0; u < spec.n_utterances_per_speaker; ++u) {
      Rng rng(derive_seed(spec.seed, "utt:" + std::to_string(s) + ":" + std::to_string(u)));
      const int len = spec.min_tokens +
                      static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.max_tokens - spec.min_tokens + 1)));
      Utterance utt;
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "%s_u%03d", spk.c_str(), u);
      utt.id = idbuf;
      utt.speaker = spk;
      Waveform wav;
      wav.sample_rate_hz = kSampleRate;
      for (int k = 0; k < len; ++k) {
        const int tok = pool[rng.uniform_int(pool.size())];
        utt.transcript.push_back(m.vocabulary.tokens[static_cast<size_t>(tok)]);
        auto& unit = unit_cache[static_cast<size_t>(tok)];
        if (unit.empty()) unit = render_unit(make_token_pattern(spec.seed, tok), voice);
        wav.samples.insert(wav.samples.end(), unit.begin(), unit.end());
      }
      utt.duration_s = static_cast<double>(wav.samples.size()) / kSampleRate;
      utt.audio_path = "wav/" + utt.id + ".wav";
      write_wav(out_dir / utt.audio_path, wav);
      m.utterances.push_back(std::move(utt));
    }
  }

  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  json header;
  header["schema"] = "itervc-manifest-v1";
  header["vocabulary"] = {{"tokens", manifest.vocabulary.tokens},
                          {"blank_index", manifest.vocabulary.blank_index}};
  header["sample_rate"] = manifest.sample_rate_hz;
  header["tag"] = manifest.tag;
  if (!manifest.config_hash.empty()) header["config_hash"] = manifest.config_hash;

  std::string out = header.dump() + "\n";
  for (const auto& u : manifest.utterances) out += utterance_to_json(u).dump() + "\n";
  write_file_atomic(path, out.data(), out.size());
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest: " + path.string());

  DatasetManifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");

  std::string line;
  int line_no = 0;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) +
                        ": invalid JSON: " + e.what());
    }
    try {
      if (line_no == 1) {
        if (j.value("schema", "") != "itervc-manifest-v1")
          throw ConfigError("manifest " + path.string() + " line 1: missing or unknown schema tag");
        m.vocabulary.tokens = j.at("vocabulary").at("tokens").get<std::vector<std::string>>();
        m.vocabulary.blank_index = j.at("vocabulary").at("blank_index").get<int>();
        if (m.vocabulary.blank_index != m.vocabulary.size())
          throw ConfigError("manifest " + path.string() + ": blank_index must equal vocabulary size");
        m.sample_rate_hz = j.at("sample_rate").get<int>();
        m.tag = j.at("tag").get<std::string>();
        m.config_hash = j.value("config_hash", "");
        continue;
      }
      Utterance u;
      u.id = j.at("id").get<std::string>();
      u.audio_path = j.value("audio", "");
      u.features_path = j.value("features", "");
      u.transcript = split_tokens(j.at("text").get<std::string>());
      u.speaker = j.at("speaker").get<std::string>();
      u.duration_s = j.at("duration").get<double>();
      if (j.contains("source_id")) {
        AugmentProvenance p;
        p.source_id = j.at("source_id").get<std::string>();
        p.reference_speaker = j.at("reference_speaker").get<std::string>();
        p.vc_hash = j.at("vc_hash").get<std::string>();
        p.iteration = j.at("iteration").get<int>();
        u.provenance = p;
      }
      if (!seen_ids.insert(u.id).second)
        throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) +
                          ": duplicate utterance id '" + u.id + "'");
      if (u.transcript.empty())
        throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) +
                          ": empty transcript for utterance '" + u.id + "'");
      for (const auto& tok : u.transcript) m.vocabulary.index_of(tok);
      if (u.duration_s <= 0)
        throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) +
                          ": nonpositive duration for utterance '" + u.id + "'");
      if (u.audio_path.empty() && u.features_path.empty())
        throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) +
                          ": utterance '" + u.id + "' has neither audio nor features");
      const std::string rel = u.audio_path.empty() ? u.features_path : u.audio_path;
      if (!fs::exists(m.base_dir / rel))
        throw Error("manifest " + path.string() + ": utterance '" + u.id + "' references missing file " +
                    (m.base_dir / rel).string());
      m.utterances.push_back(std::move(u));
    } catch (const json::exception& e) {
      throw ConfigError("manifest " + path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (line_no == 0) throw ConfigError("manifest " + path.string() + " is empty");
  return m;
}

std::pair<DatasetManifest, DatasetManifest> split_by_speaker(
    const DatasetManifest& manifest, const std::set<std::string>& held_out_speakers) {
  const auto all = manifest.speakers();
  if (held_out_speakers.empty()) throw Error("split_by_speaker: held-out speaker set is empty");
  for (const auto& s : held_out_speakers)
    if (!all.count(s)) throw Error("split_by_speaker: unknown speaker '" + s + "'");
  if (held_out_speakers.size() == all.size())
    throw Error("split_by_speaker: held-out set contains every speaker");

  DatasetManifest train = manifest, eval = manifest;
  train.utterances.clear();
  eval.utterances.clear();
  eval.tag = "validation";
  for (const auto& u : manifest.utterances) {
    (held_out_speakers.count(u.speaker) ? eval : train).utterances.push_back(u);
  }
  return {train, eval};
}

}  // namespace itervc
