// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "itervc/audio.hpp"
#include "itervc/config.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "test_support.hpp"

#include <cmath>
#include <fstream>

using namespace itervc;
using test::TempDir;

namespace {

SyntheticCorpusSpec tiny_spec(uint64_t seed = 7) {
  SyntheticCorpusSpec spec;
  spec.n_speakers = 3;
  spec.n_utterances_per_speaker = 2;
  spec.vocab_size = 5;
  spec.min_tokens = 3;
  spec.max_tokens = 5;
  spec.seed = seed;
  return spec;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

}  // namespace

TEST_CASE("wav round-trips 16-bit PCM") {
  TempDir tmp("wav");
  Waveform wav;
  wav.sample_rate_hz = 24000;
  Rng rng(5);
  for (int i = 0; i < 5000; ++i) wav.samples.push_back(0.8 * std::sin(0.01 * i) + 0.05 * rng.normal());
  write_wav(tmp.path() / "x.wav", wav);
  const Waveform back = read_wav(tmp.path() / "x.wav");
  REQUIRE(back.samples.size() == wav.samples.size());
  CHECK(back.sample_rate_hz == 24000);
  for (size_t i = 0; i < wav.samples.size(); i += 997)
    CHECK(back.samples[i] == doctest::Approx(std::clamp(wav.samples[i], -1.0, 1.0)).epsilon(1e-4));
}

TEST_CASE("synthetic corpus has the forced counts") {
  TempDir tmp("gen");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  CHECK(m.utterances.size() == 6);
  CHECK(m.speakers().size() == 3);
  CHECK(m.vocabulary.size() == 5);
  CHECK(m.vocabulary.blank_index == 5);
  for (const auto& u : m.utterances) {
    CHECK(!u.transcript.empty());
    CHECK(fs::exists(m.resolve(u.audio_path)));
    // Audio length consistent with the declared duration within one hop.
    const Waveform wav = read_wav(m.resolve(u.audio_path));
    CHECK(std::abs(static_cast<double>(wav.samples.size()) - u.duration_s * 24000.0) <= 256.0);
    CHECK(u.duration_s == doctest::Approx(0.15 * u.transcript.size()));
  }
}

TEST_CASE("regeneration with the same seed is byte-identical") {
  TempDir tmp("det");
  generate_synthetic_corpus(tiny_spec(), tmp.path() / "a");
  generate_synthetic_corpus(tiny_spec(), tmp.path() / "b");
  CHECK(slurp(tmp.path() / "a/manifest.jsonl") == slurp(tmp.path() / "b/manifest.jsonl"));
  const DatasetManifest m = load_manifest(tmp.path() / "a/manifest.jsonl");
  for (const auto& u : m.utterances) {
    CHECK(file_hash(tmp.path() / "a" / u.audio_path) == file_hash(tmp.path() / "b" / u.audio_path));
  }
}

TEST_CASE("different seeds give different transcripts") {
  TempDir tmp("seeds");
  const DatasetManifest a = generate_synthetic_corpus(tiny_spec(7), tmp.path() / "a");
  const DatasetManifest b = generate_synthetic_corpus(tiny_spec(8), tmp.path() / "b");
  REQUIRE(a.utterances.size() == b.utterances.size());
  bool any_differ = false;
  for (size_t i = 0; i < a.utterances.size(); ++i)
    any_differ = any_differ || (a.utterances[i].transcript != b.utterances[i].transcript);
  CHECK(any_differ);
}

TEST_CASE("manifest save/load round-trips all fields") {
  TempDir tmp("roundtrip");
  DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  m.utterances[0].provenance = AugmentProvenance{"src1", "spkX", "deadbeef", 2};
  save_manifest(m, tmp.path() / "c/manifest.jsonl");
  const DatasetManifest back = load_manifest(tmp.path() / "c/manifest.jsonl");
  REQUIRE(back.utterances.size() == m.utterances.size());
  CHECK(back.vocabulary == m.vocabulary);
  CHECK(back.sample_rate_hz == m.sample_rate_hz);
  CHECK(back.tag == m.tag);
  for (size_t i = 0; i < m.utterances.size(); ++i) {
    CHECK(back.utterances[i].id == m.utterances[i].id);
    CHECK(back.utterances[i].transcript == m.utterances[i].transcript);
    CHECK(back.utterances[i].speaker == m.utterances[i].speaker);
    CHECK(back.utterances[i].duration_s == m.utterances[i].duration_s);
  }
  REQUIRE(back.utterances[0].provenance.has_value());
  CHECK(back.utterances[0].provenance->source_id == "src1");
  CHECK(back.utterances[0].provenance->vc_hash == "deadbeef");
  CHECK(back.utterances[0].provenance->iteration == 2);
}

TEST_CASE("manifest with a duplicate id is rejected naming the id") {
  TempDir tmp("dup");
  DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  m.utterances[1].id = m.utterances[0].id;
  save_manifest(m, tmp.path() / "c/manifest.jsonl");
  CHECK_THROWS_WITH_AS(load_manifest(tmp.path() / "c/manifest.jsonl"),
                       doctest::Contains(m.utterances[0].id.c_str()), ConfigError);
}

TEST_CASE("manifest referencing missing audio is rejected naming the utterance") {
  TempDir tmp("missing");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  fs::remove(m.resolve(m.utterances[2].audio_path));
  CHECK_THROWS_WITH_AS(load_manifest(tmp.path() / "c/manifest.jsonl"),
                       doctest::Contains(m.utterances[2].id.c_str()), Error);
}

TEST_CASE("manifest parse errors carry the line number") {
  TempDir tmp("badline");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  (void)m;
  std::string text = slurp(tmp.path() / "c/manifest.jsonl");
  text += "{not json\n";
  write_text_file(tmp.path() / "c/manifest.jsonl", text);
  CHECK_THROWS_WITH_AS(load_manifest(tmp.path() / "c/manifest.jsonl"), doctest::Contains("line 8"),
                       ConfigError);
}

TEST_CASE("split_by_speaker partitions the corpus with disjoint speakers") {
  TempDir tmp("split");
  SyntheticCorpusSpec spec = tiny_spec();
  spec.n_speakers = 9;
  const DatasetManifest m = generate_synthetic_corpus(spec, tmp.path() / "c");

  const auto speakers = m.speakers();
  std::set<std::string> held;
  auto it = speakers.begin();
  held.insert(*it++);
  held.insert(*it);

  const auto [train, eval] = split_by_speaker(m, held);
  CHECK(train.speakers().size() == 7);
  CHECK(eval.speakers().size() == 2);
  CHECK(train.utterances.size() + eval.utterances.size() == m.utterances.size());
  CHECK(eval.tag == "validation");
  for (const auto& s : train.speakers()) CHECK(!held.count(s));
  for (const auto& s : eval.speakers()) CHECK(held.count(s));

  // Random held-out sets keep the partition property.
  Rng rng(3);
  std::vector<std::string> all(speakers.begin(), speakers.end());
  for (int trial = 0; trial < 20; ++trial) {
    std::set<std::string> h;
    const size_t k = 1 + rng.uniform_int(all.size() - 1);
    while (h.size() < k) h.insert(all[rng.uniform_int(all.size())]);
    const auto [tr, ev] = split_by_speaker(m, h);
    REQUIRE(tr.utterances.size() + ev.utterances.size() == m.utterances.size());
    std::set<std::string> ids;
    for (const auto& u : tr.utterances) ids.insert(u.id);
    for (const auto& u : ev.utterances) REQUIRE(ids.insert(u.id).second);
  }
}

TEST_CASE("split_by_speaker rejects bad held-out sets") {
  TempDir tmp("splitbad");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  CHECK_THROWS_AS(split_by_speaker(m, {}), Error);
  CHECK_THROWS_AS(split_by_speaker(m, m.speakers()), Error);
  CHECK_THROWS_AS(split_by_speaker(m, {"nope"}), Error);
}

TEST_CASE("corpus spec validation") {
  SyntheticCorpusSpec spec = tiny_spec();
  spec.n_speakers = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = tiny_spec();
  spec.max_tokens = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = tiny_spec();
  spec.vocab_size = 30;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("melspectrogram of silence is the log floor everywhere") {
  FeatureConfig cfg;
  Waveform wav;
  wav.samples.assign(4096, 0.0);
  const MelSpectrogram mel = melspectrogram(wav, cfg);
  CHECK(mel.bins() == 80);
  CHECK((mel.data.array() == std::log(cfg.log_floor)).all());
}

TEST_CASE("melspectrogram frame count follows the hop formula") {
  FeatureConfig cfg;
  Waveform wav;
  wav.samples.assign(static_cast<size_t>(cfg.window + 3 * cfg.hop), 0.0);
  CHECK(melspectrogram(wav, cfg).frames() == 4);
}

TEST_CASE("pure 440 Hz tone lands in the mel bin containing 440 Hz") {
  FeatureConfig cfg;
  Waveform wav;
  for (int i = 0; i < 24000; ++i)
    wav.samples.push_back(0.5 * std::sin(2.0 * M_PI * 440.0 * i / 24000.0));
  const MelSpectrogram mel = melspectrogram(wav, cfg);

  // Independent oracle: nearest filter center frequency by the mel formula.
  const auto centers = mel_filter_centers_hz(cfg);
  int expected = 0;
  for (size_t i = 0; i < centers.size(); ++i)
    if (std::abs(centers[i] - 440.0) < std::abs(centers[static_cast<size_t>(expected)] - 440.0))
      expected = static_cast<int>(i);

  Eigen::Index argmax;
  mel.data.row(mel.frames() / 2).maxCoeff(&argmax);
  CHECK(static_cast<int>(argmax) == expected);
}

TEST_CASE("prepending one hop of silence shifts frames by exactly one") {
  FeatureConfig cfg;
  Rng rng(11);
  Waveform wav;
  for (int i = 0; i < 6000; ++i) wav.samples.push_back(0.3 * rng.normal());
  const MelSpectrogram a = melspectrogram(wav, cfg);

  Waveform shifted;
  shifted.samples.assign(static_cast<size_t>(cfg.hop), 0.0);
  shifted.samples.insert(shifted.samples.end(), wav.samples.begin(), wav.samples.end());
  const MelSpectrogram b = melspectrogram(shifted, cfg);

  REQUIRE(b.frames() == a.frames() + 1);
  CHECK((b.data.bottomRows(a.frames()) - a.data).array().abs().maxCoeff() < 1e-6);
}

TEST_CASE("melspectrogram rejects short or non-finite input") {
  FeatureConfig cfg;
  Waveform wav;
  wav.samples.assign(100, 0.0);
  CHECK_THROWS_AS(melspectrogram(wav, cfg), Error);
  wav.samples.assign(2048, 0.0);
  wav.samples[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(melspectrogram(wav, cfg), Error);
}

TEST_CASE("normalization round-trips and centers the corpus") {
  TempDir tmp("norm");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  FeatureStore store(FeatureConfig{}, "");
  const NormalizationStats stats = fit_normalization(m, store);

  const MelSpectrogram& mel = store.get(m, m.utterances[0]);
  const MelSpectrogram back = denormalize(normalize(mel, stats), stats);
  CHECK((back.data - mel.data).array().abs().maxCoeff() < 1e-6);

  RowVec sum = RowVec::Zero(80);
  long frames = 0;
  for (const auto& u : m.utterances) {
    const MelSpectrogram n = normalize(store.get(m, u), stats);
    sum += n.data.colwise().sum();
    frames += n.frames();
  }
  CHECK((sum / frames).array().abs().maxCoeff() < 1e-5);
}

TEST_CASE("fit_normalization rejects constant bins naming them") {
  MelSpectrogram a, b;
  a.data = Mat::Ones(10, 3);
  b.data = Mat::Ones(12, 3);
  a.data.col(1).setRandom();
  b.data.col(1).setRandom();
  a.data.col(2).setRandom();
  b.data.col(2).setRandom();
  CHECK_THROWS_WITH_AS(fit_normalization({&a, &b}), doctest::Contains("bin 0"), Error);
}

TEST_CASE("fmat round-trips at float precision") {
  TempDir tmp("fmat");
  Rng rng(3);
  Mat m(7, 5);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 5; ++c) m(r, c) = rng.normal();
  save_fmat(tmp.path() / "m.fmat", m);
  const Mat back = load_fmat(tmp.path() / "m.fmat");
  REQUIRE(back.rows() == 7);
  REQUIRE(back.cols() == 5);
  CHECK((back - m).array().abs().maxCoeff() < 1e-6);
}

TEST_CASE("feature store caches by config hash and quantizes consistently") {
  TempDir tmp("store");
  const DatasetManifest m = generate_synthetic_corpus(tiny_spec(), tmp.path() / "c");
  FeatureStore cold(FeatureConfig{}, tmp.path() / "cache");
  const Mat first = cold.get(m, m.utterances[0]).data;
  CHECK(fs::exists(tmp.path() / "cache" / FeatureConfig{}.hash() / (m.utterances[0].id + ".fmat")));
  FeatureStore warm(FeatureConfig{}, tmp.path() / "cache");
  const Mat second = warm.get(m, m.utterances[0]).data;
  CHECK((first - second).cwiseAbs().maxCoeff() == 0.0);
  FeatureStore memory_only(FeatureConfig{}, "");
  const Mat third = memory_only.get(m, m.utterances[0]).data;
  CHECK((first - third).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("toml subset parser handles sections, scalars and arrays") {
  const auto j = parse_toml_subset(
      "# comment\nseed = 9\n[asr]\nlearning_rate = 0.0025  # inline\nmax_steps = 100\n"
      "[corpus]\nheld_out_speakers = 2\ngenerate = true\nmanifest = \"a b.jsonl\"\n",
      "test");
  CHECK(j.at("seed") == 9);
  CHECK(j.at("asr").at("learning_rate") == 0.0025);
  CHECK(j.at("asr").at("max_steps") == 100);
  CHECK(j.at("corpus").at("generate") == true);
  CHECK(j.at("corpus").at("manifest") == "a b.jsonl");
}

TEST_CASE("config rejects unknown keys with their path") {
  TempDir tmp("cfg");
  write_text_file(tmp.path() / "c.toml", "[asr]\nlerning_rate = 0.1\n");
  CHECK_THROWS_WITH_AS(ExperimentConfig::load(tmp.path() / "c.toml"),
                       doctest::Contains("asr.lerning_rate"), ConfigError);
}

TEST_CASE("config overrides apply and change the hash") {
  TempDir tmp("cfg2");
  write_text_file(tmp.path() / "c.toml", "seed = 5\n");
  const auto base = ExperimentConfig::load(tmp.path() / "c.toml");
  const auto tuned = ExperimentConfig::load(tmp.path() / "c.toml", {"asr.max_steps=42", "seed=6"});
  CHECK(base.asr_train_config().max_steps == 5000);
  CHECK(tuned.asr_train_config().max_steps == 42);
  CHECK(tuned.seed() == 6);
  CHECK(base.hash() != tuned.hash());
  CHECK(base.hash() == ExperimentConfig::load(tmp.path() / "c.toml").hash());
}

TEST_CASE("config defaults carry the documented values") {
  const ExperimentConfig cfg;
  CHECK(cfg.asr_train_config().learning_rate == 0.0025);
  CHECK(cfg.asr_train_config().finetune_learning_rate == 0.00025);
  CHECK(cfg.asr_train_config().ratio_base == 1);
  CHECK(cfg.asr_train_config().ratio_target == 3);
  CHECK(cfg.vc_train_config().lambda_asr == 100.0);
  CHECK(cfg.orchestrator_config().epsilon == 0.01);
  CHECK(cfg.corpus_spec().n_speakers == 10);
  CHECK(cfg.corpus_spec().n_utterances_per_speaker == 40);
  CHECK(cfg.feature_config().n_mels == 80);
}
