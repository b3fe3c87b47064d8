// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "itervc/augment.hpp"
#include "itervc/checkpoint.hpp"
#include "itervc/config.hpp"
#include "itervc/conversion_eval.hpp"
#include "itervc/orchestrator.hpp"
#include "test_support.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>

using namespace itervc;
using test::TempDir;

namespace {

// A configuration small enough that a full 2-iteration run takes seconds.
nlohmann::json tiny_tree(uint64_t seed) {
  nlohmann::json j;
  j["seed"] = seed;
  j["corpus"] = {{"n_speakers", 5}, {"n_utterances_per_speaker", 4}, {"vocab_size", 6},
                 {"min_tokens", 3},  {"max_tokens", 4},              {"held_out_speakers", 1}};
  j["base_corpus"] = {{"n_speakers", 2}, {"n_utterances_per_speaker", 3}};
  j["asr"] = {{"encoder_width", 16}, {"max_steps", 25},      {"warmup_steps", 5},
              {"finetune_steps", 10}, {"eval_every", 25},    {"batch_items", 2}};
  j["speaker"] = {{"width", 16}, {"embed_dim", 8}, {"steps", 30}, {"batch_items", 4}};
  j["vc"] = {{"channels", 12}, {"steps", 12}, {"batch_items", 2}, {"eval_every", 6}};
  j["orchestrator"] = {{"max_iterations", 1}, {"eval_pairs", 4}, {"epsilon", 1e-9}, {"abs_epsilon", 1e-9}};
  return j;
}

struct AugmentFixture {
  TempDir tmp{"augment"};
  DatasetManifest train;
  SpeakerEncoder spk;
  VcModel vc;
  FeatureConfig features;

  AugmentFixture() {
    SyntheticCorpusSpec spec;
    spec.n_speakers = 5;
    spec.n_utterances_per_speaker = 3;
    spec.vocab_size = 6;
    spec.min_tokens = 3;
    spec.max_tokens = 4;
    spec.seed = 91;
    train = generate_synthetic_corpus(spec, tmp.path() / "c");

    SpeakerTrainOptions sopt;
    sopt.model.width = 16;
    sopt.model.embed_dim = 8;
    sopt.train.steps = 30;
    sopt.train.batch_items = 4;
    sopt.train.seed = 2;
    sopt.features = features;
    spk = train_speaker_encoder(train, sopt);

    vc.cfg.channels = 12;
    vc.cfg.embed_dim = spk.cfg.embed_dim;
    FeatureStore store(features, "");
    vc.stats = fit_normalization(train, store);
    Rng rng(4);
    vc.net = VcNet::init(vc.cfg, rng);
    vc.asr_hash = "test-asr";
    for (const auto& s : train.speakers()) vc.speakers.push_back(s);
  }
};

AugmentFixture& augment_fixture() {
  static AugmentFixture f;
  return f;
}

}  // namespace

TEST_CASE("augment_dataset produces pairs_per_utterance converted items per source") {
  auto& f = augment_fixture();
  AugmentationPolicy policy;
  policy.pairs_per_utterance = 2;
  policy.seed = 11;
  const DatasetManifest aug =
      augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "aug2", f.features);
  CHECK(aug.utterances.size() == 2 * f.train.utterances.size());
  CHECK(aug.tag == "augmented");

  std::map<std::string, const Utterance*> sources;
  for (const auto& u : f.train.utterances) sources[u.id] = &u;
  for (const auto& u : aug.utterances) {
    REQUIRE(u.provenance.has_value());
    const Utterance* src = sources.at(u.provenance->source_id);
    CHECK(u.transcript == src->transcript);           // transcripts preserved verbatim
    CHECK(u.speaker != src->speaker);                 // no source leakage
    CHECK(u.speaker == u.provenance->reference_speaker);
    CHECK(u.provenance->vc_hash == f.vc.hash());
    CHECK(u.mel_backed());
    CHECK(fs::exists(aug.resolve(u.features_path)));
  }
}

TEST_CASE("augmented items load back as mels with source transcripts") {
  auto& f = augment_fixture();
  AugmentationPolicy policy;
  policy.seed = 12;
  const DatasetManifest aug =
      augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "aug1", f.features);
  const DatasetManifest loaded = load_manifest(f.tmp.path() / "aug1" / "manifest.jsonl");
  REQUIRE(loaded.utterances.size() == aug.utterances.size());
  FeatureStore store(f.features, "");
  const MelSpectrogram& mel = store.get(loaded, loaded.utterances[0]);
  CHECK(mel.bins() == 80);
  CHECK(mel.frames() > 10);
}

TEST_CASE("augmentation is deterministic in (policy, seed, model)") {
  auto& f = augment_fixture();
  AugmentationPolicy policy;
  policy.seed = 13;
  const DatasetManifest a =
      augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "det_a", f.features);
  const DatasetManifest b =
      augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "det_b", f.features);
  REQUIRE(a.utterances.size() == b.utterances.size());
  for (size_t i = 0; i < a.utterances.size(); ++i) {
    CHECK(a.utterances[i].speaker == b.utterances[i].speaker);
    CHECK(file_hash(a.resolve(a.utterances[i].features_path)) ==
          file_hash(b.resolve(b.utterances[i].features_path)));
  }
}

TEST_CASE("seed reuse with a different policy is refused") {
  auto& f = augment_fixture();
  AugmentationPolicy policy;
  policy.seed = 14;
  augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "guard", f.features);
  // Same directory, same seed, same policy: idempotent regeneration.
  augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "guard", f.features);
  // Same seed, different policy: refused.
  AugmentationPolicy changed = policy;
  changed.pairs_per_utterance = 3;
  CHECK_THROWS_WITH_AS(
      augment_dataset(f.vc, f.train, f.spk, changed, f.tmp.path() / "guard", f.features),
      doctest::Contains("refusing"), Error);
}

TEST_CASE("augmentation requires the VC to cover the train speakers") {
  auto& f = augment_fixture();
  VcModel narrow = f.vc;
  narrow.speakers.pop_back();
  AugmentationPolicy policy;
  CHECK_THROWS_AS(augment_dataset(narrow, f.train, f.spk, policy, f.tmp.path() / "cover", f.features),
                  Error);
}

TEST_CASE("reference speakers are sampled uniformly over non-source speakers") {
  auto& f = augment_fixture();
  AugmentationPolicy policy;
  policy.pairs_per_utterance = 70;  // 15 sources x 70 = 1050 draws
  policy.seed = 15;
  const DatasetManifest aug =
      augment_dataset(f.vc, f.train, f.spk, policy, f.tmp.path() / "chi2", f.features);
  REQUIRE(aug.utterances.size() == 1050);

  // Chi-squared against uniform over each source speaker's 4 candidates,
  // pooled over the 5 source speakers: df = 5*(4-1) = 15.
  std::map<std::string, std::string> source_speaker;
  for (const auto& u : f.train.utterances) source_speaker[u.id] = u.speaker;
  std::map<std::string, std::map<std::string, int>> counts;
  std::map<std::string, int> totals;
  for (const auto& u : aug.utterances) {
    const std::string& src_speaker = source_speaker.at(u.provenance->source_id);
    counts[src_speaker][u.speaker]++;
    totals[src_speaker]++;
  }
  double chi2 = 0.0;
  int df = 0;
  for (const auto& [src, refs] : counts) {
    const double expected = totals[src] / 4.0;
    double seen_sum = 0.0;
    for (const auto& [ref, n] : refs) {
      chi2 += (n - expected) * (n - expected) / expected;
      seen_sum += n;
    }
    df += 3;
    CHECK(seen_sum == totals[src]);
    CHECK(refs.size() == 4);
  }
  REQUIRE(df == 15);
  CHECK(chi2 < 30.578);  // 0.99 quantile of chi2(15): p > 0.01
}

TEST_CASE("has_converged implements the relative-or-absolute rule") {
  // Relative rule on the published values.
  CHECK_FALSE(has_converged({27.6, 26.2}, 0.01));
  CHECK(has_converged({25.8, 25.7}, 0.01));
  CHECK(has_converged({25.0, 25.5}, 0.01));  // regression converges

  // Full trajectories stop after iteration 3 and not before.
  const std::vector<double> speech_run = {27.6, 26.2, 25.8, 25.7};
  const std::vector<double> singing_run = {6.7, 6.0, 5.0, 4.9};
  for (const auto& traj : {speech_run, singing_run}) {
    for (size_t k = 2; k <= 4; ++k) {
      const std::vector<double> prefix(traj.begin(), traj.begin() + static_cast<long>(k));
      CHECK(has_converged(prefix, 0.01) == (k == 4));
    }
  }

  CHECK_THROWS_AS(has_converged({27.6}, 0.01), Error);
  CHECK(has_converged({0.0, 0.0}, 0.01));
}

TEST_CASE("iteration records round-trip through the history file") {
  TempDir tmp("hist");
  IterationRecord r;
  r.i = 0;
  r.asr_checkpoint = "iter_000/asr.ckpt";
  r.asr_hash = "h1";
  r.vc_checkpoint = "iter_000/vc.ckpt";
  r.vc_hash = "h2";
  r.metrics = {12.5, 30.25, 0.77};
  r.config_hash = "c";
  append_history(tmp.path() / "history.jsonl", r);
  IterationRecord r1 = r;
  r1.i = 1;
  r1.augmented_manifest = "iter_001/augmented/manifest.jsonl";
  r1.augmented_hash = "h3";
  append_history(tmp.path() / "history.jsonl", r1);

  const IterationHistory h = load_history(tmp.path() / "history.jsonl");
  REQUIRE(h.records.size() == 2);
  CHECK(h.records[0].metrics.asr_val_wer == 12.5);
  CHECK(h.records[0].augmented_manifest.empty());
  CHECK(h.records[1].augmented_hash == "h3");
}

TEST_CASE("run_iterations with max_iterations = 0 produces exactly record 0") {
  TempDir tmp("it0");
  nlohmann::json tree = tiny_tree(51);
  tree["orchestrator"]["max_iterations"] = 0;
  const auto config = ExperimentConfig::from_json(tree);
  const IterationHistory h = run_iterations(config, tmp.path() / "run");
  REQUIRE(h.records.size() == 1);
  CHECK(h.records[0].i == 0);
  CHECK(h.records[0].augmented_manifest.empty());
  CHECK(fs::exists(tmp.path() / "run/iter_000/asr.ckpt"));
  CHECK(fs::exists(tmp.path() / "run/iter_000/vc.ckpt"));
  CHECK(fs::exists(tmp.path() / "run/history.jsonl"));
  CHECK(!fs::exists(tmp.path() / "run/lock"));
}

TEST_CASE("full tiny run: records, provenance chain, report table") {
  TempDir tmp("it1");
  const auto config = ExperimentConfig::from_json(tiny_tree(52));
  const IterationHistory h = run_iterations(config, tmp.path() / "run");
  REQUIRE(h.records.size() == 2);
  CHECK(h.records[1].i == 1);
  CHECK(!h.records[1].augmented_manifest.empty());

  verify_history(tmp.path() / "run");

  const std::string table = format_history_table(tmp.path() / "run");
  CHECK(table.find("Iteration") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 4);  // header + rule + 2 rows

  // Hash of every artifact the run produced carries the config hash.
  const AsrModel a = load_asr_model(tmp.path() / "run/iter_000/asr.ckpt");
  (void)a;
  const Checkpoint ck = load_checkpoint(tmp.path() / "run/iter_000/asr.ckpt");
  CHECK(ck.header.at("config_hash").get<std::string>() == config.hash());
  const DatasetManifest aug = load_manifest(tmp.path() / "run" / h.records[1].augmented_manifest);
  CHECK(aug.utterances.size() > 0);
}

TEST_CASE("resume reproduces an uninterrupted run bit-for-bit") {
  TempDir tmp("resume");
  const auto config = ExperimentConfig::from_json(tiny_tree(53));

  // Uninterrupted reference run.
  run_iterations(config, tmp.path() / "full");

  // Interrupted run: stop after record 0, then resume to completion.
  {
    nlohmann::json t0 = tiny_tree(53);
    const auto cfg0 = ExperimentConfig::from_json(t0);
    nlohmann::json snapshot = cfg0.tree();
    // First leg: run with max_iterations temporarily reached via a copy of the
    // config is not allowed (config hash must match), so emulate a crash by
    // running record 0 only through a separate directory layout.
    (void)snapshot;
  }
  // Emulate the crash: run the full config but kill after record 0 by running
  // max_iterations=0 with the same seed in a fresh dir is a different config.
  // Instead: copy the finished run's directory, truncate history to record 0,
  // delete iteration 1 artifacts, and resume.
  fs::create_directories(tmp.path() / "resumed");
  fs::copy(tmp.path() / "full", tmp.path() / "resumed", fs::copy_options::recursive);
  {
    const IterationHistory h = load_history(tmp.path() / "resumed/history.jsonl");
    write_text_file(tmp.path() / "resumed/history.jsonl", to_json_line(h.records[0]) + "\n");
    fs::remove_all(tmp.path() / "resumed/iter_001");
  }
  const IterationHistory resumed = run_iterations(config, tmp.path() / "resumed", true);
  (void)resumed;

  CHECK(read_text_file(tmp.path() / "full/history.jsonl") ==
        read_text_file(tmp.path() / "resumed/history.jsonl"));
  CHECK(file_hash(tmp.path() / "full/iter_001/asr.ckpt") ==
        file_hash(tmp.path() / "resumed/iter_001/asr.ckpt"));
  CHECK(file_hash(tmp.path() / "full/iter_001/vc.ckpt") ==
        file_hash(tmp.path() / "resumed/iter_001/vc.ckpt"));
}

TEST_CASE("identical configs and seeds give identical history files") {
  TempDir tmp("det2");
  const auto config = ExperimentConfig::from_json(tiny_tree(54));
  run_iterations(config, tmp.path() / "a");
  run_iterations(config, tmp.path() / "b");
  CHECK(read_text_file(tmp.path() / "a/history.jsonl") == read_text_file(tmp.path() / "b/history.jsonl"));
}

TEST_CASE("a failing sub-step leaves the partial history intact; resume completes it") {
  TempDir tmp("crash");
  const auto config = ExperimentConfig::from_json(tiny_tree(55));

  // Poison iteration 1's augmentation directory so the run fails mid-loop.
  const fs::path run_dir = tmp.path() / "run";
  fs::create_directories(run_dir / "iter_001/augmented");
  write_text_file(run_dir / "iter_001/augmented/policy.json",
                  nlohmann::json({{"seed", derive_seed(config.seed(), "augment:1")},
                                  {"policy_fingerprint", "other"},
                                  {"vc_hash", "other"}})
                          .dump() +
                      "\n");
  CHECK_THROWS_AS(run_iterations(config, run_dir), Error);
  const IterationHistory partial = load_history(run_dir / "history.jsonl");
  REQUIRE(partial.records.size() == 1);  // record 0 survived the failure

  fs::remove(run_dir / "iter_001/augmented/policy.json");
  const IterationHistory done = run_iterations(config, run_dir, true);
  CHECK(done.records.size() == 2);
  verify_history(run_dir);
}

TEST_CASE("a second orchestrator cannot enter a locked directory") {
  TempDir tmp("lock");
  fs::create_directories(tmp.path() / "run");
  write_text_file(tmp.path() / "run/lock", std::to_string(::getpid()) + "\n");
  const auto config = ExperimentConfig::from_json(tiny_tree(56));
  CHECK_THROWS_WITH_AS(run_iterations(config, tmp.path() / "run"), doctest::Contains("locked"),
                       Error);
}

TEST_CASE("separate metric encoder is trained when requested") {
  TempDir tmp("metricenc");
  nlohmann::json tree = tiny_tree(58);
  tree["orchestrator"]["max_iterations"] = 0;
  tree["speaker"]["separate_metric_encoder"] = true;
  const auto config = ExperimentConfig::from_json(tree);
  run_iterations(config, tmp.path() / "run");
  REQUIRE(fs::exists(tmp.path() / "run/speaker_metric.ckpt"));
  const SpeakerEncoder a = load_speaker_encoder(tmp.path() / "run/speaker.ckpt");
  const SpeakerEncoder b = load_speaker_encoder(tmp.path() / "run/speaker_metric.ckpt");
  CHECK(a.hash() != b.hash());
}

TEST_CASE("evaluate_conversion refuses the VC's own training ASR") {
  TempDir tmp("contam");
  nlohmann::json tree = tiny_tree(57);
  tree["orchestrator"]["max_iterations"] = 0;
  const auto config = ExperimentConfig::from_json(tree);
  run_iterations(config, tmp.path() / "run");

  const AsrModel a0 = load_asr_model(tmp.path() / "run/iter_000/asr.ckpt");
  const VcModel v0 = load_vc_model(tmp.path() / "run/iter_000/vc.ckpt");
  const SpeakerEncoder spk = load_speaker_encoder(tmp.path() / "run/speaker.ckpt");
  const DatasetManifest target = load_manifest(tmp.path() / "run/corpus/target/manifest.jsonl");
  FeatureStore store(config.feature_config(), "");
  const auto centroids = speaker_centroids(spk, target, store);
  CHECK_THROWS_AS(evaluate_conversion(v0, a0, spk, centroids, centroids, target, 4, 1, store), Error);
}
