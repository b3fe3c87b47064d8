// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/augment.hpp"

#include <json.hpp>

#include <algorithm>

namespace itervc {

using json = nlohmann::json;

void AugmentationPolicy::validate() const {
  if (pairs_per_utterance < 1) throw ConfigError("augment: pairs_per_utterance must be >= 1");
}

std::string AugmentationPolicy::fingerprint() const {
  json j = {{"pairs_per_utterance", pairs_per_utterance}, {"reference_sampling", "uniform-non-source"}};
  return hex64(fnv1a64(j.dump()));
}

DatasetManifest augment_dataset(const VcModel& vc, const DatasetManifest& train,
                                const SpeakerEncoder& spk, const AugmentationPolicy& policy,
                                const fs::path& out_dir, const FeatureConfig& features,
                                const fs::path& cache_root, int iteration) {
  policy.validate();
  const auto train_speakers = train.speakers();
  for (const auto& s : train_speakers)
    if (std::find(vc.speakers.begin(), vc.speakers.end(), s) == vc.speakers.end())
      throw Error("augment_dataset: VC model was not trained on speaker '" + s + "'");

  std::error_code ec;
  fs::create_directories(out_dir / "feats", ec);
  if (ec)
    throw Error("augment_dataset: cannot create output directory " + (out_dir / "feats").string() +
                ": " + ec.message());

  const std::string vc_hash = vc.hash();

  // Seed-reuse guard: the same output directory may only be regenerated with
  // the same (policy, model); otherwise stale feature files could poison the
  // new manifest.
  const fs::path guard_path = out_dir / "policy.json";
  json guard = {{"seed", policy.seed},
                {"policy_fingerprint", policy.fingerprint()},
                {"vc_hash", vc_hash}};
  if (fs::exists(guard_path)) {
    const json prev = json::parse(read_text_file(guard_path));
    if (prev.value("seed", uint64_t{0}) == policy.seed &&
        (prev.value("policy_fingerprint", "") != policy.fingerprint() ||
         prev.value("vc_hash", "") != vc_hash))
      throw Error("augment_dataset: output directory " + out_dir.string() +
                  " was generated with the same seed but a different policy or model; refusing to "
                  "overwrite");
  }
  write_text_file(guard_path, guard.dump() + "\n");

  FeatureStore store(features, cache_root);

  std::vector<std::string> speakers(train_speakers.begin(), train_speakers.end());
  std::map<std::string, SpeakerEmbedding> centroids;
  {
    FeatureStore centroid_store(features, cache_root);
    centroids = speaker_centroids(spk, train, centroid_store, cache_root);
  }

  DatasetManifest out;
  out.vocabulary = train.vocabulary;
  out.sample_rate_hz = train.sample_rate_hz;
  out.tag = "augmented";
  out.config_hash = train.config_hash;
  out.base_dir = out_dir;

  for (const auto& src : train.utterances) {
    // Per-item stream derived from (policy seed, utterance id): items are
    // independent, so conversions may run in any order or in parallel.
    Rng rng(derive_seed(policy.seed, "augment:" + src.id));
    std::vector<std::string> candidates;
    for (const auto& s : speakers)
      if (s != src.speaker) candidates.push_back(s);
    if (candidates.empty())
      throw Error("augment_dataset: no reference speaker candidates for '" + src.id + "'");

    const MelSpectrogram& mel = store.get(train, src);
    for (int p = 0; p < policy.pairs_per_utterance; ++p) {
      const std::string& ref = candidates[rng.uniform_int(candidates.size())];
      const MelSpectrogram converted = convert(vc, mel, centroids.at(ref));

      Utterance aug;
      aug.id = src.id + "__aug" + std::to_string(p);
      aug.speaker = ref;
      aug.transcript = src.transcript;
      aug.duration_s = src.duration_s;
      aug.features_path = "feats/" + aug.id + ".fmat";
      aug.provenance = AugmentProvenance{src.id, ref, vc_hash, iteration};
      save_fmat(out_dir / aug.features_path, converted.data);
      out.utterances.push_back(std::move(aug));
    }
  }

  save_manifest(out, out_dir / "manifest.jsonl");
  return out;
}

}  // namespace itervc
