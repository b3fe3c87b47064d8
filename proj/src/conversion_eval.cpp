// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/conversion_eval.hpp"

namespace itervc {

ConversionReport evaluate_conversion(const VcModel& vc, const AsrModel& asr_eval,
                                     const SpeakerEncoder& metric_spk,
                                     const std::map<std::string, SpeakerEmbedding>& conditioning_centroids,
                                     const std::map<std::string, SpeakerEmbedding>& metric_centroids,
                                     const DatasetManifest& eval_manifest, int n_pairs, uint64_t seed,
                                     FeatureStore& store) {
  if (asr_eval.hash() == vc.asr_hash)
    throw Error(
        "evaluate_conversion: evaluator ASR is the ASR the VC was trained against; use a "
        "separately trained model");
  if (eval_manifest.utterances.empty()) throw Error("evaluate_conversion: empty evaluation manifest");
  if (n_pairs < 1) throw Error("evaluate_conversion: n_pairs must be >= 1");
  if (conditioning_centroids.empty()) throw Error("evaluate_conversion: no reference centroids");
  for (const auto& [name, centroid] : conditioning_centroids) {
    (void)centroid;
    if (!metric_centroids.count(name))
      throw Error("evaluate_conversion: metric centroids missing speaker '" + name + "'");
  }

  std::vector<const std::string*> refs;
  for (const auto& [name, centroid] : conditioning_centroids) {
    (void)centroid;
    refs.push_back(&name);
  }

  Rng rng(derive_seed(seed, "conversion-eval"));
  ConversionReport report;
  WerReport wer_total;
  double identity_sum = 0.0;
  for (int i = 0; i < n_pairs; ++i) {
    const auto& src = eval_manifest.utterances[rng.uniform_int(eval_manifest.utterances.size())];
    const std::string& ref = *refs[rng.uniform_int(refs.size())];

    const MelSpectrogram converted =
        convert(vc, store.get(eval_manifest, src), conditioning_centroids.at(ref));
    const Transcript hyp = greedy_decode(asr_eval, converted);

    ConversionPair pair;
    pair.source_id = src.id;
    pair.reference_speaker = ref;
    pair.counts = word_error_rate(src.transcript, hyp);
    pair.identity = identity_similarity(embed(metric_spk, converted), metric_centroids.at(ref));
    identity_sum += pair.identity;
    wer_total.add(src.id, pair.counts);
    report.pairs.push_back(std::move(pair));
  }
  report.n_pairs = n_pairs;
  report.wer = wer_total.wer;
  report.identity_mean = identity_sum / n_pairs;
  return report;
}

}  // namespace itervc
