// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/asr.hpp"
#include "itervc/speaker.hpp"
#include "itervc/vc.hpp"

#include <map>

namespace itervc {

struct ConversionPair {
  std::string source_id;
  std::string reference_speaker;
  EditCounts counts;
  double identity = 0.0;
};

struct ConversionReport {
  double wer = 0.0;            // fraction, aggregated over pairs
  double identity_mean = 0.0;  // mean cosine vs the reference speaker centroid
  int n_pairs = 0;
  std::vector<ConversionPair> pairs;
};

// Content preservation and identity of converted samples: sources drawn from
// the evaluation manifest, reference speakers drawn from the VC's training
// speaker set. The evaluator ASR must differ from the ASR the VC was trained
// against; identical hashes are rejected.
//
// conditioning_centroids drive convert(); metric_spk/metric_centroids score
// the Identity metric and may come from a separately trained encoder.
ConversionReport evaluate_conversion(const VcModel& vc, const AsrModel& asr_eval,
                                     const SpeakerEncoder& metric_spk,
                                     const std::map<std::string, SpeakerEmbedding>& conditioning_centroids,
                                     const std::map<std::string, SpeakerEmbedding>& metric_centroids,
                                     const DatasetManifest& eval_manifest, int n_pairs, uint64_t seed,
                                     FeatureStore& store);

}  // namespace itervc
