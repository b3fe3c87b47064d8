// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "itervc/speaker.hpp"
#include "itervc/vc.hpp"

namespace itervc {

struct AugmentationPolicy {
  int pairs_per_utterance = 1;
  uint64_t seed = 1;

  void validate() const;
  std::string fingerprint() const;  // policy identity for the seed-reuse guard
};

// Converts every train utterance to pairs_per_utterance reference
// speakers sampled uniformly over the other train speakers. Augmented items
// are stored as mel feature files and carry the source transcript verbatim.
//
// Re-running with the same (policy, vc) over out_dir is idempotent; reusing a
// policy seed with a different policy or model over the same out_dir is an
// error.
DatasetManifest augment_dataset(const VcModel& vc, const DatasetManifest& train,
                                const SpeakerEncoder& spk, const AugmentationPolicy& policy,
                                const fs::path& out_dir, const FeatureConfig& features,
                                const fs::path& cache_root = {}, int iteration = 0);

}  // namespace itervc
