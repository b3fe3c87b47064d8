// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/asr.hpp"
#include "itervc/augment.hpp"
#include "itervc/common.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "itervc/speaker.hpp"
#include "itervc/vc.hpp"

#include <json.hpp>

namespace itervc {

// Parses a small TOML subset: [section] and [nested.section] headers,
// key = value lines with strings, integers, floats, booleans and flat
// arrays, and # comments.
nlohmann::json parse_toml_subset(const std::string& text, const std::string& origin);

struct OrchestratorConfig {
  double epsilon = 0.01;        // relative validation-WER improvement threshold
  double abs_epsilon = 0.25;    // absolute threshold, in WER percentage points
  int max_iterations = 4;       // augmentation iterations after iteration 0
  bool include_past_augmented = false;
  int eval_pairs = 50;
};

// The full experiment configuration tree. Defaults live in defaults();
// load() merges file contents and --section.key=value overrides over them,
// rejecting unknown keys with their path.
class ExperimentConfig {
 public:
  ExperimentConfig() : tree_(defaults()) {}

  static nlohmann::json defaults();
  static ExperimentConfig load(const fs::path& path, const std::vector<std::string>& overrides = {});
  static ExperimentConfig from_json(nlohmann::json tree);

  const nlohmann::json& tree() const { return tree_; }
  std::string hash() const;

  uint64_t seed() const;
  bool corpus_generate() const;
  std::string corpus_manifest_path() const;
  std::string base_corpus_manifest_path() const;
  SyntheticCorpusSpec corpus_spec() const;
  bool base_corpus_enabled() const;
  SyntheticCorpusSpec base_corpus_spec() const;
  int held_out_speakers() const;
  std::string cache_dir() const;
  FeatureConfig feature_config() const;
  AsrModelConfig asr_model_config() const;
  AsrTrainConfig asr_train_config() const;
  SpeakerEncoderConfig speaker_model_config() const;
  SpeakerTrainConfig speaker_train_config() const;
  bool separate_metric_encoder() const;
  VcModelConfig vc_model_config() const;
  VcTrainConfig vc_train_config() const;
  AugmentationPolicy augmentation_policy() const;
  OrchestratorConfig orchestrator_config() const;

 private:
  nlohmann::json tree_;
};

}  // namespace itervc
