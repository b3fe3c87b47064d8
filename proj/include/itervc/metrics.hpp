// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"
#include "itervc/corpus.hpp"

namespace itervc {

struct EditCounts {
  double wer = 0.0;  // (S + I + D) / n_ref
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int n_ref = 0;
};

// Token-level minimum-edit-distance WER with unit costs. On ties the
// backtrace prefers substitution over insertion+deletion.
EditCounts word_error_rate(const Transcript& reference, const Transcript& hypothesis);

struct UtteranceScore {
  std::string id;
  EditCounts counts;
};

struct WerReport {
  double wer = 0.0;
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int n_ref_words = 0;
  int n_utterances = 0;
  std::vector<UtteranceScore> per_utterance;

  void add(const std::string& id, const EditCounts& c);
};

// Structured evaluation record, one per model/manifest evaluation.
struct WerRecord {
  std::string model_id;
  std::string manifest_tag;
  double wer = 0.0;
  int n_words = 0;
  int n_utts = 0;
  int step = -1;  // training step the evaluation ran at, -1 outside training
};

std::string to_json_line(const WerRecord& r);

}  // namespace itervc
