// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"
#include "itervc/config.hpp"

namespace itervc {

struct IterationMetrics {
  double asr_val_wer = 0.0;  // percent, held-out-speaker validation WER
  double vc_eval_wer = 0.0;  // percent, converted-sample WER under the held-out evaluator ASR
  double identity_mean = 0.0;
};

struct IterationRecord {
  int i = 0;
  std::string asr_checkpoint;  // relative to the experiment directory
  std::string asr_hash;        // checkpoint file hash
  std::string vc_checkpoint;
  std::string vc_hash;
  std::string augmented_manifest;  // empty for i = 0
  std::string augmented_hash;
  IterationMetrics metrics;
  std::string config_hash;
};

struct IterationHistory {
  std::vector<IterationRecord> records;
  double convergence_epsilon = 0.01;
  double abs_epsilon = 0.25;
  int max_iterations = 4;
};

// Validation WER converged: the latest step improved by less than epsilon in
// relative terms, or by less than abs_epsilon WER points, including any
// regression. Needs at least two entries.
bool has_converged(const std::vector<double>& val_wers, double epsilon, double abs_epsilon = 0.25);
bool has_converged(const IterationHistory& history, double epsilon, double abs_epsilon = 0.25);

std::string to_json_line(const IterationRecord& record);
IterationRecord record_from_json_line(const std::string& line, int line_no);

IterationHistory load_history(const fs::path& history_file);
void append_history(const fs::path& history_file, const IterationRecord& record);

// Algorithm 1: train A0 and V0, then alternate augment / fine-tune / retrain
// until the validation WER converges or max_iterations is reached. Every
// model, augmented manifest and metric is persisted under out_dir; a run can
// resume from the last completed record.
IterationHistory run_iterations(const ExperimentConfig& config, const fs::path& out_dir,
                                bool resume = false);

// Walks the provenance chain of a finished run: record hashes must match the
// files, each V_i must reference A_i, and each fine-tuned A_i must reference
// the manifest it was tuned on. Throws on any break.
void verify_history(const fs::path& out_dir);

// Human-readable iteration table from a run directory.
std::string format_history_table(const fs::path& out_dir);

}  // namespace itervc
