// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "itervc/metrics.hpp"
#include "itervc/nn.hpp"

namespace itervc {

struct AsrModelConfig {
  int encoder_width = 128;  // d; encoder output width, fixed across iterations
  int conv_kernel = 5;
  int n_conv_blocks = 2;
  int n_rnn_layers = 2;
  int n_mels = 80;
  static constexpr int temporal_stride = 1;
};

struct AsrTrainConfig {
  double learning_rate = 0.0025;
  double finetune_learning_rate = 0.00025;  // learning_rate / 10 by default
  int warmup_steps = 400;
  int max_steps = 5000;
  int finetune_steps = 2000;
  int batch_items = 8;
  int ratio_base = 1;    // base corpus share during fine-tuning
  int ratio_target = 3;  // target + augmented share
  int eval_every = 200;
  double grad_clip = 5.0;
  uint64_t seed = 1;

  void validate() const;
};

// Encoder + CTC head. Every layer keeps frame rate (stride 1), so encoder
// features align one-to-one with input mel frames.
struct AsrNet {
  nn::Linear inproj;
  struct ConvBlock {
    nn::Conv1d conv;
    nn::LayerNorm ln;
  };
  std::vector<ConvBlock> convs;
  std::vector<nn::BiRnn> rnns;
  nn::Linear head;

  static AsrNet init(const AsrModelConfig& cfg, int n_classes, Rng& rng);
  AsrNet zeros_like() const;
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  struct Tape {
    Mat x_norm;
    Mat in_act;
    struct ConvCache {
      Mat input;
      nn::LayerNorm::Cache ln;
      Mat act;
    };
    std::vector<ConvCache> convs;
    struct RnnCache {
      nn::BiRnn::Cache rnn;
    };
    std::vector<RnnCache> rnns;
    Mat features;
  };

  // x_norm is the normalized mel; returns encoder features (T x d).
  Mat encode(const Mat& x_norm, Tape& tape) const;
  // Backprop d_features (and optionally d_logits through the head) to the
  // normalized input. grads may be null for frozen use.
  Mat backward(const Tape& tape, const Mat* d_features, const Mat* d_logits, AsrNet* grads) const;
};

struct AsrModel {
  AsrModelConfig cfg;
  TokenVocabulary vocab;
  NormalizationStats stats;
  AsrNet net;
  int iteration = 0;
  uint64_t seed = 0;
  std::string augmented_manifest_hash;  // provenance: hash of the manifest fine-tuned on

  std::string hash() const;
  int n_classes() const { return vocab.size() + 1; }
};

// Encoder features h_asr (frames x d). Deterministic; differentiable w.r.t.
// the input mel through encode_backward_to_input.
Mat encode(const AsrModel& model, const MelSpectrogram& mel);

struct EncodeTape {
  AsrNet::Tape tape;
};

Mat encode_with_tape(const AsrModel& model, const MelSpectrogram& mel, EncodeTape& tape);
// Gradient w.r.t. the raw (unnormalized) input mel; leaves model parameters
// untouched.
Mat encode_backward_to_input(const AsrModel& model, const EncodeTape& tape, const Mat& d_features);

double asr_ctc_loss(const AsrModel& model, const MelSpectrogram& mel, const Transcript& transcript);
Transcript greedy_decode(const AsrModel& model, const MelSpectrogram& mel);

WerReport evaluate_wer(const AsrModel& model, const DatasetManifest& manifest, FeatureStore& store);

struct AsrTrainResult {
  AsrModel model;
  double best_val_wer = 0.0;
  double final_val_wer = 0.0;
  std::vector<WerRecord> eval_log;
  std::vector<int> base_items_per_batch;  // fine-tuning mix audit trail
};

struct AsrTrainOptions {
  AsrModelConfig model;
  AsrTrainConfig train;
  FeatureConfig features;
  fs::path cache_root;
  int iteration = 0;
  std::string augmented_manifest_hash;
};

AsrTrainResult train_asr(const DatasetManifest& train, const DatasetManifest& val,
                         const AsrTrainOptions& options);

AsrTrainResult finetune_asr(const AsrModel& model, const DatasetManifest& base,
                            const DatasetManifest& target, const DatasetManifest& augmented,
                            const DatasetManifest& val, const AsrTrainOptions& options);

void save_asr_model(const AsrModel& model, const fs::path& path, const std::string& config_hash = "");
AsrModel load_asr_model(const fs::path& path);

// Deterministic 1:3 (configurable) interleaving of base vs target items.
// Bresenham over the item stream, so any window of 4*k consecutive items
// contains k*ratio_base base items within +/-1.
class MixingSampler {
 public:
  MixingSampler(int ratio_base, int ratio_target, size_t n_base, size_t n_target, uint64_t seed);

  // (is_base, index within the chosen class)
  std::pair<bool, size_t> next();

 private:
  int a_, b_;
  size_t n_base_, n_target_;
  uint64_t n_ = 0;
  Rng rng_;
};

}  // namespace itervc
