// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/asr.hpp"
#include "itervc/common.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "itervc/nn.hpp"
#include "itervc/speaker.hpp"

namespace itervc {

struct VcModelConfig {
  int channels = 64;
  int kernel = 5;
  int enc_blocks = 2;
  int dec_blocks = 2;
  int embed_dim = 64;
  int n_mels = 80;
};

struct VcTrainConfig {
  double lambda_asr = 100.0;  // speech-consistency weight
  double lambda_recon = 1.0;
  double lambda_spk = 200.0;
  double lambda_adv = 0.0;  // optional adversarial term, off by default
  double learning_rate = 1e-3;
  int steps = 1500;
  int batch_items = 4;
  int eval_every = 150;
  double grad_clip = 5.0;
  int val_stride = 10;  // every k-th utterance forms the validation slice
  uint64_t seed = 1;

  void validate() const;
};

// Mel-to-mel conversion network. The speaker embedding modulates each decoder
// block per-channel (affine); the output is a residual added to the input, so
// an untrained model is close to identity.
struct VcNet {
  nn::Linear inproj;
  struct EncBlock {
    nn::Conv1d conv;
    nn::LayerNorm ln;
  };
  std::vector<EncBlock> enc;
  struct DecBlock {
    nn::Conv1d conv;
    nn::LayerNorm ln;
    nn::Film film;
  };
  std::vector<DecBlock> dec;
  nn::Linear outproj;

  static VcNet init(const VcModelConfig& cfg, Rng& rng);
  VcNet zeros_like() const;
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);

  struct Tape {
    Mat x_norm;
    Mat cond;
    Mat in_act;
    struct EncCache {
      Mat input;
      nn::LayerNorm::Cache ln;
      Mat act;
    };
    std::vector<EncCache> enc;
    struct DecCache {
      Mat input;
      nn::LayerNorm::Cache ln;
      Mat ln_out;
      Mat film_out;
      Mat act;
    };
    std::vector<DecCache> dec;
    Mat trunk;   // last hidden state
    Mat y_norm;  // x_norm + outproj(trunk)
  };

  Mat forward(const Mat& x_norm, const Mat& cond, Tape& tape) const;
  // Backprop d(y_norm); returns d(x_norm).
  Mat backward(const Tape& tape, const Mat& dy_norm, VcNet* grads) const;
};

struct VcModel {
  VcModelConfig cfg;
  NormalizationStats stats;
  VcNet net;
  int iteration = 0;
  uint64_t seed = 0;
  std::string asr_hash;              // the ASR whose encoder supplied the consistency loss
  std::string speaker_encoder_hash;  // the encoder that produced conditioning embeddings
  std::vector<std::string> speakers; // training speaker set

  std::string hash() const;
};

// V(X, s): same frame count as the source, deterministic.
MelSpectrogram convert(const VcModel& model, const MelSpectrogram& source_mel,
                       const SpeakerEmbedding& target);

// Mean absolute difference of frozen ASR encoder features between source and
// converted mels. Zero when the mels are identical.
double speech_consistency_loss(const AsrModel& asr, const MelSpectrogram& source_mel,
                               const MelSpectrogram& converted_mel);

// Same value; also returns the gradient w.r.t. the converted (raw) mel. The
// ASR parameters receive no gradient.
double speech_consistency_loss_grad(const AsrModel& asr, const MelSpectrogram& source_mel,
                                    const MelSpectrogram& converted_mel, Mat* d_converted);

struct VcTrainOptions {
  VcModelConfig model;
  VcTrainConfig train;
  FeatureConfig features;
  fs::path cache_root;
  int iteration = 0;
};

struct VcTrainResult {
  VcModel model;
  double best_val_objective = 0.0;
  double final_val_objective = 0.0;
  std::vector<std::pair<int, double>> val_history;  // (step, objective)
};

// Trains V against a frozen ASR and a frozen speaker encoder, minimizing
// lambda_recon * L1(V(x, s_src), x)
//   + lambda_spk * (1 - cos(embed(V(x, s_tgt)), s_tgt))
//   + lambda_asr * consistency(asr, x, V(x, s_tgt)),
// with (x, s_tgt) drawn uniformly over train utterances x train speakers.
VcTrainResult train_vc(const DatasetManifest& train, const AsrModel& asr,
                       const SpeakerEncoder& spk, const VcTrainOptions& options);

void save_vc_model(const VcModel& model, const fs::path& path, const std::string& config_hash = "");
VcModel load_vc_model(const fs::path& path);

}  // namespace itervc
