// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"
#include "itervc/corpus.hpp"
#include "itervc/features.hpp"
#include "itervc/nn.hpp"

#include <map>

namespace itervc {

// Unit-norm row vector (1 x embed_dim).
using SpeakerEmbedding = Mat;

struct SpeakerEncoderConfig {
  int width = 64;
  int embed_dim = 64;
  int conv_kernel = 5;
  int n_conv_blocks = 2;
  int n_mels = 80;
};

struct SpeakerTrainConfig {
  double learning_rate = 1e-3;
  int steps = 1200;
  int batch_items = 16;
  int eval_every = 200;
  double grad_clip = 5.0;
  int heldout_stride = 5;  // every k-th utterance per speaker held out for the accuracy report
  uint64_t seed = 1;
};

// Mel-input speaker classifier; the L2-normalized penultimate layer is the
// embedding.
struct SpkNet {
  nn::Linear inproj;
  struct ConvBlock {
    nn::Conv1d conv;
    nn::LayerNorm ln;
  };
  std::vector<ConvBlock> convs;
  nn::Linear emb;
  nn::Linear head;

  static SpkNet init(const SpeakerEncoderConfig& cfg, int n_speakers, Rng& rng);
  SpkNet zeros_like() const;
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
    Mat pooled;   // 1 x width
    Mat emb_pre;  // 1 x embed_dim, before normalization
    Mat emb_unit;
  };

  Mat embed(const Mat& x_norm, Tape& tape) const;  // returns 1 x embed_dim, unit norm
  // Backprop d(embedding) to the normalized input mel.
  Mat backward_embed(const Tape& tape, const Mat& d_emb, SpkNet* grads) const;
};

struct SpeakerEncoder {
  SpeakerEncoderConfig cfg;
  NormalizationStats stats;
  SpkNet net;
  std::vector<std::string> speakers;  // class order used at training time
  double heldout_accuracy = 0.0;
  uint64_t seed = 0;

  std::string hash() const;
};

inline constexpr int kMinEmbedFrames = 10;

// Averages per-utterance unit embeddings, then renormalizes.
SpeakerEmbedding embed(const SpeakerEncoder& encoder, const std::vector<const MelSpectrogram*>& mels);
SpeakerEmbedding embed(const SpeakerEncoder& encoder, const MelSpectrogram& mel);

// Gradient of an embedding w.r.t. the raw input mel, for losses that steer a
// generator through this (frozen) encoder.
struct EmbedTape {
  SpkNet::Tape tape;
};
SpeakerEmbedding embed_with_tape(const SpeakerEncoder& encoder, const MelSpectrogram& mel,
                                 EmbedTape& tape);
Mat embed_backward_to_input(const SpeakerEncoder& encoder, const EmbedTape& tape, const Mat& d_emb);

double identity_similarity(const SpeakerEmbedding& a, const SpeakerEmbedding& b);

struct SpeakerTrainOptions {
  SpeakerEncoderConfig model;
  SpeakerTrainConfig train;
  FeatureConfig features;
  fs::path cache_root;
};

SpeakerEncoder train_speaker_encoder(const DatasetManifest& manifest, const SpeakerTrainOptions& options);

// Embedding with an optional on-disk cache keyed by (utterance id, encoder
// hash); cache_root may be empty.
SpeakerEmbedding cached_embed(const SpeakerEncoder& encoder, const DatasetManifest& manifest,
                              const Utterance& utt, FeatureStore& store, const fs::path& cache_root);

// Per-speaker mean embeddings over all of that speaker's utterances.
std::map<std::string, SpeakerEmbedding> speaker_centroids(const SpeakerEncoder& encoder,
                                                          const DatasetManifest& manifest,
                                                          FeatureStore& store,
                                                          const fs::path& cache_root = {});

void save_speaker_encoder(const SpeakerEncoder& enc, const fs::path& path,
                          const std::string& config_hash = "");
SpeakerEncoder load_speaker_encoder(const fs::path& path);

}  // namespace itervc
