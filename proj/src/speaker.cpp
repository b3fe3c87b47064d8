// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/speaker.hpp"

#include "itervc/checkpoint.hpp"

#include <algorithm>
#include <cmath>

namespace itervc {

SpkNet SpkNet::init(const SpeakerEncoderConfig& cfg, int n_speakers, Rng& rng) {
  SpkNet net;
  net.inproj = nn::Linear::init(cfg.n_mels, cfg.width, rng);
  for (int i = 0; i < cfg.n_conv_blocks; ++i)
    net.convs.push_back({nn::Conv1d::init(cfg.width, cfg.width, cfg.conv_kernel, rng),
                         nn::LayerNorm::init(cfg.width)});
  net.emb = nn::Linear::init(cfg.width, cfg.embed_dim, rng);
  net.head = nn::Linear::init(cfg.embed_dim, n_speakers, rng);
  return net;
}

SpkNet SpkNet::zeros_like() const {
  SpkNet g;
  g.inproj = inproj.zeros_like();
  for (const auto& b : convs) g.convs.push_back({b.conv.zeros_like(), b.ln.zeros_like()});
  g.emb = emb.zeros_like();
  g.head = head.zeros_like();
  return g;
}

void SpkNet::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  inproj.visit(prefix + "inproj", fn);
  for (size_t i = 0; i < convs.size(); ++i) {
    convs[i].conv.visit(prefix + "conv" + std::to_string(i), fn);
    convs[i].ln.visit(prefix + "ln" + std::to_string(i), fn);
  }
  emb.visit(prefix + "emb", fn);
  head.visit(prefix + "head", fn);
}

Mat SpkNet::embed(const Mat& x_norm, Tape& tape) const {
  tape.x_norm = x_norm;
  tape.in_act = nn::tanh_forward(inproj.forward(x_norm));
  Mat h = tape.in_act;
  tape.convs.resize(convs.size());
  for (size_t i = 0; i < convs.size(); ++i) {
    auto& c = tape.convs[i];
    c.input = h;
    c.act = nn::tanh_forward(convs[i].ln.forward(convs[i].conv.forward(h), c.ln));
    h = c.act + c.input;
  }
  tape.pooled = nn::mean_pool(h);
  tape.emb_pre = emb.forward(tape.pooled);
  tape.emb_unit = nn::l2_normalize(tape.emb_pre);
  return tape.emb_unit;
}

Mat SpkNet::backward_embed(const Tape& tape, const Mat& d_emb, SpkNet* grads) const {
  const Mat d_pre = nn::l2_normalize_backward(tape.emb_pre, d_emb);
  const Mat d_pooled = emb.backward(tape.pooled, d_pre, grads ? &grads->emb : nullptr);
  const Eigen::Index frames = tape.x_norm.rows();
  Mat dh = nn::mean_pool_backward(d_pooled, frames);
  for (size_t i = convs.size(); i-- > 0;) {
    const auto& c = tape.convs[i];
    const Mat d_ln = nn::tanh_backward(dh, c.act);
    const Mat d_conv = convs[i].ln.backward(d_ln, c.ln, grads ? &grads->convs[i].ln : nullptr);
    dh = convs[i].conv.backward(c.input, d_conv, grads ? &grads->convs[i].conv : nullptr) + dh;
  }
  const Mat d_in = nn::tanh_backward(dh, tape.in_act);
  return inproj.backward(tape.x_norm, d_in, grads ? &grads->inproj : nullptr);
}

std::string SpeakerEncoder::hash() const {
  uint64_t h = nn::param_checksum(const_cast<SpkNet&>(net));
  for (const auto& s : speakers) h = fnv1a64(s, h);
  return hex64(h);
}

namespace {

Mat normalize_input(const SpeakerEncoder& enc, const MelSpectrogram& mel) {
  if (mel.bins() != enc.cfg.n_mels)
    throw Error("speaker: mel has " + std::to_string(mel.bins()) + " bins, expected " +
                std::to_string(enc.cfg.n_mels));
  if (mel.frames() < kMinEmbedFrames)
    throw Error("speaker: mel too short to embed (" + std::to_string(mel.frames()) + " < " +
                std::to_string(kMinEmbedFrames) + " frames)");
  return (mel.data.rowwise() - enc.stats.mean).array().rowwise() / enc.stats.std.array();
}

}  // namespace

SpeakerEmbedding embed(const SpeakerEncoder& encoder, const std::vector<const MelSpectrogram*>& mels) {
  if (mels.empty()) throw Error("embed: no input mels");
  Mat acc = Mat::Zero(1, encoder.cfg.embed_dim);
  for (const auto* mel : mels) {
    SpkNet::Tape tape;
    acc += encoder.net.embed(normalize_input(encoder, *mel), tape);
  }
  return nn::l2_normalize(acc / static_cast<double>(mels.size()));
}

SpeakerEmbedding embed(const SpeakerEncoder& encoder, const MelSpectrogram& mel) {
  return embed(encoder, std::vector<const MelSpectrogram*>{&mel});
}

SpeakerEmbedding embed_with_tape(const SpeakerEncoder& encoder, const MelSpectrogram& mel,
                                 EmbedTape& tape) {
  return encoder.net.embed(normalize_input(encoder, mel), tape.tape);
}

Mat embed_backward_to_input(const SpeakerEncoder& encoder, const EmbedTape& tape, const Mat& d_emb) {
  const Mat dx_norm = encoder.net.backward_embed(tape.tape, d_emb, nullptr);
  return dx_norm.array().rowwise() / encoder.stats.std.array();
}

double identity_similarity(const SpeakerEmbedding& a, const SpeakerEmbedding& b) {
  if (a.cols() != b.cols() || a.rows() != 1 || b.rows() != 1)
    throw Error("identity_similarity: embedding dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("identity_similarity: zero-norm embedding");
  return std::clamp((a.array() * b.array()).sum() / (na * nb), -1.0, 1.0);
}

SpeakerEncoder train_speaker_encoder(const DatasetManifest& manifest,
                                     const SpeakerTrainOptions& options) {
  const auto speaker_set = manifest.speakers();
  if (speaker_set.size() < 2)
    throw Error("train_speaker_encoder: need at least 2 speakers, got " +
                std::to_string(speaker_set.size()));

  FeatureStore store(options.features, options.cache_root);

  SpeakerEncoder enc;
  enc.cfg = options.model;
  enc.stats = fit_normalization(manifest, store);
  enc.speakers.assign(speaker_set.begin(), speaker_set.end());
  enc.seed = options.train.seed;
  Rng init_rng(derive_seed(options.train.seed, "speaker-init"));
  enc.net = SpkNet::init(enc.cfg, static_cast<int>(enc.speakers.size()), init_rng);

  auto class_of = [&](const std::string& spk) {
    const auto it = std::find(enc.speakers.begin(), enc.speakers.end(), spk);
    return static_cast<int>(it - enc.speakers.begin());
  };

  // Hold out every k-th utterance of each speaker for the accuracy report.
  std::vector<size_t> train_idx, held_idx;
  std::map<std::string, int> per_speaker_count;
  for (size_t i = 0; i < manifest.utterances.size(); ++i) {
    const int n = per_speaker_count[manifest.utterances[i].speaker]++;
    if (options.train.heldout_stride > 0 && n % options.train.heldout_stride == options.train.heldout_stride - 1)
      held_idx.push_back(i);
    else
      train_idx.push_back(i);
  }
  if (train_idx.empty()) throw Error("train_speaker_encoder: no training utterances after holdout");

  SpkNet grads = enc.net.zeros_like();
  auto [params, grad_ptrs] = nn::param_grad_pairs(enc.net, grads);
  nn::AdamConfig acfg;
  acfg.lr = options.train.learning_rate;
  acfg.grad_clip = options.train.grad_clip;
  nn::Adam adam(acfg, params, grad_ptrs);

  Rng batch_rng(derive_seed(options.train.seed, "speaker-batches"));
  for (int step = 1; step <= options.train.steps; ++step) {
    adam.zero_grads();
    double batch_loss = 0.0;
    for (int item = 0; item < options.train.batch_items; ++item) {
      const auto& utt = manifest.utterances[train_idx[batch_rng.uniform_int(train_idx.size())]];
      const MelSpectrogram& mel = store.get(manifest, utt);
      SpkNet::Tape tape;
      const Mat e = enc.net.embed(normalize_input(enc, mel), tape);
      const Mat logits = enc.net.head.forward(e);
      Mat dlogits;
      const double loss = nn::cross_entropy(logits, class_of(utt.speaker), &dlogits);
      batch_loss += loss;
      dlogits *= 1.0 / options.train.batch_items;
      const Mat d_emb = enc.net.head.backward(e, dlogits, &grads.head);
      enc.net.backward_embed(tape, d_emb, &grads);
    }
    if (!std::isfinite(batch_loss))
      throw Error("speaker encoder training diverged at step " + std::to_string(step));
    adam.step();
  }

  const auto& eval_idx = held_idx.empty() ? train_idx : held_idx;
  int correct = 0;
  for (size_t i : eval_idx) {
    const auto& utt = manifest.utterances[i];
    SpkNet::Tape tape;
    const Mat e = enc.net.embed(normalize_input(enc, store.get(manifest, utt)), tape);
    const Mat logits = enc.net.head.forward(e);
    Eigen::Index k;
    logits.row(0).maxCoeff(&k);
    if (static_cast<int>(k) == class_of(utt.speaker)) ++correct;
  }
  enc.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(eval_idx.size());
  return enc;
}

SpeakerEmbedding cached_embed(const SpeakerEncoder& encoder, const DatasetManifest& manifest,
                              const Utterance& utt, FeatureStore& store, const fs::path& cache_root) {
  fs::path cached;
  if (!cache_root.empty()) {
    cached = cache_root / "emb" / encoder.hash() / (utt.id + ".fmat");
    if (fs::exists(cached)) return load_fmat(cached);
  }
  // float32 quantization mirrors the cache file format, so a warm cache and a
  // cold computation agree exactly.
  const SpeakerEmbedding e =
      embed(encoder, store.get(manifest, utt)).cast<float>().cast<double>();
  if (!cached.empty()) save_fmat(cached, e);
  return e;
}

std::map<std::string, SpeakerEmbedding> speaker_centroids(const SpeakerEncoder& encoder,
                                                          const DatasetManifest& manifest,
                                                          FeatureStore& store,
                                                          const fs::path& cache_root) {
  std::map<std::string, std::pair<Mat, int>> sums;
  for (const auto& u : manifest.utterances) {
    const SpeakerEmbedding e = cached_embed(encoder, manifest, u, store, cache_root);
    auto [it, fresh] = sums.try_emplace(u.speaker, e, 1);
    if (!fresh) {
      it->second.first += e;
      it->second.second += 1;
    }
  }
  std::map<std::string, SpeakerEmbedding> centroids;
  for (const auto& [spk, acc] : sums)
    centroids[spk] = nn::l2_normalize(acc.first / static_cast<double>(acc.second));
  return centroids;
}

void save_speaker_encoder(const SpeakerEncoder& enc, const fs::path& path,
                          const std::string& config_hash) {
  nlohmann::json h;
  h["schema"] = "itervc-ckpt-v1";
  h["kind"] = "speaker";
  h["seed"] = enc.seed;
  h["model_hash"] = enc.hash();
  h["config_hash"] = config_hash;
  h["speakers"] = enc.speakers;
  h["heldout_accuracy"] = enc.heldout_accuracy;
  h["model"] = {{"width", enc.cfg.width},
                {"embed_dim", enc.cfg.embed_dim},
                {"conv_kernel", enc.cfg.conv_kernel},
                {"n_conv_blocks", enc.cfg.n_conv_blocks},
                {"n_mels", enc.cfg.n_mels}};

  std::vector<std::pair<std::string, const Mat*>> tensors;
  const Mat mean = enc.stats.mean, std = enc.stats.std;
  tensors.emplace_back("stats.mean", &mean);
  tensors.emplace_back("stats.std", &std);
  const_cast<SpkNet&>(enc.net).visit("", [&](const std::string& name, Mat& m) {
    tensors.emplace_back(name, &m);
  });
  save_checkpoint(path, h, tensors);
}

SpeakerEncoder load_speaker_encoder(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "speaker")
    throw Error("checkpoint " + path.string() + " is not a speaker encoder");

  SpeakerEncoder enc;
  const auto& mc = ck.header.at("model");
  enc.cfg.width = mc.at("width").get<int>();
  enc.cfg.embed_dim = mc.at("embed_dim").get<int>();
  enc.cfg.conv_kernel = mc.at("conv_kernel").get<int>();
  enc.cfg.n_conv_blocks = mc.at("n_conv_blocks").get<int>();
  enc.cfg.n_mels = mc.at("n_mels").get<int>();
  enc.speakers = ck.header.at("speakers").get<std::vector<std::string>>();
  enc.heldout_accuracy = ck.header.at("heldout_accuracy").get<double>();
  enc.seed = ck.header.at("seed").get<uint64_t>();
  enc.stats.mean = ck.tensors.at("stats.mean").row(0);
  enc.stats.std = ck.tensors.at("stats.std").row(0);

  Rng rng(0);
  enc.net = SpkNet::init(enc.cfg, static_cast<int>(enc.speakers.size()), rng);
  enc.net.visit("", [&](const std::string& name, Mat& m) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw Error("checkpoint " + path.string() + " missing tensor " + name);
    m = it->second;
  });
  return enc;
}

}  // namespace itervc
