// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/vc.hpp"

#include "itervc/checkpoint.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace itervc {

void VcTrainConfig::validate() const {
  if (lambda_asr < 0 || lambda_recon < 0 || lambda_spk < 0 || lambda_adv < 0)
    throw ConfigError("vc: loss weights must be nonnegative");
  if (steps < 1 || batch_items < 1) throw ConfigError("vc: steps and batch_items must be >= 1");
  if (learning_rate <= 0) throw ConfigError("vc: learning rate must be positive");
  if (val_stride < 2) throw ConfigError("vc: val_stride must be >= 2");
}

VcNet VcNet::init(const VcModelConfig& cfg, Rng& rng) {
  VcNet net;
  const int c = cfg.channels;
  net.inproj = nn::Linear::init(cfg.n_mels, c, rng);
  for (int i = 0; i < cfg.enc_blocks; ++i)
    net.enc.push_back({nn::Conv1d::init(c, c, cfg.kernel, rng), nn::LayerNorm::init(c)});
  for (int i = 0; i < cfg.dec_blocks; ++i)
    net.dec.push_back({nn::Conv1d::init(c, c, cfg.kernel, rng), nn::LayerNorm::init(c),
                       nn::Film::init(cfg.embed_dim, c)});
  // Small output init keeps the initial conversion near identity.
  net.outproj = nn::Linear::init(c, cfg.n_mels, rng, 0.01);
  return net;
}

VcNet VcNet::zeros_like() const {
  VcNet g;
  g.inproj = inproj.zeros_like();
  for (const auto& b : enc) g.enc.push_back({b.conv.zeros_like(), b.ln.zeros_like()});
  for (const auto& b : dec) g.dec.push_back({b.conv.zeros_like(), b.ln.zeros_like(), b.film.zeros_like()});
  g.outproj = outproj.zeros_like();
  return g;
}

void VcNet::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  inproj.visit(prefix + "inproj", fn);
  for (size_t i = 0; i < enc.size(); ++i) {
    enc[i].conv.visit(prefix + "enc" + std::to_string(i) + ".conv", fn);
    enc[i].ln.visit(prefix + "enc" + std::to_string(i) + ".ln", fn);
  }
  for (size_t i = 0; i < dec.size(); ++i) {
    dec[i].conv.visit(prefix + "dec" + std::to_string(i) + ".conv", fn);
    dec[i].ln.visit(prefix + "dec" + std::to_string(i) + ".ln", fn);
    dec[i].film.visit(prefix + "dec" + std::to_string(i) + ".film", fn);
  }
  outproj.visit(prefix + "outproj", fn);
}

Mat VcNet::forward(const Mat& x_norm, const Mat& cond, Tape& tape) const {
  tape.x_norm = x_norm;
  tape.cond = cond;
  tape.in_act = nn::tanh_forward(inproj.forward(x_norm));
  Mat h = tape.in_act;
  tape.enc.resize(enc.size());
  for (size_t i = 0; i < enc.size(); ++i) {
    auto& c = tape.enc[i];
    c.input = h;
    c.act = nn::tanh_forward(enc[i].ln.forward(enc[i].conv.forward(h), c.ln));
    h = c.act + c.input;
  }
  tape.dec.resize(dec.size());
  for (size_t i = 0; i < dec.size(); ++i) {
    auto& c = tape.dec[i];
    c.input = h;
    c.ln_out = dec[i].ln.forward(dec[i].conv.forward(h), c.ln);
    c.film_out = dec[i].film.forward(c.ln_out, cond);
    c.act = nn::tanh_forward(c.film_out);
    h = c.act + c.input;
  }
  tape.trunk = h;
  tape.y_norm = x_norm + outproj.forward(h);
  return tape.y_norm;
}

Mat VcNet::backward(const Tape& tape, const Mat& dy_norm, VcNet* grads) const {
  Mat dh = outproj.backward(tape.trunk, dy_norm, grads ? &grads->outproj : nullptr);
  for (size_t i = dec.size(); i-- > 0;) {
    const auto& c = tape.dec[i];
    const Mat d_film = nn::tanh_backward(dh, c.act);
    const Mat d_ln =
        dec[i].film.backward(c.ln_out, tape.cond, d_film, grads ? &grads->dec[i].film : nullptr);
    const Mat d_conv = dec[i].ln.backward(d_ln, c.ln, grads ? &grads->dec[i].ln : nullptr);
    dh = dec[i].conv.backward(c.input, d_conv, grads ? &grads->dec[i].conv : nullptr) + dh;
  }
  for (size_t i = enc.size(); i-- > 0;) {
    const auto& c = tape.enc[i];
    const Mat d_ln = nn::tanh_backward(dh, c.act);
    const Mat d_conv = enc[i].ln.backward(d_ln, c.ln, grads ? &grads->enc[i].ln : nullptr);
    dh = enc[i].conv.backward(c.input, d_conv, grads ? &grads->enc[i].conv : nullptr) + dh;
  }
  const Mat d_in = nn::tanh_backward(dh, tape.in_act);
  // Residual output path: y = x + f(x), so dx gets dy directly as well.
  return inproj.backward(tape.x_norm, d_in, grads ? &grads->inproj : nullptr) + dy_norm;
}

std::string VcModel::hash() const {
  uint64_t h = nn::param_checksum(const_cast<VcNet&>(net));
  h = fnv1a64(asr_hash, h);
  h = fnv1a64(&iteration, sizeof(iteration), h);
  return hex64(h);
}

namespace {

Mat normalize_input(const VcModel& model, const MelSpectrogram& mel) {
  if (mel.bins() != model.cfg.n_mels)
    throw Error("vc: mel has " + std::to_string(mel.bins()) + " bins, expected " +
                std::to_string(model.cfg.n_mels));
  return (mel.data.rowwise() - model.stats.mean).array().rowwise() / model.stats.std.array();
}

void check_embedding(const VcModel& model, const SpeakerEmbedding& s) {
  if (s.rows() != 1 || s.cols() != model.cfg.embed_dim)
    throw Error("vc: speaker embedding has wrong shape");
  if (std::abs(s.norm() - 1.0) > 1e-4) throw Error("vc: speaker embedding is not unit norm");
}

}  // namespace

MelSpectrogram convert(const VcModel& model, const MelSpectrogram& source_mel,
                       const SpeakerEmbedding& target) {
  check_embedding(model, target);
  VcNet::Tape tape;
  const Mat y_norm = model.net.forward(normalize_input(model, source_mel), target, tape);
  MelSpectrogram out = source_mel;
  out.data = (y_norm.array().rowwise() * model.stats.std.array()).matrix().rowwise() + model.stats.mean;
  return out;
}

double speech_consistency_loss(const AsrModel& asr, const MelSpectrogram& source_mel,
                               const MelSpectrogram& converted_mel) {
  return speech_consistency_loss_grad(asr, source_mel, converted_mel, nullptr);
}

double speech_consistency_loss_grad(const AsrModel& asr, const MelSpectrogram& source_mel,
                                    const MelSpectrogram& converted_mel, Mat* d_converted) {
  if (source_mel.frames() != converted_mel.frames())
    throw Error("speech_consistency_loss: frame count mismatch (" +
                std::to_string(source_mel.frames()) + " vs " + std::to_string(converted_mel.frames()) +
                ")");
  const Mat h_src = encode(asr, source_mel);
  EncodeTape tape;
  const Mat h_conv = encode_with_tape(asr, converted_mel, tape);
  const Mat diff = h_conv - h_src;
  const double n = static_cast<double>(diff.size());
  const double loss = diff.array().abs().sum() / n;
  if (d_converted) {
    const Mat d_feat = diff.array().sign().matrix() / n;
    *d_converted = encode_backward_to_input(asr, tape, d_feat);
  }
  return loss;
}

VcTrainResult train_vc(const DatasetManifest& train, const AsrModel& asr, const SpeakerEncoder& spk,
                       const VcTrainOptions& options) {
  options.train.validate();
  if (train.utterances.empty()) throw Error("train_vc: empty training manifest");
  const auto speaker_set = train.speakers();
  if (speaker_set.size() < 2)
    throw Error("train_vc: need at least 2 speakers, got " + std::to_string(speaker_set.size()));

  FeatureStore store(options.features, options.cache_root);
  const VcTrainConfig& tc = options.train;

  VcModel model;
  model.cfg = options.model;
  model.cfg.embed_dim = spk.cfg.embed_dim;
  model.stats = fit_normalization(train, store);
  model.iteration = options.iteration;
  model.seed = tc.seed;
  model.asr_hash = asr.hash();
  model.speaker_encoder_hash = spk.hash();
  model.speakers.assign(speaker_set.begin(), speaker_set.end());
  Rng init_rng(derive_seed(tc.seed, "vc-init"));
  model.net = VcNet::init(model.cfg, init_rng);

  const auto centroids = speaker_centroids(spk, train, store, options.cache_root);
  std::vector<const SpeakerEmbedding*> centroid_list;
  for (const auto& s : model.speakers) centroid_list.push_back(&centroids.at(s));

  // Deterministic validation slice.
  std::vector<size_t> train_idx, val_idx;
  for (size_t i = 0; i < train.utterances.size(); ++i)
    (i % static_cast<size_t>(tc.val_stride) == 0 ? val_idx : train_idx).push_back(i);
  if (train_idx.empty()) train_idx = val_idx;

  VcNet grads = model.net.zeros_like();
  auto [params, grad_ptrs] = nn::param_grad_pairs(model.net, grads);
  nn::AdamConfig acfg;
  acfg.lr = tc.learning_rate;
  acfg.grad_clip = tc.grad_clip;
  nn::Adam adam(acfg, params, grad_ptrs);

  // Optional frame-wise discriminator (enabled when lambda_adv > 0): a small
  // per-frame MLP classifying real vs converted normalized frames.
  struct Discriminator {
    nn::Linear l1, l2;
    void visit(const std::string& p, const nn::ParamVisitor& fn) {
      l1.visit(p + "d1", fn);
      l2.visit(p + "d2", fn);
    }
  };
  std::unique_ptr<Discriminator> disc;
  std::unique_ptr<Discriminator> disc_grads;
  std::unique_ptr<nn::Adam> disc_adam;
  if (tc.lambda_adv > 0) {
    Rng drng(derive_seed(tc.seed, "vc-disc-init"));
    disc = std::make_unique<Discriminator>();
    disc->l1 = nn::Linear::init(model.cfg.n_mels, 64, drng);
    disc->l2 = nn::Linear::init(64, 1, drng);
    disc_grads = std::make_unique<Discriminator>();
    disc_grads->l1 = disc->l1.zeros_like();
    disc_grads->l2 = disc->l2.zeros_like();
    auto [dp, dg] = nn::param_grad_pairs(*disc, *disc_grads);
    nn::AdamConfig dcfg;
    dcfg.lr = tc.learning_rate;
    dcfg.grad_clip = tc.grad_clip;
    disc_adam = std::make_unique<nn::Adam>(dcfg, dp, dg);
  }

  // sigma(d) per frame; loss pieces reused for both discriminator and
  // generator updates.
  auto disc_forward = [&](const Mat& x_norm, Mat* h1_out) {
    const Mat h1 = nn::tanh_forward(disc->l1.forward(x_norm));
    if (h1_out) *h1_out = h1;
    return disc->l2.forward(h1);
  };

  const double item_scale = 1.0 / tc.batch_items;

  // One training item: reconstruction toward the source speaker plus
  // speaker/consistency (and optional adversarial) terms toward a sampled
  // target speaker. Returns the composite objective value; accumulates
  // parameter gradients unless eval_only.
  auto run_item = [&](size_t utt_idx, size_t tgt_speaker_idx, bool eval_only) {
    const auto& utt = train.utterances[utt_idx];
    const MelSpectrogram& mel = store.get(train, utt);
    const Mat x_norm = normalize_input(model, mel);
    const auto frames = x_norm.rows();
    const double n_el = static_cast<double>(x_norm.size());

    double objective = 0.0;

    // Reconstruction branch: convert toward the source's own speaker.
    const SpeakerEmbedding& s_src = centroids.at(utt.speaker);
    VcNet::Tape tape_a;
    const Mat y_a = model.net.forward(x_norm, s_src, tape_a);
    // L1 in the raw mel space: y_raw - x_raw = (y_norm - x_norm) * std.
    const Mat diff_raw = ((y_a - x_norm).array().rowwise() * model.stats.std.array()).matrix();
    const double l_rec = diff_raw.array().abs().sum() / n_el;
    objective += tc.lambda_recon * l_rec;
    if (!eval_only && tc.lambda_recon > 0) {
      const Mat dy_a =
          ((diff_raw.array().sign() / n_el).rowwise() * model.stats.std.array()).matrix() *
          (tc.lambda_recon * item_scale);
      model.net.backward(tape_a, dy_a, &grads);
    }

    // Conversion branch: target speaker sampled over the train speaker set.
    const SpeakerEmbedding& s_tgt = *centroid_list[tgt_speaker_idx];
    VcNet::Tape tape_b;
    const Mat y_b_norm = model.net.forward(x_norm, s_tgt, tape_b);
    MelSpectrogram y_b = mel;
    y_b.data =
        (y_b_norm.array().rowwise() * model.stats.std.array()).matrix().rowwise() + model.stats.mean;

    Mat dy_b_raw = Mat::Zero(frames, x_norm.cols());

    if (tc.lambda_spk > 0) {
      EmbedTape etape;
      const SpeakerEmbedding e_conv = embed_with_tape(spk, y_b, etape);
      const double cos = (e_conv.array() * s_tgt.array()).sum();
      objective += tc.lambda_spk * (1.0 - cos);
      if (!eval_only) {
        const Mat d_emb = -s_tgt * (tc.lambda_spk * item_scale);
        dy_b_raw += embed_backward_to_input(spk, etape, d_emb);
      }
    }

    if (tc.lambda_asr > 0) {
      Mat d_conv;
      const double l_asr =
          speech_consistency_loss_grad(asr, mel, y_b, eval_only ? nullptr : &d_conv);
      objective += tc.lambda_asr * l_asr;
      if (!eval_only) dy_b_raw += d_conv * (tc.lambda_asr * item_scale);
    }

    if (tc.lambda_adv > 0) {
      // Generator side: push converted frames toward the discriminator's
      // "real" decision, -log sigma(D(y)).
      Mat h1;
      const Mat d_logit = disc_forward(y_b_norm, &h1);
      double l_gen = 0.0;
      Mat dd = Mat::Zero(frames, 1);
      for (Eigen::Index t = 0; t < frames; ++t) {
        const double p = 1.0 / (1.0 + std::exp(-d_logit(t, 0)));
        l_gen += -std::log(std::max(p, 1e-12));
        dd(t, 0) = (p - 1.0) / static_cast<double>(frames);
      }
      l_gen /= static_cast<double>(frames);
      objective += tc.lambda_adv * l_gen;
      if (!eval_only) {
        const Mat dh1 = disc->l2.backward(h1, dd * (tc.lambda_adv * item_scale), nullptr);
        const Mat dx = disc->l1.backward(y_b_norm, nn::tanh_backward(dh1, h1), nullptr);
        dy_b_raw += (dx.array().rowwise() / model.stats.std.array()).matrix();
      }
    }

    if (!eval_only && dy_b_raw.size() > 0 && (tc.lambda_spk > 0 || tc.lambda_asr > 0 || tc.lambda_adv > 0)) {
      const Mat dy_b_norm = (dy_b_raw.array().rowwise() * model.stats.std.array()).matrix();
      model.net.backward(tape_b, dy_b_norm, &grads);
    }

    // Discriminator update on this item's frames (real = x, fake = y_b).
    if (!eval_only && tc.lambda_adv > 0) {
      disc_grads->l1.W.setZero();
      disc_grads->l1.b.setZero();
      disc_grads->l2.W.setZero();
      disc_grads->l2.b.setZero();
      auto disc_side = [&](const Mat& frames_in, double label) {
        Mat h1;
        const Mat logit = disc_forward(frames_in, &h1);
        Mat dd(frames_in.rows(), 1);
        for (Eigen::Index t = 0; t < frames_in.rows(); ++t) {
          const double p = 1.0 / (1.0 + std::exp(-logit(t, 0)));
          dd(t, 0) = (p - label) / static_cast<double>(frames_in.rows());
        }
        const Mat dh1 = disc->l2.backward(h1, dd, &disc_grads->l2);
        disc->l1.backward(frames_in, nn::tanh_backward(dh1, h1), &disc_grads->l1);
      };
      disc_side(x_norm, 1.0);
      disc_side(y_b_norm, 0.0);
      disc_adam->step();
    }

    return objective;
  };

  Rng batch_rng(derive_seed(tc.seed, "vc-batches"));

  VcTrainResult result;
  result.model = model;
  result.best_val_objective = std::numeric_limits<double>::infinity();

  auto run_val = [&](int step) {
    double total = 0.0;
    for (size_t k = 0; k < val_idx.size(); ++k) {
      // Fixed target assignment keeps the validation objective comparable
      // across evaluations.
      total += run_item(val_idx[k], k % centroid_list.size(), true);
    }
    const double objective = total / static_cast<double>(val_idx.size());
    result.val_history.emplace_back(step, objective);
    if (objective < result.best_val_objective) {
      result.best_val_objective = objective;
      result.model = model;
    }
    result.final_val_objective = objective;
  };

  run_val(0);
  for (int step = 1; step <= tc.steps; ++step) {
    adam.zero_grads();
    double batch_objective = 0.0;
    for (int item = 0; item < tc.batch_items; ++item) {
      const size_t utt_idx = train_idx[batch_rng.uniform_int(train_idx.size())];
      const size_t tgt = batch_rng.uniform_int(centroid_list.size());
      batch_objective += run_item(utt_idx, tgt, false);
    }
    if (!std::isfinite(batch_objective))
      throw Error("VC training diverged: non-finite objective at step " + std::to_string(step));
    adam.step();
    if (step % tc.eval_every == 0 || step == tc.steps) run_val(step);
  }
  return result;
}

void save_vc_model(const VcModel& model, const fs::path& path, const std::string& config_hash) {
  nlohmann::json h;
  h["schema"] = "itervc-ckpt-v1";
  h["kind"] = "vc";
  h["iteration"] = model.iteration;
  h["seed"] = model.seed;
  h["model_hash"] = model.hash();
  h["config_hash"] = config_hash;
  h["asr_hash"] = model.asr_hash;
  h["speaker_encoder_hash"] = model.speaker_encoder_hash;
  h["speakers"] = model.speakers;
  h["model"] = {{"channels", model.cfg.channels},   {"kernel", model.cfg.kernel},
                {"enc_blocks", model.cfg.enc_blocks}, {"dec_blocks", model.cfg.dec_blocks},
                {"embed_dim", model.cfg.embed_dim}, {"n_mels", model.cfg.n_mels}};

  std::vector<std::pair<std::string, const Mat*>> tensors;
  const Mat mean = model.stats.mean, std = model.stats.std;
  tensors.emplace_back("stats.mean", &mean);
  tensors.emplace_back("stats.std", &std);
  const_cast<VcNet&>(model.net).visit("", [&](const std::string& name, Mat& m) {
    tensors.emplace_back(name, &m);
  });
  save_checkpoint(path, h, tensors);
}

VcModel load_vc_model(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "vc")
    throw Error("checkpoint " + path.string() + " is not a VC model");

  VcModel model;
  const auto& mc = ck.header.at("model");
  model.cfg.channels = mc.at("channels").get<int>();
  model.cfg.kernel = mc.at("kernel").get<int>();
  model.cfg.enc_blocks = mc.at("enc_blocks").get<int>();
  model.cfg.dec_blocks = mc.at("dec_blocks").get<int>();
  model.cfg.embed_dim = mc.at("embed_dim").get<int>();
  model.cfg.n_mels = mc.at("n_mels").get<int>();
  model.iteration = ck.header.at("iteration").get<int>();
  model.seed = ck.header.at("seed").get<uint64_t>();
  model.asr_hash = ck.header.at("asr_hash").get<std::string>();
  model.speaker_encoder_hash = ck.header.at("speaker_encoder_hash").get<std::string>();
  model.speakers = ck.header.at("speakers").get<std::vector<std::string>>();
  model.stats.mean = ck.tensors.at("stats.mean").row(0);
  model.stats.std = ck.tensors.at("stats.std").row(0);

  Rng rng(0);
  model.net = VcNet::init(model.cfg, rng);
  model.net.visit("", [&](const std::string& name, Mat& m) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw Error("checkpoint " + path.string() + " missing tensor " + name);
    m = it->second;
  });
  return model;
}

}  // namespace itervc
