// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/asr.hpp"

#include "itervc/checkpoint.hpp"
#include "itervc/ctc.hpp"

#include <cmath>
#include <limits>

namespace itervc {

void AsrTrainConfig::validate() const {
  if (learning_rate <= 0 || finetune_learning_rate <= 0)
    throw ConfigError("asr: learning rates must be positive");
  if (max_steps < 1 || finetune_steps < 1) throw ConfigError("asr: step counts must be >= 1");
  if (batch_items < 1) throw ConfigError("asr: batch_items must be >= 1");
  if (ratio_base < 1 || ratio_target < 1) throw ConfigError("asr: mixing ratio components must be positive");
  if (eval_every < 1) throw ConfigError("asr: eval_every must be >= 1");
}

AsrNet AsrNet::init(const AsrModelConfig& cfg, int n_classes, Rng& rng) {
  AsrNet net;
  const int d = cfg.encoder_width;
  net.inproj = nn::Linear::init(cfg.n_mels, d, rng);
  for (int i = 0; i < cfg.n_conv_blocks; ++i)
    net.convs.push_back({nn::Conv1d::init(d, d, cfg.conv_kernel, rng), nn::LayerNorm::init(d)});
  for (int i = 0; i < cfg.n_rnn_layers; ++i) net.rnns.push_back(nn::BiRnn::init(d, d, rng));
  net.head = nn::Linear::init(d, n_classes, rng);
  return net;
}

AsrNet AsrNet::zeros_like() const {
  AsrNet g;
  g.inproj = inproj.zeros_like();
  for (const auto& b : convs) g.convs.push_back({b.conv.zeros_like(), b.ln.zeros_like()});
  for (const auto& r : rnns) g.rnns.push_back(r.zeros_like());
  g.head = head.zeros_like();
  return g;
}

void AsrNet::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  inproj.visit(prefix + "inproj", fn);
  for (size_t i = 0; i < convs.size(); ++i) {
    convs[i].conv.visit(prefix + "conv" + std::to_string(i), fn);
    convs[i].ln.visit(prefix + "ln" + std::to_string(i), fn);
  }
  for (size_t i = 0; i < rnns.size(); ++i) rnns[i].visit(prefix + "rnn" + std::to_string(i), fn);
  head.visit(prefix + "head", fn);
}

Mat AsrNet::encode(const Mat& x_norm, Tape& tape) const {
  tape.x_norm = x_norm;
  tape.in_act = nn::tanh_forward(inproj.forward(x_norm));
  Mat h = tape.in_act;
  tape.convs.resize(convs.size());
  for (size_t i = 0; i < convs.size(); ++i) {
    auto& c = tape.convs[i];
    c.input = h;
    c.act = nn::tanh_forward(convs[i].ln.forward(convs[i].conv.forward(h), c.ln));
    h = c.act + c.input;  // residual
  }
  tape.rnns.resize(rnns.size());
  for (size_t i = 0; i < rnns.size(); ++i) {
    h = rnns[i].forward(h, tape.rnns[i].rnn) + h;
  }
  tape.features = h;
  return h;
}

Mat AsrNet::backward(const Tape& tape, const Mat* d_features, const Mat* d_logits, AsrNet* grads) const {
  Mat dh;
  if (d_logits) {
    dh = head.backward(tape.features, *d_logits, grads ? &grads->head : nullptr);
    if (d_features) dh += *d_features;
  } else if (d_features) {
    dh = *d_features;
  } else {
    throw Error("AsrNet::backward: no upstream gradient");
  }

  for (size_t i = rnns.size(); i-- > 0;) {
    dh = rnns[i].backward(dh, tape.rnns[i].rnn, grads ? &grads->rnns[i] : nullptr) + dh;
  }
  for (size_t i = convs.size(); i-- > 0;) {
    const auto& c = tape.convs[i];
    const Mat d_ln = nn::tanh_backward(dh, c.act);
    const Mat d_conv = convs[i].ln.backward(d_ln, c.ln, grads ? &grads->convs[i].ln : nullptr);
    dh = convs[i].conv.backward(c.input, d_conv, grads ? &grads->convs[i].conv : nullptr) + dh;
  }
  const Mat d_in = nn::tanh_backward(dh, tape.in_act);
  return inproj.backward(tape.x_norm, d_in, grads ? &grads->inproj : nullptr);
}

std::string AsrModel::hash() const {
  uint64_t h = nn::param_checksum(const_cast<AsrNet&>(net));
  for (const auto& t : vocab.tokens) h = fnv1a64(t, h);
  h = fnv1a64(&iteration, sizeof(iteration), h);
  return hex64(h);
}

namespace {

Mat normalize_input(const AsrModel& model, const MelSpectrogram& mel) {
  if (mel.bins() != model.cfg.n_mels)
    throw Error("asr: mel has " + std::to_string(mel.bins()) + " bins, expected " +
                std::to_string(model.cfg.n_mels));
  return (mel.data.rowwise() - model.stats.mean).array().rowwise() / model.stats.std.array();
}

std::vector<int> transcript_indices(const TokenVocabulary& vocab, const Transcript& t) {
  std::vector<int> ids;
  ids.reserve(t.size());
  for (const auto& tok : t) ids.push_back(vocab.index_of(tok));
  return ids;
}

}  // namespace

Mat encode(const AsrModel& model, const MelSpectrogram& mel) {
  AsrNet::Tape tape;
  return model.net.encode(normalize_input(model, mel), tape);
}

Mat encode_with_tape(const AsrModel& model, const MelSpectrogram& mel, EncodeTape& tape) {
  return model.net.encode(normalize_input(model, mel), tape.tape);
}

Mat encode_backward_to_input(const AsrModel& model, const EncodeTape& tape, const Mat& d_features) {
  const Mat dx_norm = model.net.backward(tape.tape, &d_features, nullptr, nullptr);
  return dx_norm.array().rowwise() / model.stats.std.array();
}

double asr_ctc_loss(const AsrModel& model, const MelSpectrogram& mel, const Transcript& transcript) {
  AsrNet::Tape tape;
  const Mat features = model.net.encode(normalize_input(model, mel), tape);
  const Mat logits = model.net.head.forward(features);
  return ctc_loss(logits, transcript_indices(model.vocab, transcript), model.vocab.blank_index);
}

Transcript greedy_decode(const AsrModel& model, const MelSpectrogram& mel) {
  AsrNet::Tape tape;
  const Mat features = model.net.encode(normalize_input(model, mel), tape);
  const Mat logits = model.net.head.forward(features);
  Transcript out;
  int prev = model.vocab.blank_index;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index k;
    logits.row(t).maxCoeff(&k);
    const int cur = static_cast<int>(k);
    if (cur != model.vocab.blank_index && cur != prev)
      out.push_back(model.vocab.tokens[static_cast<size_t>(cur)]);
    prev = cur;
  }
  return out;
}

WerReport evaluate_wer(const AsrModel& model, const DatasetManifest& manifest, FeatureStore& store) {
  WerReport report;
  for (const auto& u : manifest.utterances) {
    const auto hyp = greedy_decode(model, store.get(manifest, u));
    report.add(u.id, word_error_rate(u.transcript, hyp));
  }
  return report;
}

MixingSampler::MixingSampler(int ratio_base, int ratio_target, size_t n_base, size_t n_target,
                             uint64_t seed)
    : a_(ratio_base), b_(ratio_target), n_base_(n_base), n_target_(n_target), rng_(seed) {
  if (a_ < 1 || b_ < 1) throw Error("MixingSampler: ratio components must be positive");
  if (n_target_ == 0) throw Error("MixingSampler: target pool is empty");
}

std::pair<bool, size_t> MixingSampler::next() {
  const uint64_t period = static_cast<uint64_t>(a_) + static_cast<uint64_t>(b_);
  const bool base_slot = (n_ + 1) * static_cast<uint64_t>(a_) / period > n_ * static_cast<uint64_t>(a_) / period;
  ++n_;
  if (base_slot && n_base_ > 0) return {true, rng_.uniform_int(n_base_)};
  return {false, rng_.uniform_int(n_target_)};
}

namespace {

struct TrainItem {
  const DatasetManifest* manifest;
  const Utterance* utt;
};

// Shared training loop for base training and fine-tuning. `sample` yields the
// next item; the best-validation-WER parameter snapshot is what gets returned.
AsrTrainResult run_training(AsrModel model, const DatasetManifest& val, const AsrTrainOptions& options,
                            int steps, double lr, int warmup,
                            const std::function<TrainItem(int&)>& sample, FeatureStore& store,
                            bool eval_initial) {
  const AsrTrainConfig& tc = options.train;
  AsrNet grads = model.net.zeros_like();
  auto [params, grad_ptrs] = nn::param_grad_pairs(model.net, grads);
  nn::AdamConfig acfg;
  acfg.lr = lr;
  acfg.warmup_steps = warmup;
  acfg.grad_clip = tc.grad_clip;
  nn::Adam adam(acfg, params, grad_ptrs);

  AsrTrainResult result;
  result.model = model;  // snapshot of the best parameters so far
  result.best_val_wer = std::numeric_limits<double>::infinity();

  auto run_eval = [&](AsrModel& m, int step) {
    const WerReport report = evaluate_wer(m, val, store);
    WerRecord rec;
    rec.model_id = m.hash();
    rec.manifest_tag = val.tag;
    rec.wer = report.wer;
    rec.n_words = report.n_ref_words;
    rec.n_utts = report.n_utterances;
    rec.step = step;
    result.eval_log.push_back(rec);
    if (report.wer < result.best_val_wer) {
      result.best_val_wer = report.wer;
      result.model = m;
    }
    result.final_val_wer = report.wer;
    return report.wer;
  };

  if (eval_initial) run_eval(model, 0);

  for (int step = 1; step <= steps; ++step) {
    adam.zero_grads();
    int base_in_batch = 0;
    double batch_loss = 0.0;
    for (int item = 0; item < tc.batch_items; ++item) {
      const TrainItem ti = sample(base_in_batch);
      const MelSpectrogram& mel = store.get(*ti.manifest, *ti.utt);
      AsrNet::Tape tape;
      const Mat features = model.net.encode(normalize_input(model, mel), tape);
      const Mat logits = model.net.head.forward(features);
      Mat dlogits;
      const double loss =
          ctc_loss(logits, transcript_indices(model.vocab, ti.utt->transcript),
                   model.vocab.blank_index, &dlogits);
      if (!std::isfinite(loss))
        throw Error("ASR training diverged: non-finite CTC loss at step " + std::to_string(step) +
                    " on utterance '" + ti.utt->id + "'");
      batch_loss += loss;
      dlogits *= 1.0 / tc.batch_items;
      model.net.backward(tape, nullptr, &dlogits, &grads);
    }
    if (!std::isfinite(batch_loss))
      throw Error("ASR training diverged: non-finite batch loss at step " + std::to_string(step));
    result.base_items_per_batch.push_back(base_in_batch);
    adam.step();

    if (step % tc.eval_every == 0 || step == steps) run_eval(model, step);
  }
  return result;
}

}  // namespace

AsrTrainResult train_asr(const DatasetManifest& train, const DatasetManifest& val,
                         const AsrTrainOptions& options) {
  options.train.validate();
  if (train.utterances.empty()) throw Error("train_asr: empty training manifest");
  if (!(train.vocabulary == val.vocabulary))
    throw Error("train_asr: train/validation vocabulary mismatch");

  FeatureStore store(options.features, options.cache_root);

  AsrModel model;
  model.cfg = options.model;
  model.vocab = train.vocabulary;
  model.stats = fit_normalization(train, store);
  model.iteration = options.iteration;
  model.seed = options.train.seed;
  Rng init_rng(derive_seed(options.train.seed, "asr-init"));
  model.net = AsrNet::init(model.cfg, model.n_classes(), init_rng);

  Rng batch_rng(derive_seed(options.train.seed, "asr-batches"));
  auto sample = [&](int&) {
    const size_t i = batch_rng.uniform_int(train.utterances.size());
    return TrainItem{&train, &train.utterances[i]};
  };
  return run_training(std::move(model), val, options, options.train.max_steps,
                      options.train.learning_rate, options.train.warmup_steps, sample, store, true);
}

AsrTrainResult finetune_asr(const AsrModel& model, const DatasetManifest& base,
                            const DatasetManifest& target, const DatasetManifest& augmented,
                            const DatasetManifest& val, const AsrTrainOptions& options) {
  options.train.validate();
  for (const DatasetManifest* m : {&base, &target, &augmented}) {
    if (!m->utterances.empty() && !(m->vocabulary == model.vocab))
      throw Error("finetune_asr: manifest vocabulary does not match the model (tag '" + m->tag + "')");
  }
  if (target.utterances.empty() && augmented.utterances.empty())
    throw Error("finetune_asr: target and augmented manifests are both empty");

  FeatureStore store(options.features, options.cache_root);

  // target + augmented fills the ratio_target share; an empty augmented
  // manifest is valid, target alone fills it.
  std::vector<TrainItem> target_pool;
  for (const auto& u : target.utterances) target_pool.push_back({&target, &u});
  for (const auto& u : augmented.utterances) target_pool.push_back({&augmented, &u});

  AsrModel tuned = model;
  tuned.iteration = options.iteration;
  tuned.augmented_manifest_hash = options.augmented_manifest_hash;

  MixingSampler sampler(options.train.ratio_base, options.train.ratio_target,
                        base.utterances.size(), target_pool.size(),
                        derive_seed(options.train.seed, "asr-finetune-batches"));
  auto sample = [&](int& base_count) {
    const auto [is_base, idx] = sampler.next();
    if (is_base) {
      base_count += 1;
      return TrainItem{&base, &base.utterances[idx]};
    }
    return target_pool[idx];
  };
  return run_training(std::move(tuned), val, options, options.train.finetune_steps,
                      options.train.finetune_learning_rate, 0, sample, store, true);
}

void save_asr_model(const AsrModel& model, const fs::path& path, const std::string& config_hash) {
  nlohmann::json h;
  h["schema"] = "itervc-ckpt-v1";
  h["kind"] = "asr";
  h["iteration"] = model.iteration;
  h["seed"] = model.seed;
  h["model_hash"] = model.hash();
  h["config_hash"] = config_hash;
  h["augmented_manifest_hash"] = model.augmented_manifest_hash;
  h["vocabulary"] = {{"tokens", model.vocab.tokens}, {"blank_index", model.vocab.blank_index}};
  h["model"] = {{"encoder_width", model.cfg.encoder_width},
                {"conv_kernel", model.cfg.conv_kernel},
                {"n_conv_blocks", model.cfg.n_conv_blocks},
                {"n_rnn_layers", model.cfg.n_rnn_layers},
                {"n_mels", model.cfg.n_mels}};

  std::vector<std::pair<std::string, const Mat*>> tensors;
  const Mat mean = model.stats.mean, std = model.stats.std;
  tensors.emplace_back("stats.mean", &mean);
  tensors.emplace_back("stats.std", &std);
  const_cast<AsrNet&>(model.net).visit("", [&](const std::string& name, Mat& m) {
    tensors.emplace_back(name, &m);
  });
  save_checkpoint(path, h, tensors);
}

AsrModel load_asr_model(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "asr")
    throw Error("checkpoint " + path.string() + " is not an ASR model");

  AsrModel model;
  const auto& mc = ck.header.at("model");
  model.cfg.encoder_width = mc.at("encoder_width").get<int>();
  model.cfg.conv_kernel = mc.at("conv_kernel").get<int>();
  model.cfg.n_conv_blocks = mc.at("n_conv_blocks").get<int>();
  model.cfg.n_rnn_layers = mc.at("n_rnn_layers").get<int>();
  model.cfg.n_mels = mc.at("n_mels").get<int>();
  model.vocab.tokens = ck.header.at("vocabulary").at("tokens").get<std::vector<std::string>>();
  model.vocab.blank_index = ck.header.at("vocabulary").at("blank_index").get<int>();
  model.iteration = ck.header.at("iteration").get<int>();
  model.seed = ck.header.at("seed").get<uint64_t>();
  model.augmented_manifest_hash = ck.header.value("augmented_manifest_hash", "");
  model.stats.mean = ck.tensors.at("stats.mean").row(0);
  model.stats.std = ck.tensors.at("stats.std").row(0);

  Rng rng(0);
  model.net = AsrNet::init(model.cfg, model.n_classes(), rng);
  model.net.visit("", [&](const std::string& name, Mat& m) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw Error("checkpoint " + path.string() + " missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw Error("checkpoint " + path.string() + " tensor " + name + " has wrong shape");
    m = it->second;
  });
  return model;
}

}  // namespace itervc
