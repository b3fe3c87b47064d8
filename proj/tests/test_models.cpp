// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "itervc/asr.hpp"
#include "itervc/speaker.hpp"
#include "itervc/vc.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace itervc;
using test::TempDir;

namespace {

// Small corpus shared by the model tests; generated once.
struct Fixture {
  TempDir tmp{"models"};
  DatasetManifest manifest;
  FeatureConfig features;
  AsrModel asr;
  SpeakerEncoder spk;

  Fixture() {
    SyntheticCorpusSpec spec;
    spec.n_speakers = 4;
    spec.n_utterances_per_speaker = 6;
    spec.vocab_size = 6;
    spec.min_tokens = 3;
    spec.max_tokens = 5;
    spec.seed = 21;
    manifest = generate_synthetic_corpus(spec, tmp.path() / "c");

    AsrTrainOptions aopt;
    aopt.model.encoder_width = 32;
    aopt.train.max_steps = 60;
    aopt.train.warmup_steps = 10;
    aopt.train.eval_every = 30;
    aopt.train.batch_items = 4;
    aopt.train.seed = 5;
    aopt.features = features;
    asr = train_asr(manifest, manifest, aopt).model;

    SpeakerTrainOptions sopt;
    sopt.model.width = 32;
    sopt.model.embed_dim = 16;
    sopt.train.steps = 80;
    sopt.train.batch_items = 8;
    sopt.train.seed = 6;
    sopt.features = features;
    spk = train_speaker_encoder(manifest, sopt);
  }

  const MelSpectrogram& mel(size_t i) {
    static FeatureStore store(FeatureConfig{}, "");
    return store.get(manifest, manifest.utterances[i]);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

VcModel make_untrained_vc(const Fixture& f, uint64_t seed = 9) {
  VcModel vc;
  vc.cfg.channels = 24;
  vc.cfg.embed_dim = f.spk.cfg.embed_dim;
  FeatureStore store(f.features, "");
  vc.stats = fit_normalization(f.manifest, store);
  Rng rng(seed);
  vc.net = VcNet::init(vc.cfg, rng);
  vc.asr_hash = f.asr.hash();
  vc.speaker_encoder_hash = f.spk.hash();
  for (const auto& s : f.manifest.speakers()) vc.speakers.push_back(s);
  return vc;
}

}  // namespace

TEST_CASE("encode is deterministic with the shape contract") {
  auto& f = fixture();
  const MelSpectrogram& mel = f.mel(0);
  const Mat a = encode(f.asr, mel);
  const Mat b = encode(f.asr, mel);
  CHECK(a.rows() == mel.frames());
  CHECK(a.cols() == f.asr.cfg.encoder_width);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.allFinite());
}

TEST_CASE("encode rejects bin-count mismatches") {
  auto& f = fixture();
  MelSpectrogram bad = f.mel(0);
  bad.data = Mat::Zero(12, 40);
  CHECK_THROWS_AS(encode(f.asr, bad), Error);
}

TEST_CASE("encode input gradient matches finite differences on a 6-frame mel") {
  auto& f = fixture();
  MelSpectrogram mel = f.mel(0);
  mel.data = mel.data.topRows(6).eval();

  Rng rng(41);
  Mat u(6, f.asr.cfg.encoder_width);
  for (Eigen::Index r = 0; r < u.rows(); ++r)
    for (Eigen::Index c = 0; c < u.cols(); ++c) u(r, c) = rng.normal();

  // Scalar probe L = sum(u .* encode(mel)); analytic dL/dmel via backward.
  EncodeTape tape;
  encode_with_tape(f.asr, mel, tape);
  const Mat analytic = encode_backward_to_input(f.asr, tape, u);

  const double h = 1e-5;
  double max_rel = 0.0;
  Rng pick(42);
  for (int trial = 0; trial < 40; ++trial) {
    const auto r = static_cast<Eigen::Index>(pick.uniform_int(6));
    const auto c = static_cast<Eigen::Index>(pick.uniform_int(80));
    const double saved = mel.data(r, c);
    mel.data(r, c) = saved + h;
    const double up = (u.array() * encode(f.asr, mel).array()).sum();
    mel.data(r, c) = saved - h;
    const double down = (u.array() * encode(f.asr, mel).array()).sum();
    mel.data(r, c) = saved;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({1e-8, std::abs(fd), std::abs(analytic(r, c))});
    max_rel = std::max(max_rel, std::abs(fd - analytic(r, c)) / denom);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("asr ctc loss wires the head to the shared ctc") {
  auto& f = fixture();
  const auto& utt = f.manifest.utterances[0];
  const double loss = asr_ctc_loss(f.asr, f.mel(0), utt.transcript);
  CHECK(loss >= 0.0);
  CHECK(std::isfinite(loss));

  Transcript too_long;
  for (Eigen::Index i = 0; i < f.mel(0).frames() + 1; ++i) too_long.push_back("a");
  CHECK_THROWS_AS(asr_ctc_loss(f.asr, f.mel(0), too_long), Error);
}

TEST_CASE("greedy decode collapses repeats and drops blanks") {
  // Hand-built model whose head maps mel bin b to class b, so argmaxes are
  // scripted through the input.
  TokenVocabulary vocab = TokenVocabulary::letters(2);  // a, b, blank=2
  AsrModel model;
  model.cfg.encoder_width = 4;
  model.cfg.n_conv_blocks = 0;
  model.cfg.n_rnn_layers = 0;
  model.cfg.n_mels = 3;
  model.vocab = vocab;
  model.stats.mean = RowVec::Zero(3);
  model.stats.std = RowVec::Ones(3);
  Rng rng(1);
  model.net = AsrNet::init(model.cfg, 3, rng);
  // inproj passes bins through tanh; head picks them out again.
  model.net.inproj.W = Mat::Zero(3, 4);
  model.net.inproj.W(0, 0) = model.net.inproj.W(1, 1) = model.net.inproj.W(2, 2) = 1.0;
  model.net.inproj.b.setZero();
  model.net.head.W = Mat::Zero(4, 3);
  model.net.head.W(0, 0) = model.net.head.W(1, 1) = model.net.head.W(2, 2) = 1.0;
  model.net.head.b.setZero();

  auto mel_for = [&](const std::vector<int>& classes) {
    MelSpectrogram mel;
    mel.data = Mat::Zero(static_cast<Eigen::Index>(classes.size()), 3);
    for (size_t t = 0; t < classes.size(); ++t) mel.data(static_cast<Eigen::Index>(t), classes[t]) = 3.0;
    return mel;
  };

  CHECK(greedy_decode(model, mel_for({0, 0, 2, 1})) == Transcript{"a", "b"});
  CHECK(greedy_decode(model, mel_for({2, 2, 2})) == Transcript{});
  CHECK(greedy_decode(model, mel_for({0, 2, 0})) == Transcript{"a", "a"});
}

TEST_CASE("decoding is invariant to batch composition") {
  // Items are processed one at a time (no padding anywhere), so decoding an
  // utterance alone equals decoding it "inside" any batch; spot-check by
  // interleaving decodes.
  auto& f = fixture();
  const Transcript alone = greedy_decode(f.asr, f.mel(1));
  greedy_decode(f.asr, f.mel(0));
  const Transcript interleaved = greedy_decode(f.asr, f.mel(1));
  CHECK(alone == interleaved);
}

TEST_CASE("train_asr is deterministic given the seed") {
  auto& f = fixture();
  AsrTrainOptions opt;
  opt.model.encoder_width = 16;
  opt.train.max_steps = 20;
  opt.train.warmup_steps = 5;
  opt.train.eval_every = 10;
  opt.train.batch_items = 2;
  opt.train.seed = 77;
  opt.features = f.features;
  const AsrTrainResult a = train_asr(f.manifest, f.manifest, opt);
  const AsrTrainResult b = train_asr(f.manifest, f.manifest, opt);
  CHECK(a.best_val_wer == b.best_val_wer);
  CHECK(a.model.hash() == b.model.hash());
}

TEST_CASE("train_asr rejects an empty manifest and reports best <= final") {
  auto& f = fixture();
  DatasetManifest empty = f.manifest;
  empty.utterances.clear();
  AsrTrainOptions opt;
  opt.features = f.features;
  CHECK_THROWS_AS(train_asr(empty, f.manifest, opt), Error);
}

TEST_CASE("best-checkpoint contract: reported WER never exceeds the final model's") {
  auto& f = fixture();
  AsrTrainOptions opt;
  opt.model.encoder_width = 16;
  opt.train.max_steps = 40;
  opt.train.warmup_steps = 5;
  opt.train.eval_every = 10;
  opt.train.batch_items = 2;
  opt.train.seed = 3;
  opt.features = f.features;
  const AsrTrainResult r = train_asr(f.manifest, f.manifest, opt);
  CHECK(r.best_val_wer <= r.final_val_wer);
  CHECK(!r.eval_log.empty());
}

TEST_CASE("mixing sampler realizes 1:3 within one item per window") {
  MixingSampler sampler(1, 3, 100, 300, 123);
  std::vector<int> base_per_batch;
  for (int b = 0; b < 100; ++b) {
    int count = 0;
    for (int i = 0; i < 8; ++i) count += sampler.next().first ? 1 : 0;
    base_per_batch.push_back(count);
  }
  int total = 0;
  for (int c : base_per_batch) total += c;
  CHECK(std::abs(total - 200) <= 1);
  for (size_t w = 0; w + 4 <= base_per_batch.size(); ++w) {
    const int window = base_per_batch[w] + base_per_batch[w + 1] + base_per_batch[w + 2] +
                       base_per_batch[w + 3];
    CHECK(std::abs(window - 8) <= 1);
  }
}

TEST_CASE("finetune audits the mix and tolerates an empty augmented manifest") {
  auto& f = fixture();
  DatasetManifest augmented = f.manifest;
  augmented.utterances.clear();
  augmented.tag = "augmented";

  AsrTrainOptions opt;
  opt.model.encoder_width = 32;
  opt.train.finetune_steps = 12;
  opt.train.eval_every = 6;
  opt.train.batch_items = 8;
  opt.train.seed = 9;
  opt.features = f.features;
  const AsrTrainResult r = finetune_asr(f.asr, f.manifest, f.manifest, augmented, f.manifest, opt);
  REQUIRE(r.base_items_per_batch.size() == 12);
  for (size_t w = 0; w + 4 <= r.base_items_per_batch.size(); ++w) {
    int window = 0;
    for (size_t k = w; k < w + 4; ++k) window += r.base_items_per_batch[k];
    CHECK(std::abs(window - 8) <= 1);
  }
}

TEST_CASE("finetune restarts at the finetune learning rate default") {
  AsrTrainConfig cfg;
  CHECK(cfg.finetune_learning_rate == 0.00025);
  CHECK(cfg.finetune_learning_rate == doctest::Approx(cfg.learning_rate / 10.0));
}

TEST_CASE("finetune rejects vocabulary mismatches and empty pools") {
  auto& f = fixture();
  DatasetManifest other = f.manifest;
  other.vocabulary = TokenVocabulary::letters(9);
  AsrTrainOptions opt;
  opt.features = f.features;
  CHECK_THROWS_AS(finetune_asr(f.asr, f.manifest, other, other, f.manifest, opt), Error);

  DatasetManifest empty = f.manifest;
  empty.utterances.clear();
  CHECK_THROWS_AS(finetune_asr(f.asr, f.manifest, empty, empty, f.manifest, opt), Error);
}

TEST_CASE("asr checkpoints round-trip exactly") {
  auto& f = fixture();
  TempDir tmp("ckpt");
  save_asr_model(f.asr, tmp.path() / "a.ckpt", "cfg123");
  const AsrModel back = load_asr_model(tmp.path() / "a.ckpt");
  CHECK(back.hash() == f.asr.hash());
  CHECK(back.vocab == f.asr.vocab);
  const Mat a = encode(f.asr, f.mel(0));
  const Mat b = encode(back, f.mel(0));
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("speaker embeddings are unit norm and average consistently") {
  auto& f = fixture();
  const SpeakerEmbedding e1 = embed(f.spk, f.mel(0));
  CHECK(std::abs(e1.norm() - 1.0) < 1e-6);
  const SpeakerEmbedding e2 = embed(f.spk, {&f.mel(0), &f.mel(0)});
  CHECK((e1 - e2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embed rejects too-short mels") {
  auto& f = fixture();
  MelSpectrogram tiny = f.mel(0);
  tiny.data = tiny.data.topRows(5).eval();
  CHECK_THROWS_AS(embed(f.spk, tiny), Error);
}

TEST_CASE("identity similarity is a clamped symmetric cosine") {
  auto& f = fixture();
  const SpeakerEmbedding v = embed(f.spk, f.mel(0));
  const SpeakerEmbedding w = embed(f.spk, f.mel(7));
  CHECK(identity_similarity(v, v) == doctest::Approx(1.0));
  CHECK(identity_similarity(v, Mat(-v)) == doctest::Approx(-1.0));
  CHECK(identity_similarity(v, w) == doctest::Approx(identity_similarity(w, v)));
  CHECK(identity_similarity(v, w) >= -1.0);
  CHECK(identity_similarity(v, w) <= 1.0);
  Mat bad = Mat::Ones(1, 3);
  CHECK_THROWS_AS(identity_similarity(v, bad), Error);
}

TEST_CASE("speaker training needs two speakers and is seed-deterministic") {
  auto& f = fixture();
  DatasetManifest one = f.manifest;
  one.utterances.erase(std::remove_if(one.utterances.begin(), one.utterances.end(),
                                      [&](const Utterance& u) {
                                        return u.speaker != f.manifest.utterances[0].speaker;
                                      }),
                       one.utterances.end());
  SpeakerTrainOptions opt;
  opt.features = f.features;
  CHECK_THROWS_AS(train_speaker_encoder(one, opt), Error);

  SpeakerTrainOptions small;
  small.model.width = 16;
  small.model.embed_dim = 8;
  small.train.steps = 15;
  small.train.seed = 4;
  small.features = f.features;
  const SpeakerEncoder a = train_speaker_encoder(f.manifest, small);
  const SpeakerEncoder b = train_speaker_encoder(f.manifest, small);
  CHECK(a.hash() == b.hash());
}

TEST_CASE("speaker checkpoints round-trip") {
  auto& f = fixture();
  TempDir tmp("spkckpt");
  save_speaker_encoder(f.spk, tmp.path() / "s.ckpt");
  const SpeakerEncoder back = load_speaker_encoder(tmp.path() / "s.ckpt");
  CHECK(back.hash() == f.spk.hash());
  CHECK((embed(back, f.mel(0)) - embed(f.spk, f.mel(0))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("convert preserves frame count and is deterministic") {
  auto& f = fixture();
  const VcModel vc = make_untrained_vc(f);
  const SpeakerEmbedding s = embed(f.spk, f.mel(3));
  const MelSpectrogram a = convert(vc, f.mel(0), s);
  const MelSpectrogram b = convert(vc, f.mel(0), s);
  CHECK(a.frames() == f.mel(0).frames());
  CHECK(a.bins() == 80);
  CHECK(a.data.allFinite());
  CHECK((a.data - b.data).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("convert validates shapes and embedding norm") {
  auto& f = fixture();
  const VcModel vc = make_untrained_vc(f);
  SpeakerEmbedding s = embed(f.spk, f.mel(3));
  MelSpectrogram bad = f.mel(0);
  bad.data = Mat::Zero(10, 40);
  CHECK_THROWS_AS(convert(vc, bad, s), Error);
  s *= 2.0;
  CHECK_THROWS_AS(convert(vc, f.mel(0), s), Error);
}

TEST_CASE("speech consistency loss is exactly zero on identical mels") {
  auto& f = fixture();
  CHECK(speech_consistency_loss(f.asr, f.mel(0), f.mel(0)) == 0.0);
}

TEST_CASE("speech consistency loss matches a recomputation through encode") {
  auto& f = fixture();
  const VcModel vc = make_untrained_vc(f);
  const MelSpectrogram converted = convert(vc, f.mel(0), embed(f.spk, f.mel(5)));
  const double loss = speech_consistency_loss(f.asr, f.mel(0), converted);

  const Mat h_src = encode(f.asr, f.mel(0));
  const Mat h_conv = encode(f.asr, converted);
  const double recomputed = (h_conv - h_src).array().abs().mean();
  CHECK(std::abs(loss - recomputed) < 1e-7);
  CHECK(loss >= 0.0);
}

TEST_CASE("speech consistency loss rejects frame mismatches") {
  auto& f = fixture();
  MelSpectrogram shorter = f.mel(0);
  shorter.data = shorter.data.topRows(shorter.frames() - 1).eval();
  CHECK_THROWS_AS(speech_consistency_loss(f.asr, f.mel(0), shorter), Error);
}

TEST_CASE("speech consistency gradient matches finite differences on 6-frame mels") {
  auto& f = fixture();
  Rng rng(55);
  double max_rel = 0.0;
  for (int instance = 0; instance < 20; ++instance) {
    MelSpectrogram src = f.mel(static_cast<size_t>(instance) % f.manifest.utterances.size());
    src.data = src.data.topRows(6).eval();
    MelSpectrogram conv = src;
    for (Eigen::Index r = 0; r < 6; ++r)
      for (Eigen::Index c = 0; c < 80; ++c) conv.data(r, c) += 0.3 * rng.normal();

    Mat analytic;
    speech_consistency_loss_grad(f.asr, src, conv, &analytic);

    const double h = 1e-5;
    for (int probe = 0; probe < 6; ++probe) {
      const auto r = static_cast<Eigen::Index>(rng.uniform_int(6));
      const auto c = static_cast<Eigen::Index>(rng.uniform_int(80));
      const double saved = conv.data(r, c);
      conv.data(r, c) = saved + h;
      const double up = speech_consistency_loss(f.asr, src, conv);
      conv.data(r, c) = saved - h;
      const double down = speech_consistency_loss(f.asr, src, conv);
      conv.data(r, c) = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({1e-8, std::abs(fd), std::abs(analytic(r, c))});
      max_rel = std::max(max_rel, std::abs(fd - analytic(r, c)) / denom);
    }
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("train_vc freezes the asr and speaker encoder") {
  auto& f = fixture();
  const uint64_t asr_sum = nn::param_checksum(const_cast<AsrNet&>(f.asr.net));
  const uint64_t spk_sum = nn::param_checksum(const_cast<SpkNet&>(f.spk.net));

  VcTrainOptions opt;
  opt.model.channels = 16;
  opt.train.steps = 8;
  opt.train.batch_items = 2;
  opt.train.eval_every = 4;
  opt.train.seed = 10;
  opt.features = f.features;
  const VcTrainResult r = train_vc(f.manifest, f.asr, f.spk, opt);

  CHECK(nn::param_checksum(const_cast<AsrNet&>(f.asr.net)) == asr_sum);
  CHECK(nn::param_checksum(const_cast<SpkNet&>(f.spk.net)) == spk_sum);
  CHECK(r.model.asr_hash == f.asr.hash());
  CHECK(std::isfinite(r.best_val_objective));
  CHECK(r.best_val_objective <= r.final_val_objective);
}

TEST_CASE("train_vc gradient flows from the consistency loss into decoder parameters") {
  auto& f = fixture();
  const VcModel vc = make_untrained_vc(f, 31);
  const MelSpectrogram& mel = f.mel(2);
  const SpeakerEmbedding s = embed(f.spk, f.mel(9));

  VcNet::Tape tape;
  const Mat x_norm =
      ((mel.data.rowwise() - vc.stats.mean).array().rowwise() / vc.stats.std.array()).matrix();
  const Mat y_norm = vc.net.forward(x_norm, s, tape);
  MelSpectrogram converted = mel;
  converted.data =
      (y_norm.array().rowwise() * vc.stats.std.array()).matrix().rowwise() + vc.stats.mean;

  Mat d_raw;
  speech_consistency_loss_grad(f.asr, mel, converted, &d_raw);
  const Mat dy_norm = (d_raw.array().rowwise() * vc.stats.std.array()).matrix();
  VcNet grads = vc.net.zeros_like();
  vc.net.backward(tape, dy_norm, &grads);

  double decoder_grad_norm = 0.0;
  for (const auto& block : grads.dec)
    decoder_grad_norm += block.conv.W.squaredNorm() + block.film.Wg.squaredNorm();
  CHECK(decoder_grad_norm > 0.0);
}

TEST_CASE("train_vc defaults carry lambda_asr = 100 and the zero-weight ablation is valid") {
  VcTrainConfig cfg;
  CHECK(cfg.lambda_asr == 100.0);

  auto& f = fixture();
  VcTrainOptions opt;
  opt.model.channels = 16;
  opt.train.lambda_asr = 0.0;
  opt.train.steps = 4;
  opt.train.batch_items = 2;
  opt.train.eval_every = 2;
  opt.train.seed = 11;
  opt.features = f.features;
  const VcTrainResult r = train_vc(f.manifest, f.asr, f.spk, opt);
  CHECK(std::isfinite(r.final_val_objective));
}

TEST_CASE("train_vc requires two speakers") {
  auto& f = fixture();
  DatasetManifest one = f.manifest;
  one.utterances.erase(std::remove_if(one.utterances.begin(), one.utterances.end(),
                                      [&](const Utterance& u) {
                                        return u.speaker != f.manifest.utterances[0].speaker;
                                      }),
                       one.utterances.end());
  VcTrainOptions opt;
  opt.features = f.features;
  CHECK_THROWS_AS(train_vc(one, f.asr, f.spk, opt), Error);
}

TEST_CASE("optional adversarial term trains without diverging") {
  auto& f = fixture();
  VcTrainOptions opt;
  opt.model.channels = 16;
  opt.train.lambda_adv = 0.1;
  opt.train.steps = 6;
  opt.train.batch_items = 2;
  opt.train.eval_every = 3;
  opt.train.seed = 12;
  opt.features = f.features;
  const uint64_t asr_sum = nn::param_checksum(const_cast<AsrNet&>(f.asr.net));
  const VcTrainResult r = train_vc(f.manifest, f.asr, f.spk, opt);
  CHECK(std::isfinite(r.final_val_objective));
  CHECK(nn::param_checksum(const_cast<AsrNet&>(f.asr.net)) == asr_sum);
}

TEST_CASE("vc checkpoints round-trip with provenance") {
  auto& f = fixture();
  TempDir tmp("vcckpt");
  const VcModel vc = make_untrained_vc(f);
  save_vc_model(vc, tmp.path() / "v.ckpt", "cfgX");
  const VcModel back = load_vc_model(tmp.path() / "v.ckpt");
  CHECK(back.hash() == vc.hash());
  CHECK(back.asr_hash == f.asr.hash());
  CHECK(back.speakers == vc.speakers);
  const SpeakerEmbedding s = embed(f.spk, f.mel(3));
  CHECK((convert(back, f.mel(0), s).data - convert(vc, f.mel(0), s).data).cwiseAbs().maxCoeff() ==
        0.0);
}
