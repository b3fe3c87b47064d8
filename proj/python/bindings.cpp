// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/config.hpp"
#include "itervc/conversion_eval.hpp"
#include "itervc/ctc.hpp"
#include "itervc/metrics.hpp"
#include "itervc/orchestrator.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace itervc;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Mat to_mat(const DoubleArray& a) {
  if (a.ndim() != 2) throw Error("expected a 2-d float array");
  auto buf = a.unchecked<2>();
  Mat m(buf.shape(0), buf.shape(1));
  for (py::ssize_t r = 0; r < buf.shape(0); ++r)
    for (py::ssize_t c = 0; c < buf.shape(1); ++c) m(r, c) = buf(r, c);
  return m;
}

py::array_t<double> from_mat(const Mat& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  auto w = out.mutable_unchecked<2>();
  for (py::ssize_t r = 0; r < w.shape(0); ++r)
    for (py::ssize_t c = 0; c < w.shape(1); ++c) w(r, c) = m(r, c);
  return out;
}

SyntheticCorpusSpec spec_from_kwargs(int n_speakers, int n_utterances_per_speaker, int vocab_size,
                                     int min_tokens, int max_tokens, uint64_t seed) {
  SyntheticCorpusSpec spec;
  spec.n_speakers = n_speakers;
  spec.n_utterances_per_speaker = n_utterances_per_speaker;
  spec.vocab_size = vocab_size;
  spec.min_tokens = min_tokens;
  spec.max_tokens = max_tokens;
  spec.seed = seed;
  return spec;
}

py::dict manifest_summary(const DatasetManifest& m) {
  py::dict d;
  d["n_utterances"] = m.utterances.size();
  d["tag"] = m.tag;
  d["sample_rate"] = m.sample_rate_hz;
  py::list speakers;
  for (const auto& s : m.speakers()) speakers.append(s);
  d["speakers"] = speakers;
  py::list utts;
  for (const auto& u : m.utterances) {
    py::dict ud;
    ud["id"] = u.id;
    ud["speaker"] = u.speaker;
    ud["text"] = join_tokens(u.transcript);
    ud["duration"] = u.duration_s;
    utts.append(ud);
  }
  d["utterances"] = utts;
  return d;
}

}  // namespace

PYBIND11_MODULE(_itervc, m) {
  m.doc() = "iterative co-training of a CTC recognizer and a voice-conversion model";

  // Translators run newest-first: register the base before the derived so
  // ConfigError is not swallowed by the generic handler.
  py::register_exception<Error>(m, "IterVcError");
  py::register_exception<ConfigError>(m, "ConfigError");

  m.def(
      "generate_synthetic_corpus",
      [](const fs::path& out_dir, int n_speakers, int n_utterances_per_speaker, int vocab_size,
         int min_tokens, int max_tokens, uint64_t seed, const std::string& tag) {
        const auto manifest = generate_synthetic_corpus(
            spec_from_kwargs(n_speakers, n_utterances_per_speaker, vocab_size, min_tokens, max_tokens,
                             seed),
            out_dir, tag);
        return manifest_summary(manifest);
      },
      py::arg("out_dir"), py::arg("n_speakers") = 10, py::arg("n_utterances_per_speaker") = 40,
      py::arg("vocab_size") = 12, py::arg("min_tokens") = 4, py::arg("max_tokens") = 8,
      py::arg("seed") = 1, py::arg("tag") = "target");

  m.def(
      "load_manifest", [](const fs::path& path) { return manifest_summary(load_manifest(path)); },
      py::arg("path"));

  m.def(
      "melspectrogram",
      [](const std::vector<double>& samples, int sample_rate) {
        Waveform wav;
        wav.samples = samples;
        wav.sample_rate_hz = sample_rate;
        FeatureConfig cfg;
        cfg.sample_rate_hz = sample_rate;
        cfg.fmax = sample_rate / 2.0;
        return from_mat(melspectrogram(wav, cfg).data);
      },
      py::arg("samples"), py::arg("sample_rate") = 24000,
      "80-bin log-mel spectrogram (frames x 80)");

  m.def(
      "word_error_rate",
      [](const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
        const EditCounts c = word_error_rate(reference, hypothesis);
        py::dict d;
        d["wer"] = c.wer;
        d["substitutions"] = c.substitutions;
        d["insertions"] = c.insertions;
        d["deletions"] = c.deletions;
        d["n_ref"] = c.n_ref;
        return d;
      },
      py::arg("reference"), py::arg("hypothesis"));

  m.def(
      "ctc_loss",
      [](const DoubleArray& logits, const std::vector<int>& target, int blank_index) {
        return ctc_loss(to_mat(logits), target, blank_index);
      },
      py::arg("logits"), py::arg("target"), py::arg("blank_index"));

  m.def(
      "ctc_loss_grad",
      [](const DoubleArray& logits, const std::vector<int>& target, int blank_index) {
        Mat dlogits;
        const double loss = ctc_loss(to_mat(logits), target, blank_index, &dlogits);
        return py::make_tuple(loss, from_mat(dlogits));
      },
      py::arg("logits"), py::arg("target"), py::arg("blank_index"));

  m.def(
      "identity_similarity",
      [](const DoubleArray& a, const DoubleArray& b) {
        return identity_similarity(to_mat(a), to_mat(b));
      },
      py::arg("a"), py::arg("b"));

  m.def("has_converged", py::overload_cast<const std::vector<double>&, double, double>(&has_converged),
        py::arg("val_wers"), py::arg("epsilon") = 0.01, py::arg("abs_epsilon") = 0.25);

  m.def(
      "iterate",
      [](const fs::path& config_path, const fs::path& out_dir, bool resume) {
        const auto config = ExperimentConfig::load(config_path);
        const IterationHistory history = run_iterations(config, out_dir, resume);
        py::list records;
        for (const auto& r : history.records) {
          py::dict d;
          d["i"] = r.i;
          d["asr_val_wer"] = r.metrics.asr_val_wer;
          d["vc_eval_wer"] = r.metrics.vc_eval_wer;
          d["identity_mean"] = r.metrics.identity_mean;
          records.append(d);
        }
        return records;
      },
      py::arg("config_path"), py::arg("out_dir"), py::arg("resume") = false,
      "Run the full iterative training loop and return per-iteration metrics");

  m.def(
      "history_table", [](const fs::path& run_dir) { return format_history_table(run_dir); },
      py::arg("run_dir"));
}
