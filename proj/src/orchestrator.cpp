// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/orchestrator.hpp"

#include "itervc/augment.hpp"
#include "itervc/conversion_eval.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <unistd.h>

namespace itervc {

using json = nlohmann::json;

bool has_converged(const std::vector<double>& val_wers, double epsilon, double abs_epsilon) {
  if (val_wers.size() < 2)
    throw Error("has_converged: need at least 2 iterations, got " + std::to_string(val_wers.size()));
  const double prev = val_wers[val_wers.size() - 2];
  const double last = val_wers.back();
  if (prev <= 0.0) return true;  // nothing left to improve
  const double improvement = prev - last;
  return improvement / prev < epsilon || improvement < abs_epsilon;
}

bool has_converged(const IterationHistory& history, double epsilon, double abs_epsilon) {
  std::vector<double> wers;
  wers.reserve(history.records.size());
  for (const auto& r : history.records) wers.push_back(r.metrics.asr_val_wer);
  return has_converged(wers, epsilon, abs_epsilon);
}

std::string to_json_line(const IterationRecord& r) {
  json j;
  j["i"] = r.i;
  j["asr_checkpoint"] = r.asr_checkpoint;
  j["asr_hash"] = r.asr_hash;
  j["vc_checkpoint"] = r.vc_checkpoint;
  j["vc_hash"] = r.vc_hash;
  if (!r.augmented_manifest.empty()) {
    j["augmented_manifest"] = r.augmented_manifest;
    j["augmented_hash"] = r.augmented_hash;
  }
  j["metrics"] = {{"asr_val_wer", r.metrics.asr_val_wer},
                  {"vc_eval_wer", r.metrics.vc_eval_wer},
                  {"identity_mean", r.metrics.identity_mean}};
  j["config_hash"] = r.config_hash;
  return j.dump();
}

IterationRecord record_from_json_line(const std::string& line, int line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error("history line " + std::to_string(line_no) + ": " + e.what());
  }
  IterationRecord r;
  r.i = j.at("i").get<int>();
  r.asr_checkpoint = j.at("asr_checkpoint").get<std::string>();
  r.asr_hash = j.at("asr_hash").get<std::string>();
  r.vc_checkpoint = j.at("vc_checkpoint").get<std::string>();
  r.vc_hash = j.at("vc_hash").get<std::string>();
  r.augmented_manifest = j.value("augmented_manifest", "");
  r.augmented_hash = j.value("augmented_hash", "");
  r.metrics.asr_val_wer = j.at("metrics").at("asr_val_wer").get<double>();
  r.metrics.vc_eval_wer = j.at("metrics").at("vc_eval_wer").get<double>();
  r.metrics.identity_mean = j.at("metrics").at("identity_mean").get<double>();
  r.config_hash = j.value("config_hash", "");
  return r;
}

IterationHistory load_history(const fs::path& history_file) {
  IterationHistory h;
  if (!fs::exists(history_file)) return h;
  std::ifstream in(history_file);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    h.records.push_back(record_from_json_line(line, line_no));
  }
  for (size_t k = 0; k < h.records.size(); ++k)
    if (h.records[k].i != static_cast<int>(k))
      throw Error("history " + history_file.string() + ": record indices are not contiguous from 0");
  return h;
}

void append_history(const fs::path& history_file, const IterationRecord& record) {
  std::ofstream out(history_file, std::ios::app);
  if (!out) throw Error("cannot append to history file " + history_file.string());
  out << to_json_line(record) << "\n";
}

namespace {

// Exclusive ownership of an experiment directory. A lock left behind by a
// dead process is reclaimed.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "lock") {
    fs::create_directories(dir);
    if (fs::exists(path_)) {
      pid_t owner = 0;
      try {
        owner = static_cast<pid_t>(std::stol(read_text_file(path_)));
      } catch (const std::exception&) {
      }
      if (owner > 0 && fs::exists("/proc/" + std::to_string(owner)))
        throw Error("experiment directory " + dir.string() + " is locked by running process " +
                    std::to_string(owner));
      fs::remove(path_);
    }
    write_text_file(path_, std::to_string(getpid()) + "\n");
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

std::string iter_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "iter_%03d", i);
  return buf;
}

// Merge manifests into one with absolute paths so items resolve regardless of
// the combined manifest's base_dir.
DatasetManifest merge_manifests(const std::vector<const DatasetManifest*>& parts, const std::string& tag) {
  if (parts.empty()) throw Error("merge_manifests: nothing to merge");
  DatasetManifest out;
  out.vocabulary = parts.front()->vocabulary;
  out.sample_rate_hz = parts.front()->sample_rate_hz;
  out.tag = tag;
  out.base_dir = "";
  for (const auto* p : parts) {
    if (!(p->vocabulary == out.vocabulary)) throw Error("merge_manifests: vocabulary mismatch");
    for (Utterance u : p->utterances) {
      if (!u.audio_path.empty()) u.audio_path = fs::absolute(p->base_dir / u.audio_path).string();
      if (!u.features_path.empty())
        u.features_path = fs::absolute(p->base_dir / u.features_path).string();
      out.utterances.push_back(std::move(u));
    }
  }
  return out;
}

DatasetManifest stage_corpus(const ExperimentConfig& config, const fs::path& out_dir, bool is_base) {
  const fs::path corpus_dir = out_dir / "corpus" / (is_base ? "base" : "target");
  const std::string tag = is_base ? "base" : "target";
  const std::string configured =
      is_base ? config.base_corpus_manifest_path() : config.corpus_manifest_path();
  if (!config.corpus_generate() || !configured.empty()) {
    if (configured.empty())
      throw ConfigError("corpus.generate is false but no corpus manifest path is configured");
    return load_manifest(configured);
  }
  if (fs::exists(corpus_dir / "manifest.jsonl")) return load_manifest(corpus_dir / "manifest.jsonl");
  DatasetManifest m = generate_synthetic_corpus(
      is_base ? config.base_corpus_spec() : config.corpus_spec(), corpus_dir, tag);
  m.config_hash = config.hash();
  save_manifest(m, corpus_dir / "manifest.jsonl");
  return m;
}

}  // namespace

IterationHistory run_iterations(const ExperimentConfig& config, const fs::path& out_dir, bool resume) {
  const OrchestratorConfig orch = config.orchestrator_config();
  const std::string config_hash = config.hash();
  DirLock lock(out_dir);

  // Config snapshot; a resumed run must use the configuration it started with.
  const fs::path snapshot_path = out_dir / "config.json";
  if (fs::exists(snapshot_path)) {
    const json snapshot = json::parse(read_text_file(snapshot_path));
    if (hex64(fnv1a64(snapshot.dump())) != config_hash)
      throw ConfigError("experiment directory " + out_dir.string() +
                        " was created with a different configuration; refusing to " +
                        (resume ? "resume" : "overwrite"));
  } else {
    if (resume) throw Error("cannot resume: " + (out_dir / "config.json").string() + " does not exist");
    write_text_file(snapshot_path, config.tree().dump(2) + "\n");
  }

  const fs::path cache_root = config.cache_dir().empty()
                                  ? (FeatureStore::default_cache_root().empty()
                                         ? out_dir / "cache"
                                         : FeatureStore::default_cache_root())
                                  : fs::path(config.cache_dir());
  const FeatureConfig features = config.feature_config();
  const uint64_t seed = config.seed();

  // Corpora (deterministic; reloaded as-is on resume).
  const DatasetManifest target_all = stage_corpus(config, out_dir, false);
  DatasetManifest base;
  if (config.base_corpus_enabled()) base = stage_corpus(config, out_dir, true);

  const auto speakers = target_all.speakers();
  const int held_out = config.held_out_speakers();
  if (held_out < 1 || static_cast<size_t>(held_out) >= speakers.size())
    throw ConfigError("corpus.held_out_speakers must be in [1, n_speakers)");
  std::set<std::string> held;
  for (auto it = speakers.rbegin(); static_cast<int>(held.size()) < held_out; ++it) held.insert(*it);
  auto [target_train, target_val] = split_by_speaker(target_all, held);

  // One speaker encoder shared by VC conditioning, augmentation and metrics;
  // optionally a second, disjoint-seed encoder scores the Identity metric so
  // conditioning and evaluation do not share parameters.
  auto stage_encoder = [&](const fs::path& path, const char* stage) {
    if (fs::exists(path)) return load_speaker_encoder(path);
    SpeakerTrainOptions sopt;
    sopt.model = config.speaker_model_config();
    sopt.train = config.speaker_train_config();
    sopt.train.seed = derive_seed(seed, stage);
    sopt.features = features;
    sopt.cache_root = cache_root;
    SpeakerEncoder enc = train_speaker_encoder(target_train, sopt);
    save_speaker_encoder(enc, path, config_hash);
    return enc;
  };
  const SpeakerEncoder spk = stage_encoder(out_dir / "speaker.ckpt", "speaker");
  const SpeakerEncoder metric_spk =
      config.separate_metric_encoder()
          ? stage_encoder(out_dir / "speaker_metric.ckpt", "speaker-metric")
          : spk;

  // Metric evaluator ASR: target-only data and a disjoint seed, so it is a
  // different model from every A_i (which see base+augmented mixes).
  const fs::path eval_asr_path = out_dir / "eval_asr.ckpt";
  AsrModel eval_asr;
  if (fs::exists(eval_asr_path)) {
    eval_asr = load_asr_model(eval_asr_path);
  } else {
    AsrTrainOptions aopt;
    aopt.model = config.asr_model_config();
    aopt.train = config.asr_train_config();
    aopt.train.seed = derive_seed(seed, "eval-asr");
    aopt.features = features;
    aopt.cache_root = cache_root;
    eval_asr = train_asr(target_train, target_val, aopt).model;
    save_asr_model(eval_asr, eval_asr_path, config_hash);
  }

  FeatureStore eval_store(features, cache_root);
  const auto reference_centroids = speaker_centroids(spk, target_train, eval_store, cache_root);
  const auto metric_centroids = config.separate_metric_encoder()
                                    ? speaker_centroids(metric_spk, target_train, eval_store, cache_root)
                                    : reference_centroids;

  const fs::path history_path = out_dir / "history.jsonl";
  IterationHistory history = load_history(history_path);
  history.convergence_epsilon = orch.epsilon;
  history.abs_epsilon = orch.abs_epsilon;
  history.max_iterations = orch.max_iterations;
  for (const auto& r : history.records) {
    if (!fs::exists(out_dir / r.asr_checkpoint) || !fs::exists(out_dir / r.vc_checkpoint))
      throw Error("cannot resume: checkpoint files for iteration " + std::to_string(r.i) +
                  " are missing");
  }
  if (!resume && !history.records.empty())
    throw Error("experiment directory " + out_dir.string() +
                " already contains a run; pass resume to continue it");

  AsrModel asr;
  VcModel vc;
  std::vector<DatasetManifest> past_augmented;
  if (!history.records.empty()) {
    const auto& last = history.records.back();
    asr = load_asr_model(out_dir / last.asr_checkpoint);
    vc = load_vc_model(out_dir / last.vc_checkpoint);
    if (orch.include_past_augmented)
      for (const auto& r : history.records)
        if (!r.augmented_manifest.empty())
          past_augmented.push_back(load_manifest(out_dir / r.augmented_manifest));
  }

  // The evaluation pair set is sampled once per run (fixed seed), so
  // iteration-to-iteration WER differences are paired comparisons rather than
  // resampled ones.
  auto evaluate_iteration = [&](const VcModel& v, int i, double asr_val_wer) {
    (void)i;
    IterationMetrics m;
    m.asr_val_wer = 100.0 * asr_val_wer;
    const ConversionReport report =
        evaluate_conversion(v, eval_asr, metric_spk, reference_centroids, metric_centroids,
                            target_val, orch.eval_pairs, derive_seed(seed, "conversion-eval"),
                            eval_store);
    m.vc_eval_wer = 100.0 * report.wer;
    m.identity_mean = report.identity_mean;
    return m;
  };

  auto persist_record = [&](int i, const AsrModel& a, const VcModel& v, const IterationMetrics& m,
                            const std::string& aug_rel, const std::string& aug_hash) {
    const std::string dir = iter_dir_name(i);
    fs::create_directories(out_dir / dir);
    IterationRecord r;
    r.i = i;
    r.asr_checkpoint = dir + "/asr.ckpt";
    r.vc_checkpoint = dir + "/vc.ckpt";
    save_asr_model(a, out_dir / r.asr_checkpoint, config_hash);
    save_vc_model(v, out_dir / r.vc_checkpoint, config_hash);
    r.asr_hash = file_hash(out_dir / r.asr_checkpoint);
    r.vc_hash = file_hash(out_dir / r.vc_checkpoint);
    r.augmented_manifest = aug_rel;
    r.augmented_hash = aug_hash;
    r.metrics = m;
    r.config_hash = config_hash;
    append_history(history_path, r);
    history.records.push_back(r);
  };

  // Iteration 0: standard ASR training, then the first consistency-trained VC.
  if (history.records.empty()) {
    AsrTrainOptions aopt;
    aopt.model = config.asr_model_config();
    aopt.train = config.asr_train_config();
    aopt.train.seed = derive_seed(seed, "asr:0");
    aopt.features = features;
    aopt.cache_root = cache_root;
    aopt.iteration = 0;
    DatasetManifest train0 =
        base.utterances.empty() ? target_train : merge_manifests({&base, &target_train}, "target");
    const AsrTrainResult a0 = train_asr(train0, target_val, aopt);
    asr = a0.model;

    VcTrainOptions vopt;
    vopt.model = config.vc_model_config();
    vopt.train = config.vc_train_config();
    vopt.train.seed = derive_seed(seed, "vc:0");
    vopt.features = features;
    vopt.cache_root = cache_root;
    vopt.iteration = 0;
    vc = train_vc(target_train, asr, spk, vopt).model;

    persist_record(0, asr, vc, evaluate_iteration(vc, 0, a0.best_val_wer), "", "");
  }

  // Iterations 1..max: augment with V_{i-1}, fine-tune A_{i-1}, retrain V
  // from scratch against A_i.
  while (static_cast<int>(history.records.size()) <= orch.max_iterations) {
    if (history.records.size() >= 2 &&
        has_converged(history, orch.epsilon, orch.abs_epsilon))
      break;
    const int i = static_cast<int>(history.records.size());
    const std::string dir = iter_dir_name(i);
    fs::create_directories(out_dir / dir);

    AugmentationPolicy policy = config.augmentation_policy();
    policy.seed = derive_seed(seed, "augment:" + std::to_string(i));
    const DatasetManifest augmented = augment_dataset(vc, target_train, spk, policy,
                                                      out_dir / dir / "augmented", features,
                                                      cache_root, i);
    const std::string aug_rel = dir + "/augmented/manifest.jsonl";
    const std::string aug_hash = file_hash(out_dir / aug_rel);

    AsrTrainOptions aopt;
    aopt.model = config.asr_model_config();
    aopt.train = config.asr_train_config();
    aopt.train.seed = derive_seed(seed, "asr-ft:" + std::to_string(i));
    aopt.features = features;
    aopt.cache_root = cache_root;
    aopt.iteration = i;
    aopt.augmented_manifest_hash = aug_hash;

    DatasetManifest tuning_augmented = augmented;
    if (orch.include_past_augmented && !past_augmented.empty()) {
      std::vector<const DatasetManifest*> parts;
      for (const auto& p : past_augmented) parts.push_back(&p);
      parts.push_back(&augmented);
      tuning_augmented = merge_manifests(parts, "augmented");
    }
    const AsrTrainResult ai = finetune_asr(asr, base, target_train, tuning_augmented, target_val, aopt);
    asr = ai.model;

    VcTrainOptions vopt;
    vopt.model = config.vc_model_config();
    vopt.train = config.vc_train_config();
    vopt.train.seed = derive_seed(seed, "vc:" + std::to_string(i));
    vopt.features = features;
    vopt.cache_root = cache_root;
    vopt.iteration = i;
    vc = train_vc(target_train, asr, spk, vopt).model;

    persist_record(i, asr, vc, evaluate_iteration(vc, i, ai.best_val_wer), aug_rel, aug_hash);
    past_augmented.push_back(augmented);
  }
  return history;
}

void verify_history(const fs::path& out_dir) {
  const IterationHistory history = load_history(out_dir / "history.jsonl");
  if (history.records.empty()) throw Error("verify_history: no records in " + out_dir.string());
  for (const auto& r : history.records) {
    if (file_hash(out_dir / r.asr_checkpoint) != r.asr_hash)
      throw Error("provenance: ASR checkpoint hash mismatch at iteration " + std::to_string(r.i));
    if (file_hash(out_dir / r.vc_checkpoint) != r.vc_hash)
      throw Error("provenance: VC checkpoint hash mismatch at iteration " + std::to_string(r.i));
    const AsrModel a = load_asr_model(out_dir / r.asr_checkpoint);
    const VcModel v = load_vc_model(out_dir / r.vc_checkpoint);
    if (v.asr_hash != a.hash())
      throw Error("provenance: V_" + std::to_string(r.i) + " does not reference A_" +
                  std::to_string(r.i));
    if (r.i > 0) {
      if (r.augmented_manifest.empty())
        throw Error("provenance: iteration " + std::to_string(r.i) + " lacks an augmented manifest");
      if (file_hash(out_dir / r.augmented_manifest) != r.augmented_hash)
        throw Error("provenance: augmented manifest hash mismatch at iteration " + std::to_string(r.i));
      if (a.augmented_manifest_hash != r.augmented_hash)
        throw Error("provenance: A_" + std::to_string(r.i) + " does not reference the iteration's " +
                    "augmented manifest");
      const DatasetManifest aug = load_manifest(out_dir / r.augmented_manifest);
      for (const auto& u : aug.utterances)
        if (!u.provenance)
          throw Error("provenance: augmented utterance '" + u.id + "' lacks provenance fields");
    }
  }
}

std::string format_history_table(const fs::path& out_dir) {
  const IterationHistory history = load_history(out_dir / "history.jsonl");
  if (history.records.empty()) throw Error("no history records in " + out_dir.string());
  std::string out;
  out += "Iteration | ASR WER | VC WER | Identity\n";
  out += "----------+---------+--------+---------\n";
  char buf[128];
  for (const auto& r : history.records) {
    std::snprintf(buf, sizeof(buf), "%9d | %7.2f | %6.2f | %8.4f\n", r.i, r.metrics.asr_val_wer,
                  r.metrics.vc_eval_wer, r.metrics.identity_mean);
    out += buf;
  }
  return out;
}

}  // namespace itervc
