// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/augment.hpp"
#include "itervc/config.hpp"
#include "itervc/conversion_eval.hpp"
#include "itervc/orchestrator.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

namespace {

using namespace itervc;

// Leftover arguments of the form --section.key=value become config overrides.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> overrides;
  for (const auto& raw : extras) {
    if (raw.rfind("--", 0) != 0 || raw.find('=') == std::string::npos)
      throw ConfigError("unrecognized argument '" + raw + "' (expected --section.key=value)");
    overrides.push_back(raw.substr(2));
  }
  return overrides;
}

fs::path resolve_cache(const ExperimentConfig& config, const fs::path& out_dir) {
  if (!config.cache_dir().empty()) return config.cache_dir();
  const fs::path env = FeatureStore::default_cache_root();
  if (!env.empty()) return env;
  return out_dir / "cache";
}

int cmd_generate(const ExperimentConfig& config, const fs::path& out, bool base) {
  const SyntheticCorpusSpec spec = base ? config.base_corpus_spec() : config.corpus_spec();
  DatasetManifest m = generate_synthetic_corpus(spec, out, base ? "base" : "target");
  m.config_hash = config.hash();
  save_manifest(m, out / "manifest.jsonl");
  std::cout << "wrote " << m.utterances.size() << " utterances, " << m.speakers().size()
            << " speakers to " << (out / "manifest.jsonl").string() << "\n";

  // Speaker-disjoint split for standalone train/eval commands.
  const int held_out = config.held_out_speakers();
  if (!base && held_out > 0 && static_cast<size_t>(held_out) < m.speakers().size()) {
    const auto speakers = m.speakers();
    std::set<std::string> held;
    for (auto it = speakers.rbegin(); static_cast<int>(held.size()) < held_out; ++it) held.insert(*it);
    auto [train, eval] = split_by_speaker(m, held);
    save_manifest(train, out / "manifest.train.jsonl");
    save_manifest(eval, out / "manifest.eval.jsonl");
    std::cout << "split: " << train.utterances.size() << " train / " << eval.utterances.size()
              << " eval utterances (" << held_out << " held-out speakers)\n";
  }
  return 0;
}

int cmd_train_speaker(const ExperimentConfig& config, const fs::path& train_path, const fs::path& out) {
  const DatasetManifest train = load_manifest(train_path);
  SpeakerTrainOptions opt;
  opt.model = config.speaker_model_config();
  opt.train = config.speaker_train_config();
  opt.train.seed = derive_seed(config.seed(), "speaker");
  opt.features = config.feature_config();
  opt.cache_root = resolve_cache(config, out.parent_path());
  const SpeakerEncoder enc = train_speaker_encoder(train, opt);
  save_speaker_encoder(enc, out, config.hash());
  std::cout << "speaker encoder heldout accuracy: " << enc.heldout_accuracy << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_train_asr(const ExperimentConfig& config, const fs::path& train_path, const fs::path& val_path,
                  const fs::path& out) {
  const DatasetManifest train = load_manifest(train_path);
  const DatasetManifest val = load_manifest(val_path);
  AsrTrainOptions opt;
  opt.model = config.asr_model_config();
  opt.train = config.asr_train_config();
  opt.train.seed = derive_seed(config.seed(), "asr:0");
  opt.features = config.feature_config();
  opt.cache_root = resolve_cache(config, out.parent_path());
  const AsrTrainResult result = train_asr(train, val, opt);
  save_asr_model(result.model, out, config.hash());
  for (const auto& rec : result.eval_log) std::cout << to_json_line(rec) << "\n";
  std::cout << "best validation WER: " << result.best_val_wer << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_train_vc(const ExperimentConfig& config, const fs::path& train_path, const fs::path& asr_path,
                 const fs::path& spk_path, const fs::path& out) {
  const DatasetManifest train = load_manifest(train_path);
  const AsrModel asr = load_asr_model(asr_path);
  const SpeakerEncoder spk = load_speaker_encoder(spk_path);
  VcTrainOptions opt;
  opt.model = config.vc_model_config();
  opt.train = config.vc_train_config();
  opt.train.seed = derive_seed(config.seed(), "vc:0");
  opt.features = config.feature_config();
  opt.cache_root = resolve_cache(config, out.parent_path());
  const VcTrainResult result = train_vc(train, asr, spk, opt);
  save_vc_model(result.model, out, config.hash());
  std::cout << "best validation objective: " << result.best_val_objective << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_augment(const ExperimentConfig& config, const fs::path& train_path, const fs::path& vc_path,
                const fs::path& spk_path, const fs::path& out, int iteration) {
  const DatasetManifest train = load_manifest(train_path);
  const VcModel vc = load_vc_model(vc_path);
  const SpeakerEncoder spk = load_speaker_encoder(spk_path);
  AugmentationPolicy policy = config.augmentation_policy();
  policy.seed = derive_seed(config.seed(), "augment:" + std::to_string(iteration));
  const DatasetManifest augmented =
      augment_dataset(vc, train, spk, policy, out, config.feature_config(),
                      resolve_cache(config, out), iteration);
  std::cout << "wrote " << augmented.utterances.size() << " augmented utterances to "
            << (out / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& config, const fs::path& vc_path, const fs::path& asr_path,
                 const fs::path& spk_path, const fs::path& eval_path, const fs::path& train_path) {
  const VcModel vc = load_vc_model(vc_path);
  const AsrModel asr_eval = load_asr_model(asr_path);
  const SpeakerEncoder spk = load_speaker_encoder(spk_path);
  const DatasetManifest eval_manifest = load_manifest(eval_path);
  const DatasetManifest train = load_manifest(train_path);
  FeatureStore store(config.feature_config(), resolve_cache(config, eval_path.parent_path()));
  const auto centroids = speaker_centroids(spk, train, store);
  const OrchestratorConfig orch = config.orchestrator_config();
  const ConversionReport report =
      evaluate_conversion(vc, asr_eval, spk, centroids, centroids, eval_manifest, orch.eval_pairs,
                          derive_seed(config.seed(), "conversion-eval"), store);
  nlohmann::json j = {{"wer", report.wer},
                      {"identity_mean", report.identity_mean},
                      {"n_pairs", report.n_pairs},
                      {"config_hash", config.hash()}};
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_iterate(const ExperimentConfig& config, const fs::path& out, bool resume) {
  const IterationHistory history = run_iterations(config, out, resume);
  std::cout << format_history_table(out);
  return 0;
}

int cmd_report(const fs::path& run_dir, bool verify) {
  if (verify) verify_history(run_dir);
  std::cout << format_history_table(run_dir);
  if (verify) std::cout << "provenance chain OK\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"itervc: iterative co-training of a CTC recognizer and a voice-conversion model"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::string train_path, val_path, asr_path, vc_path, spk_path, eval_path;
  std::string resume_dir, run_dir;
  bool base_corpus = false;
  bool verify = false;
  int iteration = 1;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config file (.toml or .json)")->required();
    cmd->allow_extras();
  };

  CLI::App* generate = app.add_subcommand("generate", "generate a synthetic corpus");
  add_config(generate);
  generate->add_option("--out", out, "output corpus directory")->required();
  generate->add_flag("--base", base_corpus, "use the [base_corpus] settings");

  CLI::App* train_speaker = app.add_subcommand("train-speaker", "train the speaker encoder");
  add_config(train_speaker);
  train_speaker->add_option("--train", train_path, "training manifest")->required();
  train_speaker->add_option("--out", out, "output checkpoint path")->required();

  CLI::App* train_asr_cmd = app.add_subcommand("train-asr", "train a CTC recognizer");
  add_config(train_asr_cmd);
  train_asr_cmd->add_option("--train", train_path, "training manifest")->required();
  train_asr_cmd->add_option("--val", val_path, "validation manifest")->required();
  train_asr_cmd->add_option("--out", out, "output checkpoint path")->required();

  CLI::App* train_vc_cmd = app.add_subcommand("train-vc", "train the conversion model");
  add_config(train_vc_cmd);
  train_vc_cmd->add_option("--train", train_path, "training manifest")->required();
  train_vc_cmd->add_option("--asr", asr_path, "ASR checkpoint for the consistency loss")->required();
  train_vc_cmd->add_option("--speaker", spk_path, "speaker encoder checkpoint")->required();
  train_vc_cmd->add_option("--out", out, "output checkpoint path")->required();

  CLI::App* augment = app.add_subcommand("augment", "apply VC data augmentation to a manifest");
  add_config(augment);
  augment->add_option("--train", train_path, "training manifest")->required();
  augment->add_option("--vc", vc_path, "VC checkpoint")->required();
  augment->add_option("--speaker", spk_path, "speaker encoder checkpoint")->required();
  augment->add_option("--out", out, "output directory")->required();
  augment->add_option("--iteration", iteration, "iteration tag for provenance");

  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate converted samples");
  add_config(evaluate);
  evaluate->add_option("--vc", vc_path, "VC checkpoint")->required();
  evaluate->add_option("--eval-asr", asr_path, "evaluator ASR checkpoint")->required();
  evaluate->add_option("--speaker", spk_path, "speaker encoder checkpoint")->required();
  evaluate->add_option("--eval", eval_path, "evaluation manifest")->required();
  evaluate->add_option("--train", train_path, "training manifest (reference speakers)")->required();

  CLI::App* iterate = app.add_subcommand("iterate", "run the full iterative training loop");
  add_config(iterate);
  iterate->add_option("--out", out, "experiment directory");
  iterate->add_option("--resume", resume_dir, "resume an interrupted run from this directory");

  CLI::App* report = app.add_subcommand("report", "print the iteration table of a run");
  report->add_option("dir", run_dir, "experiment directory")->required();
  report->add_flag("--verify", verify, "verify the provenance chain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    ExperimentConfig config;
    if (cmd != report) config = ExperimentConfig::load(config_path, collect_overrides(cmd->remaining()));

    if (cmd == generate) return cmd_generate(config, out, base_corpus);
    if (cmd == train_speaker) return cmd_train_speaker(config, train_path, out);
    if (cmd == train_asr_cmd) return cmd_train_asr(config, train_path, val_path, out);
    if (cmd == train_vc_cmd) return cmd_train_vc(config, train_path, asr_path, spk_path, out);
    if (cmd == augment) return cmd_augment(config, train_path, vc_path, spk_path, out, iteration);
    if (cmd == evaluate) return cmd_evaluate(config, vc_path, asr_path, spk_path, eval_path, train_path);
    if (cmd == iterate) {
      const bool resume = !resume_dir.empty();
      const fs::path dir = resume ? fs::path(resume_dir) : fs::path(out);
      if (dir.empty()) throw ConfigError("iterate: pass --out <dir> or --resume <dir>");
      return cmd_iterate(config, dir, resume);
    }
    if (cmd == report) return cmd_report(run_dir, verify);
    throw Error("unhandled subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
