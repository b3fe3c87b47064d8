// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace itervc {

using json = nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

json parse_scalar(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError(where + ": empty value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  const bool integral = v.find_first_not_of("+-0123456789") == std::string::npos;
  try {
    size_t used = 0;
    if (integral) {
      const long long i = std::stoll(v, &used);
      if (used == v.size()) return i;
    } else {
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(where + ": cannot parse value '" + v + "'");
}

json* descend(json& root, const std::string& dotted, const std::string& where, bool create) {
  json* node = &root;
  size_t pos = 0;
  while (pos < dotted.size()) {
    const size_t dot = dotted.find('.', pos);
    const std::string key = dotted.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw ConfigError(where + ": empty key component in '" + dotted + "'");
    if (!node->contains(key)) {
      if (!create) return nullptr;
      (*node)[key] = json::object();
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return node;
}

void merge_checked(json& base, const json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string child = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + child);
    json& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key " + child + " must be a table");
      merge_checked(slot, it.value(), child);
      continue;
    }
    const json& v = it.value();
    const bool number_ok = slot.is_number() && v.is_number();
    const bool same_kind = (slot.is_string() && v.is_string()) || (slot.is_boolean() && v.is_boolean()) ||
                           (slot.is_array() && v.is_array());
    if (!number_ok && !same_kind)
      throw ConfigError("config key " + child + " has the wrong type (expected " +
                        std::string(slot.type_name()) + ")");
    slot = v;
  }
}

}  // namespace

json parse_toml_subset(const std::string& text, const std::string& origin) {
  json root = json::object();
  json* section = &root;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    // Strip comments outside strings.
    bool in_str = false;
    std::string body;
    for (char ch : line) {
      if (ch == '"') in_str = !in_str;
      if (ch == '#' && !in_str) break;
      body += ch;
    }
    body = trim(body);
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": malformed section header");
      const std::string name = trim(body.substr(1, body.size() - 2));
      if (name.empty()) throw ConfigError(where + ": empty section name");
      section = descend(root, name, where, true);
      continue;
    }
    const size_t eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') throw ConfigError(where + ": unterminated array");
      json arr = json::array();
      std::string inner = value.substr(1, value.size() - 2);
      std::string item;
      bool in_s = false;
      for (char ch : inner) {
        if (ch == '"') in_s = !in_s;
        if (ch == ',' && !in_s) {
          if (!trim(item).empty()) arr.push_back(parse_scalar(item, where));
          item.clear();
        } else {
          item += ch;
        }
      }
      if (!trim(item).empty()) arr.push_back(parse_scalar(item, where));
      (*section)[key] = arr;
    } else {
      (*section)[key] = parse_scalar(value, where);
    }
  }
  return root;
}

json ExperimentConfig::defaults() {
  json j;
  j["seed"] = 1;
  j["cache_dir"] = "";  // empty: use ITERVC_CACHE when set, else run-local cache

  j["corpus"]["generate"] = true;
  j["corpus"]["manifest"] = "";  // used when generate = false
  j["corpus"]["seed"] = 0;       // 0: derive from the global seed
  j["corpus"]["n_speakers"] = 10;
  j["corpus"]["n_utterances_per_speaker"] = 40;
  j["corpus"]["vocab_size"] = 12;
  j["corpus"]["min_tokens"] = 4;
  j["corpus"]["max_tokens"] = 8;
  j["corpus"]["held_out_speakers"] = 2;

  j["base_corpus"]["enabled"] = true;
  j["base_corpus"]["manifest"] = "";
  j["base_corpus"]["seed"] = 0;
  j["base_corpus"]["n_speakers"] = 6;
  j["base_corpus"]["n_utterances_per_speaker"] = 30;

  j["features"]["n_fft"] = 1024;
  j["features"]["window"] = 1024;
  j["features"]["hop"] = 256;
  j["features"]["n_mels"] = 80;
  j["features"]["fmin"] = 0.0;
  j["features"]["fmax"] = 12000.0;
  j["features"]["log_floor"] = 1e-5;

  j["asr"]["encoder_width"] = 128;
  j["asr"]["conv_kernel"] = 5;
  j["asr"]["n_conv_blocks"] = 2;
  j["asr"]["n_rnn_layers"] = 2;
  j["asr"]["learning_rate"] = 0.0025;
  j["asr"]["finetune_learning_rate"] = 0.00025;
  j["asr"]["warmup_steps"] = 400;
  j["asr"]["max_steps"] = 5000;
  j["asr"]["finetune_steps"] = 2000;
  j["asr"]["batch_items"] = 8;
  j["asr"]["ratio_base"] = 1;
  j["asr"]["ratio_target"] = 3;
  j["asr"]["eval_every"] = 200;
  j["asr"]["grad_clip"] = 5.0;

  j["speaker"]["width"] = 64;
  j["speaker"]["embed_dim"] = 64;
  j["speaker"]["conv_kernel"] = 5;
  j["speaker"]["n_conv_blocks"] = 2;
  j["speaker"]["learning_rate"] = 1e-3;
  j["speaker"]["steps"] = 1200;
  j["speaker"]["batch_items"] = 16;
  j["speaker"]["heldout_stride"] = 5;
  j["speaker"]["grad_clip"] = 5.0;
  j["speaker"]["separate_metric_encoder"] = false;

  j["vc"]["channels"] = 64;
  j["vc"]["kernel"] = 5;
  j["vc"]["enc_blocks"] = 2;
  j["vc"]["dec_blocks"] = 2;
  j["vc"]["lambda_asr"] = 100.0;
  j["vc"]["lambda_recon"] = 1.0;
  j["vc"]["lambda_spk"] = 200.0;
  j["vc"]["lambda_adv"] = 0.0;
  j["vc"]["learning_rate"] = 1e-3;
  j["vc"]["steps"] = 1500;
  j["vc"]["batch_items"] = 4;
  j["vc"]["eval_every"] = 150;
  j["vc"]["val_stride"] = 10;
  j["vc"]["grad_clip"] = 5.0;

  j["augment"]["pairs_per_utterance"] = 1;

  j["orchestrator"]["epsilon"] = 0.01;
  j["orchestrator"]["abs_epsilon"] = 0.25;
  j["orchestrator"]["max_iterations"] = 4;
  j["orchestrator"]["include_past_augmented"] = false;
  j["orchestrator"]["eval_pairs"] = 50;

  return j;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw ConfigError("config file does not exist: " + path.string());
  const std::string text = read_text_file(path);
  json file_tree;
  if (path.extension() == ".json") {
    try {
      file_tree = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
  } else {
    file_tree = parse_toml_subset(text, path.string());
  }

  json tree = defaults();
  merge_checked(tree, file_tree, "");

  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + ov + "' must have the form section.key=value");
    const std::string dotted = ov.substr(0, eq);
    json patch = json::object();
    json* slot = descend(patch, dotted, "override " + ov, true);
    // Allow bare strings in overrides.
    const std::string value = ov.substr(eq + 1);
    try {
      *slot = parse_scalar(value, "override " + ov);
    } catch (const ConfigError&) {
      *slot = value;
    }
    merge_checked(tree, patch, "");
  }
  return from_json(std::move(tree));
}

ExperimentConfig ExperimentConfig::from_json(json tree) {
  json merged = defaults();
  merge_checked(merged, tree, "");
  ExperimentConfig cfg;
  cfg.tree_ = std::move(merged);
  return cfg;
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(tree_.dump())); }

uint64_t ExperimentConfig::seed() const { return tree_.at("seed").get<uint64_t>(); }

bool ExperimentConfig::corpus_generate() const { return tree_.at("corpus").at("generate").get<bool>(); }

std::string ExperimentConfig::corpus_manifest_path() const {
  return tree_.at("corpus").at("manifest").get<std::string>();
}

std::string ExperimentConfig::base_corpus_manifest_path() const {
  return tree_.at("base_corpus").at("manifest").get<std::string>();
}

std::string ExperimentConfig::cache_dir() const { return tree_.at("cache_dir").get<std::string>(); }

SyntheticCorpusSpec ExperimentConfig::corpus_spec() const {
  const auto& c = tree_.at("corpus");
  SyntheticCorpusSpec s;
  s.n_speakers = c.at("n_speakers").get<int>();
  s.n_utterances_per_speaker = c.at("n_utterances_per_speaker").get<int>();
  s.vocab_size = c.at("vocab_size").get<int>();
  s.min_tokens = c.at("min_tokens").get<int>();
  s.max_tokens = c.at("max_tokens").get<int>();
  const auto pinned = c.at("seed").get<uint64_t>();
  s.seed = pinned ? pinned : derive_seed(seed(), "target-corpus");
  return s;
}

bool ExperimentConfig::base_corpus_enabled() const {
  return tree_.at("base_corpus").at("enabled").get<bool>();
}

SyntheticCorpusSpec ExperimentConfig::base_corpus_spec() const {
  const auto& c = tree_.at("base_corpus");
  SyntheticCorpusSpec s = corpus_spec();
  s.n_speakers = c.at("n_speakers").get<int>();
  s.n_utterances_per_speaker = c.at("n_utterances_per_speaker").get<int>();
  const auto pinned = c.at("seed").get<uint64_t>();
  s.seed = pinned ? pinned : derive_seed(seed(), "base-corpus");
  return s;
}

int ExperimentConfig::held_out_speakers() const {
  return tree_.at("corpus").at("held_out_speakers").get<int>();
}

FeatureConfig ExperimentConfig::feature_config() const {
  const auto& f = tree_.at("features");
  FeatureConfig c;
  c.n_fft = f.at("n_fft").get<int>();
  c.window = f.at("window").get<int>();
  c.hop = f.at("hop").get<int>();
  c.n_mels = f.at("n_mels").get<int>();
  c.fmin = f.at("fmin").get<double>();
  c.fmax = f.at("fmax").get<double>();
  c.log_floor = f.at("log_floor").get<double>();
  return c;
}

AsrModelConfig ExperimentConfig::asr_model_config() const {
  const auto& a = tree_.at("asr");
  AsrModelConfig c;
  c.encoder_width = a.at("encoder_width").get<int>();
  c.conv_kernel = a.at("conv_kernel").get<int>();
  c.n_conv_blocks = a.at("n_conv_blocks").get<int>();
  c.n_rnn_layers = a.at("n_rnn_layers").get<int>();
  c.n_mels = tree_.at("features").at("n_mels").get<int>();
  return c;
}

AsrTrainConfig ExperimentConfig::asr_train_config() const {
  const auto& a = tree_.at("asr");
  AsrTrainConfig c;
  c.learning_rate = a.at("learning_rate").get<double>();
  c.finetune_learning_rate = a.at("finetune_learning_rate").get<double>();
  c.warmup_steps = a.at("warmup_steps").get<int>();
  c.max_steps = a.at("max_steps").get<int>();
  c.finetune_steps = a.at("finetune_steps").get<int>();
  c.batch_items = a.at("batch_items").get<int>();
  c.ratio_base = a.at("ratio_base").get<int>();
  c.ratio_target = a.at("ratio_target").get<int>();
  c.eval_every = a.at("eval_every").get<int>();
  c.grad_clip = a.at("grad_clip").get<double>();
  return c;
}

SpeakerEncoderConfig ExperimentConfig::speaker_model_config() const {
  const auto& s = tree_.at("speaker");
  SpeakerEncoderConfig c;
  c.width = s.at("width").get<int>();
  c.embed_dim = s.at("embed_dim").get<int>();
  c.conv_kernel = s.at("conv_kernel").get<int>();
  c.n_conv_blocks = s.at("n_conv_blocks").get<int>();
  c.n_mels = tree_.at("features").at("n_mels").get<int>();
  return c;
}

SpeakerTrainConfig ExperimentConfig::speaker_train_config() const {
  const auto& s = tree_.at("speaker");
  SpeakerTrainConfig c;
  c.learning_rate = s.at("learning_rate").get<double>();
  c.steps = s.at("steps").get<int>();
  c.batch_items = s.at("batch_items").get<int>();
  c.heldout_stride = s.at("heldout_stride").get<int>();
  c.grad_clip = s.at("grad_clip").get<double>();
  return c;
}

bool ExperimentConfig::separate_metric_encoder() const {
  return tree_.at("speaker").at("separate_metric_encoder").get<bool>();
}

VcModelConfig ExperimentConfig::vc_model_config() const {
  const auto& v = tree_.at("vc");
  VcModelConfig c;
  c.channels = v.at("channels").get<int>();
  c.kernel = v.at("kernel").get<int>();
  c.enc_blocks = v.at("enc_blocks").get<int>();
  c.dec_blocks = v.at("dec_blocks").get<int>();
  c.embed_dim = tree_.at("speaker").at("embed_dim").get<int>();
  c.n_mels = tree_.at("features").at("n_mels").get<int>();
  return c;
}

VcTrainConfig ExperimentConfig::vc_train_config() const {
  const auto& v = tree_.at("vc");
  VcTrainConfig c;
  c.lambda_asr = v.at("lambda_asr").get<double>();
  c.lambda_recon = v.at("lambda_recon").get<double>();
  c.lambda_spk = v.at("lambda_spk").get<double>();
  c.lambda_adv = v.at("lambda_adv").get<double>();
  c.learning_rate = v.at("learning_rate").get<double>();
  c.steps = v.at("steps").get<int>();
  c.batch_items = v.at("batch_items").get<int>();
  c.eval_every = v.at("eval_every").get<int>();
  c.val_stride = v.at("val_stride").get<int>();
  c.grad_clip = v.at("grad_clip").get<double>();
  return c;
}

AugmentationPolicy ExperimentConfig::augmentation_policy() const {
  AugmentationPolicy p;
  p.pairs_per_utterance = tree_.at("augment").at("pairs_per_utterance").get<int>();
  return p;
}

OrchestratorConfig ExperimentConfig::orchestrator_config() const {
  const auto& o = tree_.at("orchestrator");
  OrchestratorConfig c;
  c.epsilon = o.at("epsilon").get<double>();
  c.abs_epsilon = o.at("abs_epsilon").get<double>();
  c.max_iterations = o.at("max_iterations").get<int>();
  c.include_past_augmented = o.at("include_past_augmented").get<bool>();
  c.eval_pairs = o.at("eval_pairs").get<int>();
  return c;
}

}  // namespace itervc
