/* Copyright 2026 The AVFusion Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Experiment configuration: a flat key=value file plus command-line
// overrides. Every run writes its resolved configuration next to its outputs.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "avfusion/checkpoint.hpp"
#include "avfusion/corpus.hpp"
#include "avfusion/eval.hpp"
#include "avfusion/trainer.hpp"

namespace avf {

struct ExperimentConfig {
  std::uint64_t seed = 1;  // root of every derived seed
  CorpusConfig corpus;     // n_samples sizes the training corpus
  std::size_t test_samples = 32;
  TrainConfig train;
  std::vector<SnrColumn> eval_columns = default_snr_columns();
  std::vector<NoiseKind> eval_kinds{NoiseKind::Babble, NoiseKind::Hum};
  std::size_t beam_width = 6;
  std::size_t max_len = 32;
  bool length_norm = false;
  std::string out_dir = "runs/default";

  CorpusConfig train_corpus() const {
    CorpusConfig c = corpus;
    c.seed = derive_seed(seed, "corpus.train");
    c.codebook_seed = derive_seed(seed, "corpus.codebook");
    return c;
  }

  CorpusConfig test_corpus() const {
    CorpusConfig c = corpus;
    c.n_samples = test_samples;
    c.seed = derive_seed(seed, "corpus.test");
    c.codebook_seed = derive_seed(seed, "corpus.codebook");
    return c;
  }

  // Training configuration with the seed and the input and output widths
  // filled in from the corpus and feature settings.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = derive_seed(seed, "train");
    t.model.vocab_size = Vocabulary(corpus.alphabet).size();
    t.model.d_audio_in = t.features.fbank.n_mels * t.features.group_order;
    t.model.d_video_in = corpus.video_dim;
    return t;
  }

  BeamOptions beam() const {
    BeamOptions b;
    b.width = beam_width;
    b.max_len = max_len;
    b.length_norm = length_norm;
    return b;
  }

  EvalOptions eval_options(std::uint64_t corpus_seed, std::size_t threads) const {
    EvalOptions o;
    o.columns = eval_columns;
    o.kinds = eval_kinds;
    o.beam = beam();
    o.features = train.features;
    o.seed = corpus_seed;
    o.threads = threads;
    return o;
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out = corpus.problems();
    try {
      Vocabulary check(corpus.alphabet);
    } catch (const Error& e) {
      out.push_back(std::string("corpus.alphabet: ") + e.what());
    }
    if (test_samples == 0) out.push_back("eval.n_samples must be positive");
    const auto t = resolved_train().problems();
    out.insert(out.end(), t.begin(), t.end());
    if (train.features.fbank.n_mels == 0) out.push_back("features.n_mels must be positive");
    if (train.features.group_order == 0) out.push_back("features.group_order must be positive");
    if (eval_columns.empty()) out.push_back("eval.snr_grid must name at least one column");
    if (eval_kinds.empty()) out.push_back("eval.noise_kinds must name at least one noise kind");
    if (beam_width == 0) out.push_back("eval.beam_width must be at least 1");
    if (max_len == 0) out.push_back("eval.max_len must be at least 1");
    if (out_dir.empty()) out.push_back("out_dir must not be empty");
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(x))
    throw ConfigError(key + " must be a finite number, got '" + v + "'");
  return x;
}

template <class T, class Fn>
std::vector<T> parse_list(const std::string& v, Fn&& item) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  for (const std::string& part : split(v, ',')) out.push_back(item(trim(part)));
  return out;
}

template <class T, class Fn>
std::string join(const std::vector<T>& xs, Fn&& item) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + item(xs[i]);
  return out;
}

// Shortest text that parses back to the same double.
inline std::string real_text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Error text without the leading class name.
inline std::string bare_message(const Error& e) {
  const std::string w = e.what();
  const auto colon = w.find(": ");
  return colon == std::string::npos ? w : w.substr(colon + 2);
}

struct ConfigField {
  std::string key;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

}  // namespace detail

// Every recognized key, in file order.
inline const std::vector<detail::ConfigField>& config_fields() {
  using detail::parse_bool;
  using detail::parse_count;
  using detail::parse_real;
  using detail::real_text;
  using C = ExperimentConfig;
  auto count = [](const char* key, const char* help, auto member) {
    return detail::ConfigField{key, help, [=](const C& c) { return std::to_string(member(const_cast<C&>(c))); },
                               [=](C& c, const std::string& v) { member(c) = parse_count(key, v); }};
  };
  auto real = [](const char* key, const char* help, auto member) {
    return detail::ConfigField{key, help, [=](const C& c) { return real_text(member(const_cast<C&>(c))); },
                               [=](C& c, const std::string& v) { member(c) = parse_real(key, v); }};
  };
  auto flag = [](const char* key, const char* help, auto member) {
    return detail::ConfigField{key, help,
                               [=](const C& c) { return std::string(member(const_cast<C&>(c)) ? "true" : "false"); },
                               [=](C& c, const std::string& v) { member(c) = parse_bool(key, v); }};
  };
  auto kinds_text = [](const std::vector<NoiseKind>& ks) {
    return detail::join(ks, [](NoiseKind k) { return to_string(k); });
  };
  auto parse_kinds = [](const std::string& v) { return detail::parse_list<NoiseKind>(v, parse_noise_kind); };

  static const std::vector<detail::ConfigField> fields{
      {"seed", "root seed; every other seed is derived from it",
       [](const C& c) { return std::to_string(c.seed); },
       [](C& c, const std::string& v) { c.seed = parse_count("seed", v); }},
      {"out_dir", "output directory", [](const C& c) { return c.out_dir; },
       [](C& c, const std::string& v) { c.out_dir = v; }},
      count("corpus.n_samples", "training utterances", [](C& c) -> auto& { return c.corpus.n_samples; }),
      {"corpus.alphabet", "token symbols, one character each", [](const C& c) { return c.corpus.alphabet; },
       [](C& c, const std::string& v) { c.corpus.alphabet = v; }},
      count("corpus.min_tokens", "shortest transcript", [](C& c) -> auto& { return c.corpus.min_tokens; }),
      count("corpus.max_tokens", "longest transcript", [](C& c) -> auto& { return c.corpus.max_tokens; }),
      real("corpus.channel_snr_db", "SNR of the recording channel noise",
           [](C& c) -> auto& { return c.corpus.channel_snr_db; }),
      real("corpus.video_jitter", "std. dev. of per-frame video noise",
           [](C& c) -> auto& { return c.corpus.video_jitter; }),
      count("corpus.video_dim", "video feature width", [](C& c) -> auto& { return c.corpus.video_dim; }),
      count("features.n_mels", "mel bands", [](C& c) -> auto& { return c.train.features.fbank.n_mels; }),
      count("features.group_order", "audio frames stacked per video frame",
            [](C& c) -> auto& { return c.train.features.group_order; }),
      flag("features.normalize", "per-utterance mean and variance normalization",
           [](C& c) -> auto& { return c.train.features.normalize; }),
      {"model.stage", "early|middle|late", [](const C& c) { return to_string(c.train.spec.stage); },
       [](C& c, const std::string& v) { c.train.spec.stage = parse_fusion_stage(v); }},
      {"model.block", "concat|align|cross", [](const C& c) { return to_string(c.train.spec.block); },
       [](C& c, const std::string& v) { c.train.spec.block = parse_fusion_block(v); }},
      count("model.d_model", "model width", [](C& c) -> auto& { return c.train.model.attention.d_model; }),
      count("model.n_heads", "attention heads", [](C& c) -> auto& { return c.train.model.attention.n_heads; }),
      count("model.d_ff", "feed-forward width", [](C& c) -> auto& { return c.train.model.d_ff; }),
      count("model.n_premix_blocks", "per-modality blocks before early fusion",
            [](C& c) -> auto& { return c.train.model.n_premix_blocks; }),
      count("model.n_shared_blocks", "blocks after early fusion",
            [](C& c) -> auto& { return c.train.model.n_shared_blocks; }),
      count("model.n_separate_blocks", "per-modality blocks for middle and late fusion; 0 derives it",
            [](C& c) -> auto& { return c.train.model.n_separate_blocks; }),
      count("model.n_decoder_blocks", "decoder blocks", [](C& c) -> auto& { return c.train.model.n_decoder_blocks; }),
      {"model.late_combiner", "sum|concat", [](const C& c) { return to_string(c.train.model.late_combiner); },
       [](C& c, const std::string& v) { c.train.model.late_combiner = parse_dual_combiner(v); }},
      flag("model.audio_only", "drop the video path (ablation)", [](C& c) -> auto& { return c.train.model.audio_only; }),
      count("train.epochs", "training epochs", [](C& c) -> auto& { return c.train.epochs; }),
      count("train.cl_epochs", "leading epochs ordered short to long", [](C& c) -> auto& { return c.train.cl_epochs; }),
      real("train.lr_start", "learning rate of the first epoch", [](C& c) -> auto& { return c.train.lr_start; }),
      real("train.lr_end", "learning rate of the last epoch", [](C& c) -> auto& { return c.train.lr_end; }),
      {"train.schedule", "log-linear|linear", [](const C& c) { return to_string(c.train.schedule); },
       [](C& c, const std::string& v) { c.train.schedule = parse_lr_schedule(v); }},
      real("train.label_smoothing", "smoothing mass", [](C& c) -> auto& { return c.train.label_smoothing; }),
      real("train.dropout", "dropout rate", [](C& c) -> auto& { return c.train.dropout; }),
      count("train.batch_size", "utterances per batch", [](C& c) -> auto& { return c.train.batch_size; }),
      count("train.bucket_batches", "batches per length bucket", [](C& c) -> auto& { return c.train.bucket_batches; }),
      real("train.max_grad_norm", "gradient clipping norm; 0 disables",
           [](C& c) -> auto& { return c.train.max_grad_norm; }),
      {"train.snr_set", "training SNRs in dB",
       [](const C& c) { return detail::join(c.train.snr_set, detail::real_text); },
       [](C& c, const std::string& v) {
         c.train.snr_set = detail::parse_list<double>(v, [](const std::string& s) {
           return detail::parse_real("train.snr_set", s);
         });
       }},
      {"train.noise_kinds", "training noise kinds; empty trains on clean audio only",
       [=](const C& c) { return kinds_text(c.train.noise_kinds); },
       [=](C& c, const std::string& v) { c.train.noise_kinds = parse_kinds(v); }},
      real("train.noise_bank_seconds", "length of each stored training noise",
           [](C& c) -> auto& { return c.train.noise_bank_seconds; }),
      count("eval.n_samples", "test utterances", [](C& c) -> auto& { return c.test_samples; }),
      {"eval.snr_grid", "evaluation columns: clean and SNRs in dB",
       [](const C& c) { return detail::join(c.eval_columns, [](const SnrColumn& s) { return to_string(s); }); },
       [](C& c, const std::string& v) {
         c.eval_columns = detail::parse_list<SnrColumn>(v, parse_snr_column);
       }},
      {"eval.noise_kinds", "evaluation noise kinds", [=](const C& c) { return kinds_text(c.eval_kinds); },
       [=](C& c, const std::string& v) { c.eval_kinds = parse_kinds(v); }},
      count("eval.beam_width", "beam width", [](C& c) -> auto& { return c.beam_width; }),
      count("eval.max_len", "longest decoded transcript", [](C& c) -> auto& { return c.max_len; }),
      flag("eval.length_norm", "rank finished hypotheses by per-token score",
           [](C& c) -> auto& { return c.length_norm; }),
  };
  return fields;
}

// Applies key=value assignments in order. Every bad line is reported, all at
// once, in a single ConfigError.
class ConfigBuilder {
 public:
  explicit ConfigBuilder(ExperimentConfig base = {}) : cfg_(std::move(base)) {}

  ConfigBuilder& assign(const std::string& key, const std::string& value, const std::string& where) {
    for (const auto& f : config_fields()) {
      if (f.key != key) continue;
      try {
        f.set(cfg_, value);
      } catch (const Error& e) {
        errors_.push_back(where + ": " + key + ": " + detail::bare_message(e));
      }
      return *this;
    }
    errors_.push_back(where + ": unknown key '" + key + "'");
    return *this;
  }

  ConfigBuilder& parse_text(const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      line = detail::trim(line.substr(0, line.find('#')));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = source + ":" + std::to_string(n);
      if (eq == std::string::npos) {
        errors_.push_back(where + ": expected key=value");
        continue;
      }
      assign(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), where);
    }
    return *this;
  }

  ConfigBuilder& parse_file(const std::filesystem::path& path) {
    return parse_text(detail::read_file(path), path.string());
  }

  // An override of the form key=value.
  ConfigBuilder& set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
      errors_.push_back("--set " + assignment + ": expected key=value");
      return *this;
    }
    return assign(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)),
                  "--set");
  }

  // The configuration, once every assignment parsed and the values are valid.
  // Keys that failed to parse keep their previous values for the value checks.
  ExperimentConfig build() const {
    std::vector<std::string> all = errors_;
    for (auto& p : cfg_.problems()) all.push_back(std::move(p));
    if (!all.empty()) {
      std::string msg = std::to_string(all.size()) + " configuration problem(s)";
      for (const auto& e : all) msg += "\n  " + e;
      throw ConfigError(msg);
    }
    return cfg_;
  }

 private:
  ExperimentConfig cfg_;
  std::vector<std::string> errors_;
};

inline std::string to_config_text(const ExperimentConfig& c) {
  std::string out = "# resolved configuration\n";
  for (const auto& f : config_fields()) out += f.key + "=" + f.get(c) + "\n";
  return out;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "config") {
  return ConfigBuilder().parse_text(text, source).build();
}

inline void write_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  detail::write_file(path, to_config_text(c));
}

}  // namespace avf
