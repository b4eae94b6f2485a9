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

// Synthetic paired audio-visual corpus and its on-disk layout.
//
// Every token lasts 160 ms: a pair of tones in the audio and four identical
// codebook vectors (plus jitter) in the video, one per 40 ms frame. A short
// tail of win - hop samples makes the 10 ms audio frames line up exactly
// with the video frames after grouping by four.
//
// Directory layout:
//   corpus.meta           key=value generation parameters
//   manifest.tsv          id, transcript, tokens, samples, frames, audio, video
//   audio/<id>.bin        rank-1 waveform
//   video/<id>.bin        rank-2 [frames x video_dim]
//
// Tensor files start with a 16-byte little-endian header:
//   bytes 0-3   magic "AVFT"
//   byte  4     dtype (1 = float32)
//   byte  5     rank (1 or 2)
//   bytes 6-7   reserved, zero
//   bytes 8-11  extent 0
//   bytes 12-15 extent 1 (zero for rank 1)
// followed by the float32 values in row-major order.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "avfusion/errors.hpp"
#include "avfusion/noise.hpp"
#include "avfusion/sample.hpp"
#include "avfusion/seed.hpp"
#include "avfusion/tensor.hpp"
#include "avfusion/vocab.hpp"

namespace avf {

inline constexpr std::size_t kTokenSamples = 2560;  // 160 ms at 16 kHz
inline constexpr std::size_t kFramesPerToken = 4;   // 40 ms video frames
inline constexpr std::size_t kTailSamples = 240;    // window minus hop

struct CorpusConfig {
  std::size_t n_samples = 32;
  std::string alphabet = "abcdefgh";
  std::size_t min_tokens = 2;
  std::size_t max_tokens = 6;
  std::uint64_t seed = 1;
  // Fixes what each symbol looks like on video. Corpora meant to be used
  // together (a training and a test split) must share it.
  std::uint64_t codebook_seed = 1;
  double channel_snr_db = 30.0;
  double video_jitter = 1.0;
  std::size_t video_dim = 512;
  double sample_rate = 16000.0;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (n_samples == 0) out.push_back("corpus.n_samples must be positive");
    if (alphabet.size() < 2) out.push_back("corpus.alphabet needs at least two symbols");
    if (min_tokens == 0 || min_tokens > max_tokens)
      out.push_back("corpus token range must satisfy 1 <= min_tokens <= max_tokens");
    if (video_dim == 0) out.push_back("corpus.video_dim must be positive");
    if (!(video_jitter >= 0)) out.push_back("corpus.video_jitter must be non-negative");
    if (sample_rate != 16000.0) out.push_back("corpus.sample_rate must be 16000");
    return out;
  }

  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ConfigError(p.front());
    Vocabulary check(alphabet);
  }
};

struct RawSample {
  std::string id;
  Waveform audio;
  Tensor video;  // [4 * tokens x video_dim]
  std::vector<int> transcript;
};

// Tone pair of the k-th alphabet symbol.
inline std::pair<double, double> token_tones(std::size_t k) {
  const double f1 = 300.0 + 120.0 * static_cast<double>(k);
  return {f1, 2.0 * f1 + 350.0};
}

// One N(0, 1) row per alphabet symbol.
inline Tensor video_codebook(const CorpusConfig& cfg) {
  Rng rng = make_rng(cfg.codebook_seed, "corpus.codebook");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor book({cfg.alphabet.size(), cfg.video_dim});
  for (Real& v : book.mutable_data()) v = normal(rng);
  return book;
}

inline std::string sample_id(std::size_t index) {
  std::ostringstream os;
  os << "utt" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

inline RawSample synth_sample(const CorpusConfig& cfg, const Tensor& codebook, std::size_t index) {
  Rng rng = make_rng(cfg.seed, "corpus.sample", {index});
  std::uniform_int_distribution<std::size_t> length(cfg.min_tokens, cfg.max_tokens);
  std::uniform_int_distribution<std::size_t> symbol(0, cfg.alphabet.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  RawSample s;
  s.id = sample_id(index);
  const std::size_t n = length(rng);
  std::vector<std::size_t> symbols(n);
  for (auto& k : symbols) k = symbol(rng);
  for (auto k : symbols) s.transcript.push_back(static_cast<int>(k) + Vocabulary::kFirstSymbol);

  const double fs = cfg.sample_rate;
  const std::size_t ramp = static_cast<std::size_t>(0.01 * fs);
  Waveform clean;
  clean.sample_rate = fs;
  clean.samples.assign(n * kTokenSamples + kTailSamples, Real{0});
  for (std::size_t t = 0; t < n; ++t) {
    auto [f1, f2] = token_tones(symbols[t]);
    // Mild per-token variation in pitch and loudness.
    const double detune = 1.0 + 0.03 * (unit(rng) - 0.5);
    const double gain = 0.8 + 0.4 * unit(rng);
    const double p1 = 2.0 * std::numbers::pi * unit(rng), p2 = 2.0 * std::numbers::pi * unit(rng);
    for (std::size_t i = 0; i < kTokenSamples; ++i) {
      const double time = static_cast<double>(i) / fs;
      double env = 1.0;
      if (i < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
      if (kTokenSamples - 1 - i < ramp)
        env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(kTokenSamples - 1 - i) / ramp);
      const double v = 0.5 * std::sin(2.0 * std::numbers::pi * f1 * detune * time + p1) +
                       0.35 * std::sin(2.0 * std::numbers::pi * f2 * detune * time + p2);
      clean.samples[t * kTokenSamples + i] = static_cast<Real>(gain * env * v);
    }
  }
  const Waveform channel = synth_noise(NoiseKind::White, clean.size(),
                                       derive_seed(cfg.seed, "corpus.channel", {index}), fs);
  s.audio = mix_at_snr(clean, channel, cfg.channel_snr_db);

  s.video = Tensor({n * kFramesPerToken, cfg.video_dim});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t f = 0; f < kFramesPerToken; ++f)
      for (std::size_t c = 0; c < cfg.video_dim; ++c)
        s.video.at(t * kFramesPerToken + f, c) =
            codebook.at(symbols[t], c) + static_cast<Real>(cfg.video_jitter * normal(rng));
  return s;
}

inline std::vector<RawSample> synth_av_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const Tensor codebook = video_codebook(cfg);
  std::vector<RawSample> out;
  out.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) out.push_back(synth_sample(cfg, codebook, i));
  return out;
}

// ---------------------------------------------------------------------------
// Binary tensors

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  if (t.rank() > 2) throw DimensionError("tensor files hold rank 1 or 2");
  std::string buf = "AVFT";
  buf.push_back(1);
  buf.push_back(static_cast<char>(t.rank()));
  buf.push_back(0);
  buf.push_back(0);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.dim(0)));
  detail::put_u32(buf, t.rank() == 2 ? static_cast<std::uint32_t>(t.dim(1)) : 0u);
  for (Real v : t.data()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return buf;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
  auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 4, "AVFT") != 0) {
    throw IoError(what + ": missing AVFT header");
  }
  if (p[4] != 1) throw IoError(what + ": unsupported dtype " + std::to_string(p[4]));
  const unsigned rank = p[5];
  if (rank != 1 && rank != 2) throw IoError(what + ": unsupported rank " + std::to_string(rank));
  Shape shape{detail::get_u32(p + 8)};
  if (rank == 2) shape.push_back(detail::get_u32(p + 12));
  const std::size_t n = detail::numel(shape);
  if (n == 0 || bytes.size() != 16 + 4 * n) throw IoError(what + ": size does not match header");
  std::vector<Real> values(n);
  for (std::size_t i = 0; i < n; ++i)
    values[i] = static_cast<Real>(std::bit_cast<float>(detail::get_u32(p + 16 + 4 * i)));
  return Tensor(shape, std::move(values));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Corpus directories

struct Corpus {
  CorpusConfig config;
  std::vector<RawSample> samples;
};

struct CorpusStats {
  std::size_t count = 0;
  double mean_tokens = 0;
  double mean_seconds = 0;
};

inline CorpusStats corpus_stats(const std::vector<RawSample>& samples) {
  CorpusStats s;
  s.count = samples.size();
  for (const auto& x : samples) {
    s.mean_tokens += static_cast<double>(x.transcript.size());
    s.mean_seconds += x.audio.duration();
  }
  if (s.count) {
    s.mean_tokens /= static_cast<double>(s.count);
    s.mean_seconds /= static_cast<double>(s.count);
  }
  return s;
}

inline std::string corpus_meta(const CorpusConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "n_samples=" << cfg.n_samples << "\n"
     << "alphabet=" << cfg.alphabet << "\n"
     << "min_tokens=" << cfg.min_tokens << "\n"
     << "max_tokens=" << cfg.max_tokens << "\n"
     << "seed=" << cfg.seed << "\n"
     << "codebook_seed=" << cfg.codebook_seed << "\n"
     << "channel_snr_db=" << cfg.channel_snr_db << "\n"
     << "video_jitter=" << cfg.video_jitter << "\n"
     << "video_dim=" << cfg.video_dim << "\n"
     << "sample_rate=" << cfg.sample_rate << "\n";
  return os.str();
}

inline void write_corpus(const std::filesystem::path& dir, const CorpusConfig& cfg,
                         const std::vector<RawSample>& samples) {
  const Vocabulary vocab(cfg.alphabet);
  detail::write_file(dir / "corpus.meta", corpus_meta(cfg));
  std::string manifest = "id\ttranscript\ttokens\tsamples\tframes\taudio\tvideo\n";
  for (const auto& s : samples) {
    const std::string audio = "audio/" + s.id + ".bin", video = "video/" + s.id + ".bin";
    Tensor wave = Tensor::vector(s.audio.samples);
    write_tensor(dir / audio, wave);
    write_tensor(dir / video, s.video);
    manifest += s.id + "\t" + vocab.decode(s.transcript) + "\t" +
                std::to_string(s.transcript.size()) + "\t" + std::to_string(s.audio.size()) +
                "\t" + std::to_string(s.video.rows()) + "\t" + audio + "\t" + video + "\n";
  }
  detail::write_file(dir / "manifest.tsv", manifest);
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline CorpusConfig parse_corpus_meta(const std::string& text, const std::string& where) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(where + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError(where + ": missing '" + key + "'");
    return it->second;
  };
  CorpusConfig c;
  try {
    c.n_samples = std::stoull(need("n_samples"));
    c.alphabet = need("alphabet");
    c.min_tokens = std::stoull(need("min_tokens"));
    c.max_tokens = std::stoull(need("max_tokens"));
    c.seed = std::stoull(need("seed"));
    c.codebook_seed = std::stoull(need("codebook_seed"));
    c.channel_snr_db = std::stod(need("channel_snr_db"));
    c.video_jitter = std::stod(need("video_jitter"));
    c.video_dim = std::stoull(need("video_dim"));
    c.sample_rate = std::stod(need("sample_rate"));
  } catch (const std::logic_error&) {
    throw IoError(where + ": unparsable value");
  }
  return c;
}

}  // namespace detail

inline Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.config = detail::parse_corpus_meta(detail::read_file(dir / "corpus.meta"),
                                            (dir / "corpus.meta").string());
  const Vocabulary vocab(corpus.config.alphabet);
  std::istringstream manifest(detail::read_file(dir / "manifest.tsv"));
  std::string line;
  std::getline(manifest, line);
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    if (f.size() != 7) {
      throw IoError("manifest.tsv line " + std::to_string(line_no) + ": expected 7 fields");
    }
    RawSample s;
    s.id = f[0];
    try {
      s.transcript = vocab.encode(f[1]);
    } catch (const UsageError&) {
      throw IoError("manifest.tsv line " + std::to_string(line_no) + ": bad transcript");
    }
    Tensor wave = read_tensor(dir / f[5]);
    if (wave.rank() != 1) throw IoError(f[5] + ": waveform must be rank 1");
    s.audio.sample_rate = corpus.config.sample_rate;
    s.audio.samples.assign(wave.data().begin(), wave.data().end());
    s.video = read_tensor(dir / f[6]);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace avf
