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

// Word error rates over a grid of noise conditions, and the CSV and text
// renderings of the resulting matrix.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/beam_search.hpp"
#include "avfusion/corpus.hpp"
#include "avfusion/noise.hpp"
#include "avfusion/seed.hpp"
#include "avfusion/wer.hpp"

namespace avf {

// A column of the matrix: an SNR in dB, or the unmixed signal.
using SnrColumn = std::optional<int>;

inline std::vector<SnrColumn> default_snr_columns() {
  return {std::nullopt, 20, 15, 10, 5, 0, -5};
}

inline std::string to_string(const SnrColumn& c) { return c ? std::to_string(*c) : "clean"; }

inline SnrColumn parse_snr_column(const std::string& s) {
  if (s == "clean") return std::nullopt;
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError("SNR column '" + s + "' is not 'clean' or an integer");
  return v;
}

// Clean first, then decreasing SNR.
inline bool column_before(const SnrColumn& a, const SnrColumn& b) {
  if (!a || !b) return !a && b;
  return *a > *b;
}

// Identifies the model of a row. Audio-only ablations use stage "audio" and
// block "none".
struct ModelTag {
  std::string stage;
  std::string block;

  bool operator==(const ModelTag&) const = default;
};

inline ModelTag model_tag(const ModelParams& m) {
  if (m.config.audio_only) return {"audio", "none"};
  return {to_string(m.spec.stage), to_string(m.spec.block)};
}

struct EvalRow {
  ModelTag model;
  std::string noise;
  std::vector<double> wer;  // one per matrix column

  bool operator==(const EvalRow&) const = default;
};

struct EvalMatrix {
  std::vector<SnrColumn> columns;
  std::vector<EvalRow> rows;

  bool operator==(const EvalMatrix&) const = default;

  // Arithmetic mean of the SNR columns of a row; NaN when there are none.
  double noisy_mean(const EvalRow& row) const {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < columns.size(); ++c)
      if (columns[c]) sum += row.wer[c], ++n;
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  bool has_noisy_columns() const {
    return std::any_of(columns.begin(), columns.end(), [](const SnrColumn& c) { return c.has_value(); });
  }
};

namespace detail {

inline int rank_of(const std::string& s, std::initializer_list<const char*> order) {
  int r = 0;
  for (const char* o : order) {
    if (s == o) return r;
    ++r;
  }
  return r;
}

inline auto row_key(const EvalRow& r) {
  return std::make_tuple(rank_of(r.model.stage, {"late", "middle", "early", "audio"}), r.model.stage,
                         rank_of(r.model.block, {"concat", "align", "cross", "none"}), r.model.block,
                         rank_of(r.noise, {"white", "pink", "babble", "hum"}), r.noise);
}

}  // namespace detail

// Puts rows in table order and columns clean-first, then by decreasing SNR.
inline void canonicalize(EvalMatrix& m) {
  std::vector<std::size_t> perm(m.columns.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t a, std::size_t b) { return column_before(m.columns[a], m.columns[b]); });
  std::vector<SnrColumn> cols;
  for (std::size_t p : perm) cols.push_back(m.columns[p]);
  m.columns = std::move(cols);
  for (EvalRow& r : m.rows) {
    std::vector<double> w;
    for (std::size_t p : perm) w.push_back(r.wer[p]);
    r.wer = std::move(w);
  }
  std::stable_sort(m.rows.begin(), m.rows.end(),
                   [](const EvalRow& a, const EvalRow& b) { return detail::row_key(a) < detail::row_key(b); });
}

// Appends the rows of `more`; both matrices must share one column set.
inline void merge_into(EvalMatrix& into, const EvalMatrix& more) {
  if (more.rows.empty()) return;
  if (into.rows.empty() && into.columns.empty()) into.columns = more.columns;
  if (into.columns != more.columns) throw UsageError("cannot merge matrices with different SNR columns");
  into.rows.insert(into.rows.end(), more.rows.begin(), more.rows.end());
  canonicalize(into);
}

// Total edits over total reference tokens.
inline double corpus_wer(const std::vector<std::vector<int>>& refs,
                         const std::vector<std::vector<int>>& hyps) {
  if (refs.size() != hyps.size()) throw UsageError("reference and hypothesis counts differ");
  std::size_t edits = 0, words = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) throw UsageError("word error rate needs a nonempty reference");
    edits += edit_distance(std::span<const int>(refs[i]), std::span<const int>(hyps[i]));
    words += refs[i].size();
  }
  if (words == 0) throw UsageError("word error rate needs at least one reference");
  return static_cast<double>(edits) / static_cast<double>(words);
}

struct EvalOptions {
  std::vector<SnrColumn> columns = default_snr_columns();
  std::vector<NoiseKind> kinds{NoiseKind::Babble, NoiseKind::Hum};
  BeamOptions beam;
  FeatureOptions features;
  std::uint64_t seed = 1;  // corpus seed; fixes the noisy mixtures
  std::size_t threads = 1;
  // Sees every noisy mixture before it is decoded. May be called from several
  // threads at once.
  std::function<void(const RawSample&, NoiseKind, int, const Waveform&)> on_mixture;
};

// Noise added to sample `id` for one cell. Depends only on the seed, the
// noise kind, the SNR and the sample, never on the model.
inline Waveform eval_noise(std::uint64_t seed, NoiseKind kind, int snr_db, const std::string& id,
                           std::size_t n, double fs) {
  const std::uint64_t s =
      derive_seed(seed, "eval.noise." + to_string(kind) + "." + id, {seed_index(snr_db)});
  return synth_noise(kind, n, s, fs);
}

inline Waveform eval_mixture(const RawSample& s, NoiseKind kind, int snr_db, const EvalOptions& opt) {
  const Waveform noise = eval_noise(opt.seed, kind, snr_db, s.id, s.audio.size(), s.audio.sample_rate);
  return mix_at_snr(s.audio, noise, snr_db);
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

// Decodes every sample under every (kind, column) condition with one model.
// The clean column is decoded once and shared by all noise kinds.
inline EvalMatrix evaluate_matrix(const ModelParams& m, const std::vector<RawSample>& corpus,
                                  const EvalOptions& opt) {
  if (corpus.empty()) throw UsageError("evaluation corpus is empty");
  if (opt.kinds.empty()) throw UsageError("evaluation needs at least one noise kind");
  EvalMatrix out;
  out.columns = opt.columns;
  canonicalize(out);

  struct Job {
    std::optional<NoiseKind> kind;  // empty for the clean column
    int snr = 0;
    std::size_t sample = 0;
  };
  std::vector<Job> jobs;
  const bool want_clean = std::any_of(out.columns.begin(), out.columns.end(),
                                      [](const SnrColumn& c) { return !c; });
  if (want_clean)
    for (std::size_t i = 0; i < corpus.size(); ++i) jobs.push_back({std::nullopt, 0, i});
  for (NoiseKind k : opt.kinds)
    for (const SnrColumn& c : out.columns)
      if (c)
        for (std::size_t i = 0; i < corpus.size(); ++i) jobs.push_back({k, *c, i});

  std::vector<std::vector<int>> hyps(jobs.size());
  detail::parallel_for(jobs.size(), opt.threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    const RawSample& s = corpus[job.sample];
    const Waveform audio = job.kind ? eval_mixture(s, *job.kind, job.snr, opt) : s.audio;
    if (job.kind && opt.on_mixture) opt.on_mixture(s, *job.kind, job.snr, audio);
    const FeaturePair f = featurize(s.id, audio, s.video, s.transcript, opt.features);
    hyps[j] = decode_sample(m, f, opt.beam).tokens;
  });

  std::vector<std::vector<int>> refs;
  for (const auto& s : corpus) refs.push_back(s.transcript);
  auto cell = [&](std::size_t first) {
    std::vector<std::vector<int>> h(hyps.begin() + static_cast<std::ptrdiff_t>(first),
                                    hyps.begin() + static_cast<std::ptrdiff_t>(first + corpus.size()));
    return corpus_wer(refs, h);
  };
  const double clean = want_clean ? cell(0) : 0;
  std::size_t next = want_clean ? corpus.size() : 0;
  for (NoiseKind k : opt.kinds) {
    EvalRow row{model_tag(m), to_string(k), {}};
    for (const SnrColumn& c : out.columns) {
      if (!c) {
        row.wer.push_back(clean);
      } else {
        row.wer.push_back(cell(next));
        next += corpus.size();
      }
    }
    out.rows.push_back(std::move(row));
  }
  canonicalize(out);
  return out;
}

// ---------------------------------------------------------------------------
// CSV: stage,block,noise,snr_db,wer with one line per cell.

inline constexpr const char* kEvalCsvHeader = "stage,block,noise,snr_db,wer";

inline std::string format_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv(const EvalMatrix& m) {
  std::string out = std::string(kEvalCsvHeader) + "\n";
  for (const EvalRow& r : m.rows)
    for (std::size_t c = 0; c < m.columns.size(); ++c)
      out += r.model.stage + "," + r.model.block + "," + r.noise + "," + to_string(m.columns[c]) + "," +
             format_exact(r.wer[c]) + "\n";
  return out;
}

inline EvalMatrix parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kEvalCsvHeader)
    throw IoError("evaluation CSV must start with '" + std::string(kEvalCsvHeader) + "'");
  EvalMatrix m;
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, double>> cells;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 5) throw IoError("CSV line " + std::to_string(lineno) + " does not have 5 fields");
    SnrColumn col;
    double w = 0;
    try {
      col = parse_snr_column(f[3]);
      std::size_t used = 0;
      w = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception& e) {
      throw IoError("CSV line " + std::to_string(lineno) + ": " + e.what());
    }
    if (std::find(m.columns.begin(), m.columns.end(), col) == m.columns.end()) m.columns.push_back(col);
    auto key = std::make_tuple(f[0], f[1], f[2]);
    if (!cells.count(key)) order.push_back(key);
    if (!cells[key].emplace(f[3], w).second)
      throw IoError("CSV line " + std::to_string(lineno) + " repeats a cell");
  }
  for (const auto& key : order) {
    EvalRow r{{std::get<0>(key), std::get<1>(key)}, std::get<2>(key), {}};
    for (const SnrColumn& c : m.columns) {
      auto it = cells[key].find(to_string(c));
      if (it == cells[key].end())
        throw IoError("CSV row " + r.model.stage + "/" + r.model.block + "/" + r.noise + " lacks column " +
                      to_string(c));
      r.wer.push_back(it->second);
    }
    m.rows.push_back(std::move(r));
  }
  canonicalize(m);
  return m;
}

// ---------------------------------------------------------------------------
// Text table in the layout of a published WER table.

inline std::string stage_label(const std::string& stage) {
  if (stage == "audio") return "Audio-only";
  try {
    return display_name(parse_fusion_stage(stage));
  } catch (const ConfigError&) {
    return stage;
  }
}

inline std::string block_label(const std::string& block) {
  if (block == "none") return "-";
  try {
    return display_name(parse_fusion_block(block));
  } catch (const ConfigError&) {
    return block;
  }
}

inline std::string column_label(const SnrColumn& c) { return c ? std::to_string(*c) + "dB" : "clean"; }

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

inline std::string to_text_table(const EvalMatrix& m) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"Fusion stage", "Fusion block", "Noise"};
  for (const auto& c : m.columns) head.push_back(column_label(c));
  const bool mean = m.has_noisy_columns();
  cells.push_back(head);
  for (const EvalRow& r : m.rows) {
    std::vector<std::string> line{stage_label(r.model.stage), block_label(r.model.block), r.noise};
    for (double w : r.wer) line.push_back(percent(w));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::string out;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    std::string text;
    for (std::size_t i = 0; i < cells[k].size(); ++i) {
      const std::string& s = cells[k][i];
      const std::string pad(width[i] - s.size(), ' ');
      text += i < 3 ? s + pad : pad + s;  // labels left, numbers right
      if (i + 1 < cells[k].size()) text += "  ";
    }
    if (mean) text += " | " + (k == 0 ? std::string("mean on noisy data") : percent(m.noisy_mean(m.rows[k - 1])));
    while (!text.empty() && text.back() == ' ') text.pop_back();
    out += text + "\n";
  }
  return out;
}

inline void write_reports(const std::filesystem::path& dir, const std::string& stem, const EvalMatrix& m) {
  detail::write_file(dir / (stem + ".csv"), to_csv(m));
  detail::write_file(dir / (stem + ".txt"), to_text_table(m));
}

}  // namespace avf
