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

// avfusion: synthetic corpora, training, evaluation and gradient checks.
//
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime or
// numeric failure (including failed gradient checks), 3 file errors.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "avfusion/avfusion.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitIo = 3;

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "key=value configuration file");
  cmd->add_option("--set", c.overrides, "override one key, as key=value (repeatable)");
  cmd->add_option("-o,--out", c.out, "output directory (same as --set out_dir=...)");
}

avf::ExperimentConfig load_config(const Common& c) {
  avf::ConfigBuilder b;
  if (!c.config_file.empty()) b.parse_file(c.config_file);
  for (const auto& o : c.overrides) b.set(o);
  if (!c.out.empty()) b.set("out_dir=" + c.out);
  return b.build();
}

fs::path prepare_out_dir(const avf::ExperimentConfig& cfg) {
  const fs::path dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw avf::IoError("cannot create " + dir.string() + ": " + ec.message());
  avf::write_config(dir / "config.cfg", cfg);
  return dir;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_synth_data(const Common& common, const std::string& split) {
  const avf::ExperimentConfig cfg = load_config(common);
  const avf::CorpusConfig cc = split == "test" ? cfg.test_corpus() : cfg.train_corpus();
  const auto samples = avf::synth_av_corpus(cc);
  const fs::path dir = prepare_out_dir(cfg);
  avf::write_corpus(dir, cc, samples);
  const avf::CorpusStats st = avf::corpus_stats(samples);
  std::cout << "wrote " << st.count << " " << split << " samples to " << dir.string() << "\n"
            << "mean length " << fixed(st.mean_tokens, 3) << " tokens, " << fixed(st.mean_seconds, 3)
            << " s\n";
  return 0;
}

avf::Corpus corpus_for(const std::string& data_dir, const avf::CorpusConfig& fallback) {
  if (!data_dir.empty()) return avf::read_corpus(data_dir);
  return {fallback, avf::synth_av_corpus(fallback)};
}

int cmd_train(const Common& common, const std::string& data_dir, const std::string& resume,
              std::size_t until) {
  const avf::ExperimentConfig cfg = load_config(common);
  const avf::TrainConfig tc = cfg.resolved_train();
  const avf::Corpus corpus = corpus_for(data_dir, cfg.train_corpus());
  if (corpus.config.alphabet != cfg.corpus.alphabet)
    throw avf::ConfigError("corpus alphabet '" + corpus.config.alphabet + "' differs from corpus.alphabet '" +
                           cfg.corpus.alphabet + "'");
  avf::check_corpus_fit(corpus.samples, tc, cfg.corpus.alphabet);
  const fs::path dir = prepare_out_dir(cfg);

  avf::TrainState state = avf::init_train_state(tc);
  if (!resume.empty()) {
    state.epochs_done = avf::load_train_state(resume, state.model, state.adam);
    std::cout << "resuming after epoch " << state.epochs_done << "\n";
  }
  std::cout << "model " << state.model.spec.name() << ", " << avf::count_parameters(tc.model, tc.spec)
            << " parameters, " << corpus.samples.size() << " samples\n";

  std::ofstream metrics(dir / "metrics.tsv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw avf::IoError("cannot write " + (dir / "metrics.tsv").string());
  avf::TrainHooks hooks;
  hooks.on_epoch = [&](const avf::EpochMetrics& m, avf::TrainState& st) {
    metrics << m.epoch << '\t' << avf::format_exact(m.lr) << '\t' << avf::format_exact(m.mean_loss) << '\t'
            << fixed(m.wall_seconds, 3) << '\n';
    metrics.flush();
    avf::save_checkpoint(dir / "model.ckpt", st.model, corpus.config);
    avf::save_train_state(dir / "train.state", st.model, st.adam, st.epochs_done);
    std::cout << "epoch " << m.epoch << "  lr " << m.lr << "  loss " << fixed(m.mean_loss, 4) << "  ("
              << fixed(m.wall_seconds, 1) << " s)\n";
  };
  avf::train(state, corpus.samples, tc, cfg.corpus.alphabet, hooks, until);
  avf::save_checkpoint(dir / "model.ckpt", state.model, corpus.config);
  std::cout << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

std::vector<fs::path> checkpoint_files(const fs::path& p) {
  if (!fs::exists(p)) throw avf::IoError("checkpoint " + p.string() + " does not exist");
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw avf::IoError("no .ckpt files under " + p.string());
  return out;
}

void write_tables(const fs::path& dir, const avf::EvalMatrix& m) {
  avf::write_reports(dir, "wer", m);
  std::set<std::string> kinds;
  for (const auto& r : m.rows) kinds.insert(r.noise);
  for (const auto& k : kinds) {
    avf::EvalMatrix sub{m.columns, {}};
    for (const auto& r : m.rows)
      if (r.noise == k) sub.rows.push_back(r);
    avf::detail::write_file(dir / ("wer_" + k + ".txt"), avf::to_text_table(sub));
  }
}

int cmd_evaluate(const Common& common, const std::string& checkpoint, const std::string& data_dir,
                 std::size_t threads) {
  const avf::ExperimentConfig cfg = load_config(common);
  const auto files = checkpoint_files(checkpoint);
  const avf::Corpus test = corpus_for(data_dir, cfg.test_corpus());
  const avf::EvalOptions opt = cfg.eval_options(test.config.seed, threads);
  avf::EvalMatrix all;
  for (const auto& f : files) {
    const avf::Checkpoint ck = avf::load_checkpoint(f);
    if (ck.alphabet != test.config.alphabet)
      throw avf::ConfigError(f.string() + " was trained on alphabet '" + ck.alphabet +
                             "' but the test corpus uses '" + test.config.alphabet + "'");
    if (ck.codebook_seed != test.config.codebook_seed)
      throw avf::ConfigError(f.string() + " was trained on a corpus with a different video codebook "
                             "(codebook_seed " + std::to_string(ck.codebook_seed) + " vs " +
                             std::to_string(test.config.codebook_seed) + ")");
    std::cout << "evaluating " << f.string() << " (" << ck.model.spec.name() << ")\n";
    const avf::EvalMatrix m = avf::evaluate_matrix(ck.model, test.samples, opt);
    for (const auto& row : m.rows)
      for (const auto& seen : all.rows)
        if (seen.model == row.model && seen.noise == row.noise)
          throw avf::ConfigError("two checkpoints share model " + row.model.stage + "/" + row.model.block);
    avf::merge_into(all, m);
  }
  const fs::path dir = prepare_out_dir(cfg);
  write_tables(dir, all);
  std::cout << avf::to_text_table(all);
  return 0;
}

int cmd_gradcheck(const Common& common, const std::string& only) {
  const avf::ExperimentConfig cfg = load_config(common);
  avf::GradcheckOptions opt;
  opt.seed = cfg.seed;
  std::string report;
  bool ok = true;
  for (const auto& spec : avf::all_fusion_specs()) {
    if (!only.empty() && spec.name() != only) continue;
    const avf::GradcheckReport r = avf::gradcheck_spec(spec, opt);
    ok = ok && r.passed();
    report += spec.name() + (r.passed() ? "  PASS" : "  FAIL") + "\n";
    for (const auto& g : r.groups) {
      char line[256];
      std::snprintf(line, sizeof line, "  %-44s %6zu  %.3e%s\n", g.path.c_str(), g.elements, g.max_rel_error,
                    g.passed ? "" : "  FAIL");
      report += line;
    }
  }
  if (report.empty()) throw avf::ConfigError("--spec '" + only + "' is not stage/block, e.g. early/align");
  const fs::path dir = prepare_out_dir(cfg);
  avf::detail::write_file(dir / "gradcheck.txt", report);
  std::cout << report << (ok ? "all gradients match\n" : "gradient check FAILED\n");
  return ok ? 0 : kExitRuntime;
}

int cmd_report(const Common& common, const std::vector<std::string>& csvs) {
  const avf::ExperimentConfig cfg = load_config(common);
  avf::EvalMatrix all;
  for (const auto& f : csvs) avf::merge_into(all, avf::parse_csv(avf::detail::read_file(f)));
  const fs::path dir = prepare_out_dir(cfg);
  write_tables(dir, all);
  std::cout << avf::to_text_table(all);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual fusion speech recognition on synthetic data"};
  app.require_subcommand(1);
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--threads", threads, "cap on worker threads")->check(CLI::PositiveNumber);

  Common common;
  std::string split = "train", data_dir, resume, checkpoint, only;
  std::size_t until = std::numeric_limits<std::size_t>::max();
  std::vector<std::string> csvs;

  auto* synth = app.add_subcommand("synth-data", "write a synthetic corpus");
  add_common(synth, common);
  synth->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* train = app.add_subcommand("train", "train one model");
  add_common(train, common);
  train->add_option("--data", data_dir, "corpus directory (default: synthesize from the config)");
  train->add_option("--resume", resume, "train.state file to continue from");
  train->add_option("--until", until, "stop after this many epochs; the schedule still spans train.epochs");

  auto* evaluate = app.add_subcommand("evaluate", "word error rates over the noise grid");
  add_common(evaluate, common);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file or directory of checkpoints")->required();
  evaluate->add_option("--data", data_dir, "test corpus directory (default: synthesize from the config)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check of every variant");
  add_common(gradcheck, common);
  gradcheck->add_option("--spec", only, "check one variant, e.g. early/align");

  auto* report = app.add_subcommand("report", "merge evaluation CSVs into tables");
  add_common(report, common);
  report->add_option("csv", csvs, "wer.csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth_data(common, split);
    if (*train) return cmd_train(common, data_dir, resume, until);
    if (*evaluate) return cmd_evaluate(common, checkpoint, data_dir, threads);
    if (*gradcheck) return cmd_gradcheck(common, only);
    if (*report) return cmd_report(common, csvs);
  } catch (const avf::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const avf::IoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
