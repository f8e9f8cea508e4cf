#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/admin.hpp"
#include "deepformer/checkpoint.hpp"
#include "deepformer/corpus.hpp"
#include "deepformer/evalmetrics.hpp"
#include "deepformer/model.hpp"
#include "deepformer/runconfig.hpp"
#include "deepformer/train.hpp"

namespace deepformer {

// 0 = ran to completion (divergence is data, not failure), 2 = bad usage or
// config, 3 = internal error
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInternal = 3;

// profiling batch: one large deterministic batch drawn from the train split
inline constexpr size_t kProfileBudget = 4096;
inline constexpr uint64_t kProfileShuffleSeed = 999;

namespace cli_detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
}

inline std::string branch_kind(const OmegaProfile& p, size_t i) {
  if (i < p.encoder_branches) return i % 2 == 0 ? "self-attn" : "ffn";
  size_t d = (i - p.encoder_branches) % 3;
  return d == 0 ? "self-attn" : d == 1 ? "cross-attn" : "ffn";
}

inline size_t branch_layer(const OmegaProfile& p, size_t i) {
  return i < p.encoder_branches ? i / 2 : (i - p.encoder_branches) / 3;
}

inline OmegaProfile profile_on_train_split(Transformer<float>& model,
                                           const ParallelCorpus& train) {
  Batch b = make_batches(train, kProfileBudget, kProfileShuffleSeed).at(0);
  return build_profile(model, b.src, b.src_len, b.tgt_in, b.tgt_len, b.n);
}

inline std::vector<std::string> decode_lines(const Vocab& vocab,
                                             const std::vector<std::vector<int32_t>>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (const auto& s : ids) out.push_back(vocab.decode(s));
  return out;
}

// greedy decode of a whole corpus, long enough for any desk-scale target
template <typename T>
std::vector<std::string> decode_corpus(Transformer<T>& model, const Vocab& vocab,
                                       const ParallelCorpus& corpus) {
  size_t max_tgt = 0;
  for (const auto& t : corpus.tgt) max_tgt = std::max(max_tgt, t.size());
  auto hyp = model.greedy_decode(corpus.src, max_tgt + 4);
  return decode_lines(vocab, hyp);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

}  // namespace cli_detail

inline int cmd_profile(RunConfig cfg, std::ostream& os) {
  cfg.model.block_mode = BlockMode::admin;  // profiling is an admin-mode pass
  cfg.resolve();
  cli_detail::ensure_dir(cfg.out_dir);

  TaskData data = gen_task(cfg.task, cfg.data_seed);
  Transformer<float> model(cfg.model);
  model.init_default(cfg.seeds.at(0));
  OmegaProfile p = cli_detail::profile_on_train_split(model, data.train);

  std::string path = cfg.out_dir + "/profile.json";
  cli_detail::write_text(path, p.to_json());

  os << "profiled " << p.branch_variances.size() << " branches ("
     << p.encoder_branches << " encoder + " << p.decoder_branches
     << " decoder) over " << p.profiling_tokens << " tokens\n";
  os << std::left << std::setw(8) << "branch" << std::setw(6) << "chain"
     << std::setw(7) << "layer" << std::setw(12) << "kind" << std::right
     << std::setw(14) << "variance" << std::setw(12) << "omega" << '\n';
  for (size_t i = 0; i < p.branch_variances.size(); ++i) {
    os << std::left << std::setw(8) << i << std::setw(6)
       << (i < p.encoder_branches ? "enc" : "dec") << std::setw(7)
       << cli_detail::branch_layer(p, i) << std::setw(12)
       << cli_detail::branch_kind(p, i) << std::right << std::setw(14)
       << std::scientific << std::setprecision(4) << p.branch_variances[i]
       << std::setw(12) << std::fixed << std::setprecision(4) << p.omegas[i]
       << '\n';
  }
  os << "wrote " << path << '\n';
  return kExitOk;
}

inline int cmd_train(RunConfig cfg, std::ostream& os) {
  cfg.resolve();
  cli_detail::ensure_dir(cfg.out_dir);
  TaskData data = gen_task(cfg.task, cfg.data_seed);

  for (uint64_t seed : cfg.seeds) {
    std::string dir = cfg.out_dir + "/seed" + std::to_string(seed);
    cli_detail::ensure_dir(dir);

    RunConfig seed_cfg = cfg;
    seed_cfg.seeds = {seed};
    seed_cfg.out_dir = dir;
    cli_detail::write_text(dir + "/config.json", seed_cfg.to_json().dump(2) + "\n");

    Transformer<float> model(cfg.model);
    model.init_default(seed);
    std::optional<OmegaProfile> profile;
    if (cfg.init_mode == "admin") {
      profile = cli_detail::profile_on_train_split(model, data.train);
      apply_profile(model, *profile);
      cli_detail::write_text(dir + "/profile.json", profile->to_json());
    }

    TrainOptions opt = cfg.train;
    opt.seed = seed;
    TrainRecord rec = train_loop(model, data.train, data.dev, opt);

    std::ostringstream steps, epochs;
    rec.steps_csv(steps);
    rec.epochs_csv(epochs);
    cli_detail::write_text(dir + "/steps.csv", steps.str());
    cli_detail::write_text(dir + "/epochs.csv", epochs.str());
    save_checkpoint(model, seed_cfg, cfg.init_mode, rec.steps.size(),
                    dir + "/checkpoint", profile ? &*profile : nullptr);

    std::ostringstream result;
    result << "RESULT seed=" << seed << " init=" << cfg.init_mode;
    if (rec.diverged) {
      result << " status=diverge reason=" << rec.reason
             << " steps=" << rec.steps.size();
    } else {
      result << " status=ok steps=" << rec.steps.size() << " final_dev_ppl="
             << fmt_double(rec.final_dev_ppl()) << " best_dev_ppl="
             << fmt_double(rec.best_dev_ppl());
    }
    cli_detail::write_text(dir + "/result.txt", result.str() + "\n");
    os << result.str() << '\n';
  }
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string baseline;  // optional second checkpoint for the bootstrap
  std::string src_file;  // optional explicit corpus; defaults to the stored
  std::string ref_file;  // task's test split
  std::string out_dir;   // defaults to the checkpoint's run directory
  size_t bootstrap_samples = 1000;
  uint64_t bootstrap_seed = 0;
};

template <typename T>
int run_eval(const EvalArgs& args, std::ostream& os) {
  auto [meta, model] = load_checkpoint<T>(args.checkpoint);
  const TaskSpec& task = meta.run_config.task;
  Vocab vocab = Vocab::make(task.vocab_size);

  TaskData data = gen_task(task, meta.run_config.data_seed);
  ParallelCorpus corpus;
  if (!args.src_file.empty() || !args.ref_file.empty()) {
    if (args.src_file.empty() || args.ref_file.empty()) {
      throw ConfigError("--src and --ref must be given together");
    }
    auto src_lines = cli_detail::read_lines(args.src_file);
    auto ref_lines = cli_detail::read_lines(args.ref_file);
    if (src_lines.size() != ref_lines.size()) {
      throw DataError("corpus line counts differ: " +
                      std::to_string(src_lines.size()) + " vs " +
                      std::to_string(ref_lines.size()));
    }
    for (size_t i = 0; i < src_lines.size(); ++i) {
      auto s = vocab.encode(src_lines[i]);
      auto t = vocab.encode(ref_lines[i]);
      for (int32_t id : s) {
        if (id == kUnkId) {
          throw DataError("vocab mismatch: line " + std::to_string(i + 1) +
                          " of " + args.src_file +
                          " has tokens outside the checkpoint vocabulary");
        }
      }
      corpus.src.push_back(std::move(s));
      corpus.tgt.push_back(std::move(t));
    }
  } else {
    corpus = data.test;
  }

  std::string out_dir = args.out_dir.empty()
                            ? std::filesystem::path(args.checkpoint)
                                  .parent_path()
                                  .string()
                            : args.out_dir;
  if (out_dir.empty()) out_dir = ".";
  cli_detail::ensure_dir(out_dir);

  auto hyps = cli_detail::decode_corpus(*model, vocab, corpus);
  auto refs = cli_detail::decode_lines(vocab, corpus.tgt);
  EvalReport report = bleu_corpus(hyps, refs);

  // Fig. 3 buckets word accuracy by training-set frequency
  auto train_tgt = cli_detail::decode_lines(vocab, data.train.tgt);
  FineGrainedReport fine = fine_grained_report(hyps, refs, train_tgt);

  nlohmann::json j = report.to_json();
  j["fine_grained"] = fine.to_json();
  j["sentences"] = refs.size();

  os << std::fixed << std::setprecision(2) << "BLEU " << report.corpus.bleu
     << "  (precisions";
  for (double p : report.corpus.precisions) os << ' ' << 100.0 * p;
  os << ", brevity penalty " << std::setprecision(3)
     << report.corpus.brevity_penalty << ", " << refs.size() << " sentences)\n";

  os << "word accuracy by training frequency\n";
  for (const auto& [label, row] : fine.word_accuracy) {
    os << "  " << std::left << std::setw(9) << label << std::right
       << std::setw(7) << row.matched << " /" << std::setw(7) << row.total
       << "  " << std::setprecision(3) << row.accuracy() << '\n';
  }
  os << "BLEU by reference length\n";
  for (const auto& [label, b] : fine.bleu_by_length) {
    os << "  " << std::left << std::setw(9) << label << std::right
       << std::setprecision(2) << b.bleu << '\n';
  }

  if (!args.baseline.empty()) {
    auto [bmeta, bmodel] = load_checkpoint<T>(args.baseline);
    if (bmeta.run_config.task.vocab_size != task.vocab_size) {
      throw DataError("vocab mismatch: baseline checkpoint uses " +
                      std::to_string(bmeta.run_config.task.vocab_size) +
                      " tokens, main uses " + std::to_string(task.vocab_size));
    }
    auto bhyps = cli_detail::decode_corpus(*bmodel, vocab, corpus);
    EvalReport breport = bleu_corpus(bhyps, refs);
    BootstrapResult boot =
        paired_bootstrap(report.stats, breport.stats, args.bootstrap_samples,
                         args.bootstrap_seed);
    j["baseline"] = {{"checkpoint", args.baseline},
                     {"bleu", breport.corpus.bleu},
                     {"p_value", boot.p_value},
                     {"win_rate", boot.win_rate},
                     {"n_samples", boot.n_samples}};
    os << "baseline BLEU " << std::setprecision(2) << breport.corpus.bleu
       << "; paired bootstrap p=" << std::setprecision(4) << boot.p_value
       << " win=" << boot.win_rate << " over " << boot.n_samples
       << " samples\n";
  }

  std::string path = out_dir + "/eval.json";
  cli_detail::write_text(path, j.dump(2) + "\n");
  os << "wrote " << path << '\n';
  return kExitOk;
}

struct FoldArgs {
  std::string checkpoint;
  std::string out_stem;
};

inline int cmd_fold(const FoldArgs& args, std::ostream& os) {
  CheckpointMeta meta = load_checkpoint_meta(args.checkpoint);
  if (meta.init_mode != "admin") {
    throw ConfigError("fold needs an admin checkpoint, got init_mode=" +
                      meta.init_mode);
  }
  auto [m, model] = load_checkpoint<float>(args.checkpoint);
  auto folded = model->clone();
  folded->fold_omegas();

  TaskData data = gen_task(m.run_config.task, m.run_config.data_seed);
  Batch b = make_batches(data.test, 1024, 0).at(0);
  double worst = 0.0;
  {
    Tape<float> ta(false), tf(false);
    NodeId la = model->forward_logits(ta, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                      b.n, false, 0);
    NodeId lf = folded->forward_logits(tf, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                       b.n, false, 0);
    const Tensor<float>& va = ta.value(la);
    const Tensor<float>& vf = tf.value(lf);
    for (size_t i = 0; i < va.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(va.data[i]) -
                                       static_cast<double>(vf.data[i])));
    }
  }

  RunConfig folded_cfg = m.run_config;
  folded_cfg.model.block_mode = BlockMode::postln;
  std::filesystem::path out(args.out_stem);
  if (out.has_parent_path()) cli_detail::ensure_dir(out.parent_path().string());
  save_checkpoint(*folded, folded_cfg, "folded", m.step_count, args.out_stem);

  os << "max logit deviation on probe batch: " << std::scientific
     << std::setprecision(3) << worst << '\n';
  os << "wrote " << args.out_stem << ".json\n";
  return kExitOk;
}

inline int cmd_gen_data(RunConfig cfg, std::ostream& os) {
  cfg.task.validate();
  cli_detail::ensure_dir(cfg.out_dir);
  TaskData data = gen_task(cfg.task, cfg.data_seed);
  Vocab vocab = Vocab::make(cfg.task.vocab_size);
  vocab.save(cfg.out_dir + "/vocab.txt");
  save_corpus(cfg.out_dir + "/train", data.train, vocab);
  save_corpus(cfg.out_dir + "/dev", data.dev, vocab);
  save_corpus(cfg.out_dir + "/test", data.test, vocab);
  os << "wrote " << data.train.size() << " train / " << data.dev.size()
     << " dev / " << data.test.size() << " test sentences under " << cfg.out_dir
     << '\n';
  return kExitOk;
}

// one trained cell of the sweep grid
struct SweepRun {
  SweepCell cell;
  uint64_t seed = 0;
  bool diverged = false;
  std::string reason;
  size_t steps = 0;
  double final_dev_ppl = 0.0;
  double best_dev_ppl = 0.0;
};

inline int cmd_sweep(RunConfig cfg, std::ostream& os) {
  if (cfg.cells.empty()) {
    throw ConfigError("sweep needs a [sweep] cells list");
  }
  cfg.task.validate();
  cli_detail::ensure_dir(cfg.out_dir);
  TaskData data = gen_task(cfg.task, cfg.data_seed);
  Vocab vocab = Vocab::make(cfg.task.vocab_size);
  auto refs_one = cli_detail::decode_lines(vocab, data.test.tgt);

  std::ofstream results(cfg.out_dir + "/results.csv", std::ios::binary);
  if (!results) throw DataError("cannot write " + cfg.out_dir + "/results.csv");
  results << "cell,seed,status,steps,final_dev_ppl,best_dev_ppl\n" << std::flush;

  std::vector<std::vector<SentenceBleuStats>> cell_stats(cfg.cells.size());
  std::vector<SweepRun> runs;
  for (size_t ci = 0; ci < cfg.cells.size(); ++ci) {
    const SweepCell& cell = cfg.cells[ci];
    RunConfig cell_cfg = cfg;
    cell_cfg.model.n_enc_layers = cell.n_enc;
    cell_cfg.model.n_dec_layers = cell.n_dec;
    cell_cfg.init_mode = cell.init_mode;
    cell_cfg.resolve();

    for (uint64_t seed : cfg.seeds) {
      Transformer<float> model(cell_cfg.model);
      model.init_default(seed);
      if (cell.init_mode == "admin") {
        apply_profile(model, cli_detail::profile_on_train_split(model, data.train));
      }
      TrainOptions opt = cfg.train;
      opt.seed = seed;
      TrainRecord rec = train_loop(model, data.train, data.dev, opt);

      SweepRun run;
      run.cell = cell;
      run.seed = seed;
      run.diverged = rec.diverged;
      run.reason = rec.reason;
      run.steps = rec.steps.size();
      run.final_dev_ppl = rec.final_dev_ppl();
      run.best_dev_ppl = rec.best_dev_ppl();
      runs.push_back(run);
      results << cell.label() << ',' << seed << ','
              << (rec.diverged ? "diverge:" + rec.reason : "ok") << ','
              << run.steps << ',' << fmt_double(run.final_dev_ppl) << ','
              << fmt_double(run.best_dev_ppl) << '\n'
              << std::flush;
      os << "cell " << cell.label() << " seed " << seed << ": "
         << (rec.diverged ? "diverge (" + rec.reason + ")"
                          : "dev ppl " + fmt_double(run.final_dev_ppl))
         << '\n';

      auto hyps = cli_detail::decode_corpus(model, vocab, data.test);
      for (size_t i = 0; i < hyps.size(); ++i) {
        cell_stats[ci].push_back(sentence_bleu_stats(split_tokens(hyps[i]),
                                                     split_tokens(refs_one[i])));
      }
    }
  }

  // Table-4-style matrix: row i vs column j, '+' when i beats j at p < 0.05
  const size_t n = cfg.cells.size();
  std::vector<std::string> matrix(n * n, "=");
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double p_ij = paired_bootstrap(cell_stats[i], cell_stats[j], 1000,
                                     mix64(cfg.data_seed, i, j))
                        .p_value;
      if (p_ij < 0.05) matrix[i * n + j] = "+";
    }
  }
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      if (matrix[i * n + j] == "=" && matrix[j * n + i] == "+") {
        matrix[i * n + j] = "-";
      }
    }
  }

  std::ostringstream mcsv;
  mcsv << "cell";
  for (const auto& c : cfg.cells) mcsv << ',' << c.label();
  mcsv << '\n';
  for (size_t i = 0; i < n; ++i) {
    mcsv << cfg.cells[i].label();
    for (size_t j = 0; j < n; ++j) mcsv << ',' << matrix[i * n + j];
    mcsv << '\n';
  }
  cli_detail::write_text(cfg.out_dir + "/matrix.csv", mcsv.str());

  size_t w = 6;
  for (const auto& c : cfg.cells) w = std::max(w, c.label().size() + 2);
  os << "significance matrix (row vs column, paired bootstrap p < 0.05)\n";
  os << std::left << std::setw(static_cast<int>(w)) << "";
  for (const auto& c : cfg.cells) os << std::setw(static_cast<int>(w)) << c.label();
  os << '\n';
  for (size_t i = 0; i < n; ++i) {
    os << std::setw(static_cast<int>(w)) << cfg.cells[i].label();
    for (size_t j = 0; j < n; ++j) {
      os << std::setw(static_cast<int>(w)) << matrix[i * n + j];
    }
    os << '\n';
  }
  os << "wrote " << cfg.out_dir << "/results.csv and matrix.csv\n";
  return kExitOk;
}

}  // namespace deepformer
