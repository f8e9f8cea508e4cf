#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "deepformer/cli.hpp"
#include "deepformer/threadpool.hpp"

namespace {

std::string strip_checkpoint_suffix(std::string path) {
  for (const char* suffix : {".json", ".bin"}) {
    if (path.size() > std::strlen(suffix) &&
        path.compare(path.size() - std::strlen(suffix), std::string::npos,
                     suffix) == 0) {
      path.erase(path.size() - std::strlen(suffix));
      break;
    }
  }
  return path;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace deepformer;

  CLI::App app{"deep encoder-decoder transformer: profiling, training, "
               "evaluation, folding, and depth sweeps on synthetic tasks"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::optional<uint64_t> seed;
  unsigned threads = 1;
  app.add_option("--threads", threads, "worker threads (results are identical "
                                       "at any count)");

  auto add_config_opts = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", config_path, "run config file "
                                                       "(key=value or JSON)");
    if (config_required) c->required();
    sub->add_option("--seed", seed, "override the config's seed list with one seed");
    sub->add_option("--out", out_dir, "override the config's output directory");
  };

  CLI::App* profile = app.add_subcommand("profile", "one forward pass per branch "
                                                    "variance, written as JSON");
  add_config_opts(profile, true);

  CLI::App* train = app.add_subcommand("train", "train one model per seed; "
                                                "writes checkpoints and curves");
  add_config_opts(train, true);

  EvalArgs eval_args;
  bool f64 = false;
  CLI::App* eval = app.add_subcommand("eval", "greedy-decode a test set and "
                                              "report BLEU with diagnostics");
  eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint stem or "
                                                         ".json path")
      ->required();
  eval->add_option("--baseline", eval_args.baseline,
                   "second checkpoint for a paired bootstrap");
  eval->add_option("--src", eval_args.src_file, "tokenized source file "
                                                "(defaults to the task's test split)");
  eval->add_option("--ref", eval_args.ref_file, "tokenized reference file");
  eval->add_option("--out", eval_args.out_dir, "report directory");
  eval->add_option("--bootstrap-samples", eval_args.bootstrap_samples,
                   "paired bootstrap resamples");
  eval->add_option("--bootstrap-seed", eval_args.bootstrap_seed,
                   "paired bootstrap seed");
  eval->add_flag("--f64", f64, "run the forward passes in 64-bit");

  FoldArgs fold_args;
  CLI::App* fold = app.add_subcommand("fold", "fold an admin checkpoint's "
                                              "omegas into its weights");
  fold->add_option("--checkpoint", fold_args.checkpoint, "admin checkpoint "
                                                         "stem or .json path")
      ->required();
  std::string fold_out;
  fold->add_option("--out", fold_out, "output directory (default: alongside "
                                      "the input)");

  CLI::App* sweep = app.add_subcommand("sweep", "train a depth grid and emit "
                                                "the significance matrix");
  add_config_opts(sweep, true);

  CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic corpus "
                                                 "as tokenized text files");
  add_config_opts(gen, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  global_pool(threads);

  try {
    auto load_cfg = [&]() {
      RunConfig cfg = load_run_config(config_path);
      if (seed) cfg.seeds = {*seed};
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      return cfg;
    };

    if (profile->parsed()) return cmd_profile(load_cfg(), std::cout);
    if (train->parsed()) return cmd_train(load_cfg(), std::cout);
    if (sweep->parsed()) return cmd_sweep(load_cfg(), std::cout);
    if (gen->parsed()) {
      RunConfig cfg = load_cfg();
      if (seed) cfg.data_seed = *seed;  // gen-data's only randomness is the corpus
      return cmd_gen_data(cfg, std::cout);
    }
    if (eval->parsed()) {
      eval_args.checkpoint = strip_checkpoint_suffix(eval_args.checkpoint);
      if (!eval_args.baseline.empty()) {
        eval_args.baseline = strip_checkpoint_suffix(eval_args.baseline);
      }
      return f64 ? run_eval<double>(eval_args, std::cout)
                 : run_eval<float>(eval_args, std::cout);
    }
    if (fold->parsed()) {
      fold_args.checkpoint = strip_checkpoint_suffix(fold_args.checkpoint);
      std::string dir =
          fold_out.empty()
              ? std::filesystem::path(fold_args.checkpoint).parent_path().string()
              : fold_out;
      if (dir.empty()) dir = ".";
      fold_args.out_stem = dir + "/folded";
      return cmd_fold(fold_args, std::cout);
    }
    std::cerr << "no subcommand selected\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FoldError& e) {
    std::cerr << "fold error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
