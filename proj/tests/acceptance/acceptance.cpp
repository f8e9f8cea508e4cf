// Acceptance gate: runs every shipped claim end to end and prints exactly
// one PASS/FAIL line per criterion. Returns the number of failures.
//
//   acceptance [--config path] [--out dir] [--only 1,4,7]
//
// The config defaults to the shipped acceptance configuration; --only
// restricts the run while developing. Artifacts (per-seed results, sweep
// tables) land under --out.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/checkpoint.hpp"
#include "deepformer/cli.hpp"
#include "deepformer/gradcheck.hpp"
#include "deepformer/runconfig.hpp"

using namespace deepformer;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(double x, int prec = 3) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << x;
  return ss.str();
}

std::string fmt_sci(double x) {
  std::ostringstream ss;
  ss << std::scientific << std::setprecision(2) << x;
  return ss.str();
}

struct Gate {
  RunConfig shipped;
  std::string out_dir;
  std::optional<TaskData> data_;
  // criterion 2 caches the admin seed-0 curves so criterion 10 can compare
  // a fresh rerun against them
  std::string admin_seed0_steps, admin_seed0_epochs;

  const TaskData& data() {
    if (!data_) data_ = gen_task(shipped.task, shipped.data_seed);
    return *data_;
  }

  ModelConfig desk(size_t n_enc, size_t n_dec, BlockMode mode) const {
    ModelConfig mc = shipped.model;
    mc.n_enc_layers = n_enc;
    mc.n_dec_layers = n_dec;
    mc.block_mode = mode;
    mc.src_vocab = shipped.task.vocab_size;
    mc.tgt_vocab = shipped.task.vocab_size;
    return mc;
  }
};

// ---------------------------------------------------------------- criterion 1

bool criterion1(Gate& g, std::string& note) {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = g.desk(2, 2, BlockMode::postln);
  Transformer<double> model(mc);
  model.init_default(0);

  const TaskData& data = g.data();
  ParallelCorpus two;
  two.src = {data.test.src.at(0), data.test.src.at(1)};
  two.tgt = {data.test.tgt.at(0), data.test.tgt.at(1)};
  Batch b = make_batches(two, 4096, 0).at(0);

  auto params = model.parameters();
  zero_grads(params);
  {
    Tape<double> tape;
    NodeId lg = model.forward_logits(tape, b.src, b.src_len, b.tgt_in,
                                     b.tgt_len, b.n, false, 0);
    auto st = tape.cross_entropy_ls_sum(lg, b.labels, 0.1, kPadId);
    tape.backward(st.sum_node);
  }
  auto loss_fn = [&]() {
    Tape<double> tape(false);
    NodeId lg = model.forward_logits(tape, b.src, b.src_len, b.tgt_in,
                                     b.tgt_len, b.n, false, 0);
    auto st = tape.cross_entropy_ls_sum(lg, b.labels, 0.1, kPadId);
    return static_cast<double>(tape.value(st.sum_node)[0]);
  };
  GradCheckReport rep = grad_check(params, loss_fn, 1e-5);
  double secs = seconds_since(t0);

  note = "max rel err " + fmt_sci(rep.max_rel_err) + " over " +
         std::to_string(rep.elements_checked) + " elements (worst " +
         rep.worst_param + "), " + fmt(secs, 3) + "s";
  return rep.max_rel_err < 1e-5 && secs < 120.0;
}

// ---------------------------------------------------------------- criterion 2

struct CellResult {
  bool diverged = false;
  std::string reason;
  size_t steps = 0;
  double final_dev = 0.0, best_dev = 0.0, seq = 0.0;
};

CellResult run_cell(Gate& g, const std::string& init_mode, uint64_t seed,
                    std::string* steps_csv = nullptr,
                    std::string* epochs_csv = nullptr) {
  RunConfig cfg = g.shipped;
  cfg.init_mode = init_mode;
  cfg.resolve();
  const TaskData& data = g.data();

  Transformer<float> model(cfg.model);
  model.init_default(seed);
  if (init_mode == "admin") {
    apply_profile(model, cli_detail::profile_on_train_split(model, data.train));
  }
  TrainOptions opt = cfg.train;
  opt.seed = seed;
  TrainRecord rec = train_loop(model, data.train, data.dev, opt);

  CellResult r;
  r.diverged = rec.diverged;
  r.reason = rec.reason;
  r.steps = rec.steps.size();
  r.final_dev = rec.final_dev_ppl();
  r.best_dev = rec.best_dev_ppl();
  r.seq = rec.diverged ? 0.0 : seq_exact_rate(model, data.test);
  if (steps_csv) {
    std::ostringstream ss;
    rec.steps_csv(ss);
    *steps_csv = ss.str();
  }
  if (epochs_csv) {
    std::ostringstream ss;
    rec.epochs_csv(ss);
    *epochs_csv = ss.str();
  }
  return r;
}

bool criterion2(Gate& g, std::string& note) {
  auto t0 = std::chrono::steady_clock::now();
  std::ofstream log(g.out_dir + "/c2_results.txt");
  std::vector<CellResult> dflt, admin;

  for (uint64_t seed : g.shipped.seeds) {
    CellResult r = run_cell(g, "default", seed);
    dflt.push_back(r);
    log << "default seed=" << seed << " diverged=" << r.diverged << " reason="
        << (r.reason.empty() ? "-" : r.reason) << " steps=" << r.steps
        << " best_dev=" << fmt_double(r.best_dev) << " final_dev="
        << fmt_double(r.final_dev) << " seq=" << fmt_double(r.seq) << "\n";
  }
  for (uint64_t seed : g.shipped.seeds) {
    bool cache = seed == g.shipped.seeds.at(0);
    CellResult r = run_cell(g, "admin", seed,
                            cache ? &g.admin_seed0_steps : nullptr,
                            cache ? &g.admin_seed0_epochs : nullptr);
    admin.push_back(r);
    log << "admin seed=" << seed << " diverged=" << r.diverged << " reason="
        << (r.reason.empty() ? "-" : r.reason) << " steps=" << r.steps
        << " best_dev=" << fmt_double(r.best_dev) << " final_dev="
        << fmt_double(r.final_dev) << " seq=" << fmt_double(r.seq) << "\n";
  }
  double secs = seconds_since(t0);

  size_t n = g.shipped.seeds.size();
  size_t dflt_div = 0, admin_div = 0, seq_ok = 0, ppl_ok = 0;
  double min_seq = 1.0;
  for (size_t i = 0; i < n; ++i) {
    dflt_div += dflt[i].diverged;
    admin_div += admin[i].diverged;
    seq_ok += admin[i].seq >= 0.95;
    min_seq = std::min(min_seq, admin[i].seq);
    ppl_ok += admin[i].final_dev <= dflt[i].best_dev;
  }
  bool a = dflt_div >= (3 * n + 4) / 5;  // >= 3 of 5, scaled to the seed count
  bool b = admin_div == 0 && seq_ok == n;
  bool c = ppl_ok == n;
  log << "clauses: default_fires=" << dflt_div << "/" << n << " (need >=3) "
      << (a ? "ok" : "FAIL") << "; admin_clean+seq>=0.95 "
      << (b ? "ok" : "FAIL") << "; admin_final<=default_best " << ppl_ok << "/"
      << n << " " << (c ? "ok" : "FAIL") << "; runtime " << fmt(secs, 4)
      << "s\n";

  note = "default fires " + std::to_string(dflt_div) + "/" + std::to_string(n) +
         " (need >=3), admin diverges " + std::to_string(admin_div) +
         "/" + std::to_string(n) + ", min seq-exact " + fmt(min_seq, 4) +
         ", ppl dominance " + std::to_string(ppl_ok) + "/" + std::to_string(n) +
         ", " + fmt(secs / 60.0, 3) + " min at 1 thread";
  return a && b && c;
}

// ---------------------------------------------------------------- criterion 3

const std::vector<std::pair<size_t, size_t>> kDepthGrid = {
    {1, 1}, {6, 6}, {24, 6}, {48, 12}};

bool check_chain(const OmegaProfile& p, size_t lo, size_t hi, double tol,
                 std::string& why) {
  double running = 0.0;
  for (size_t i = lo; i < hi; ++i) {
    double om = p.omegas[i];
    if (!std::isfinite(om) || !std::isfinite(p.branch_variances[i])) {
      why = "non-finite at branch " + std::to_string(i);
      return false;
    }
    if (i == lo) {
      if (om != 1.0) {
        why = "omega_1 != 1 at branch " + std::to_string(i);
        return false;
      }
    } else {
      if (std::abs(om * om - running) > tol) {
        why = "omega^2 off by " + fmt_sci(std::abs(om * om - running)) +
              " at branch " + std::to_string(i);
        return false;
      }
      if (om < p.omegas[i - 1]) {
        why = "omegas decrease at branch " + std::to_string(i);
        return false;
      }
    }
    running += p.branch_variances[i];
  }
  return true;
}

bool criterion3(Gate& g, std::string& note) {
  const TaskData& data = g.data();
  double worst = 0.0;
  for (auto [ne, nd] : kDepthGrid) {
    Transformer<float> model(g.desk(ne, nd, BlockMode::admin));
    model.init_default(0);
    OmegaProfile p = cli_detail::profile_on_train_split(model, data.train);
    std::string why;
    if (!check_chain(p, 0, p.encoder_branches, 1e-9, why) ||
        !check_chain(p, p.encoder_branches, p.omegas.size(), 1e-9, why)) {
      note = std::to_string(ne) + "L-" + std::to_string(nd) + "L: " + why;
      return false;
    }
    worst = std::max(worst, p.omegas.back());
  }
  note = "1L-1L/6L-6L/24L-6L/48L-12L chains exact to 1e-9, omega_1=1, "
         "non-decreasing, finite (largest omega " + fmt(worst, 4) + ")";
  return true;
}

// ---------------------------------------------------------------- criterion 4

// profiling runs on whatever float width the model uses; rebuild the pinned
// profiling batch and measure directly
template <typename T>
OmegaProfile build_profile_on(Transformer<T>& model, const ParallelCorpus& train) {
  Batch b = make_batches(train, kProfileBudget, kProfileShuffleSeed).at(0);
  return build_profile(model, b.src, b.src_len, b.tgt_in, b.tgt_len, b.n);
}

template <typename T>
bool fold_arm(Gate& g, double tol, double& worst, std::string& why) {
  RunConfig cfg = g.shipped;
  cfg.model.n_enc_layers = 6;
  cfg.model.n_dec_layers = 3;
  cfg.init_mode = "admin";
  cfg.train.epochs = 2;
  cfg.resolve();
  const TaskData& data = g.data();

  Transformer<T> model(cfg.model);
  model.init_default(0);
  apply_profile(model, build_profile_on<T>(model, data.train));
  TrainOptions opt = cfg.train;
  opt.seed = 0;
  train_loop(model, data.train, data.dev, opt);

  auto folded = model.clone();
  folded->fold_omegas();

  worst = 0.0;
  for (uint64_t k = 0; k < 20; ++k) {
    Batch b = make_batches(data.test, 512, k).at(0);
    Tape<T> ta(false), tf(false);
    NodeId la = model.forward_logits(ta, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                     b.n, false, 0);
    NodeId lf = folded->forward_logits(tf, b.src, b.src_len, b.tgt_in,
                                       b.tgt_len, b.n, false, 0);
    const Tensor<T>& va = ta.value(la);
    const Tensor<T>& vf = tf.value(lf);
    for (size_t i = 0; i < va.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(va.data[i]) -
                                       static_cast<double>(vf.data[i])));
    }
  }
  if (worst > tol) {
    why = "logit deviation " + fmt_sci(worst) + " > " + fmt_sci(tol);
    return false;
  }

  ParallelCorpus probe;
  probe.src.assign(data.test.src.begin(), data.test.src.begin() + 50);
  probe.tgt.assign(data.test.tgt.begin(), data.test.tgt.begin() + 50);
  size_t max_tgt = 0;
  for (const auto& t : probe.tgt) max_tgt = std::max(max_tgt, t.size());
  if (model.greedy_decode(probe.src, max_tgt + 4) !=
      folded->greedy_decode(probe.src, max_tgt + 4)) {
    why = "greedy decodes differ on the 50-sentence probe";
    return false;
  }
  return true;
}

bool criterion4(Gate& g, std::string& note) {
  double w32 = 0.0, w64 = 0.0;
  std::string why;
  if (!fold_arm<float>(g, 1e-4, w32, why)) {
    note = "32-bit arm: " + why;
    return false;
  }
  if (!fold_arm<double>(g, 1e-10, w64, why)) {
    note = "64-bit arm: " + why;
    return false;
  }
  note = "max logit deviation " + fmt_sci(w64) + " (64-bit) / " + fmt_sci(w32) +
         " (32-bit) over 20 batches; 50-sentence decodes identical";
  return true;
}

// ---------------------------------------------------------------- criterion 5

bool criterion5(Gate& g, std::string& note) {
  const TaskData& data = g.data();
  for (auto [ne, nd] : kDepthGrid) {
    Transformer<float> admin(g.desk(ne, nd, BlockMode::admin));
    Transformer<float> postln(g.desk(ne, nd, BlockMode::postln));
    admin.init_default(0);
    postln.init_default(0);
    Batch b = make_batches(data.test, 256, 0).at(0);
    Tape<float> ta(false), tp(false);
    NodeId la = admin.forward_logits(ta, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                     b.n, false, 0);
    NodeId lp = postln.forward_logits(tp, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                      b.n, false, 0);
    if (ta.value(la).data != tp.value(lp).data) {
      note = std::to_string(ne) + "L-" + std::to_string(nd) +
             "L: admin at omega=1 is not bit-identical to post-LN";
      return false;
    }
  }
  note = "admin at omega=1 bit-identical to post-LN on all four depth configs";
  return true;
}

// ---------------------------------------------------------------- criterion 6

bool criterion6(Gate& g, std::string& note) {
  (void)g;
  std::ifstream f(std::string(DEEPFORMER_TEST_DATA_DIR) + "/bleu_fixture.json");
  if (!f) {
    note = "cannot read bleu_fixture.json";
    return false;
  }
  nlohmann::json j = nlohmann::json::parse(f);
  auto hyps = j.at("hypotheses").get<std::vector<std::string>>();
  auto refs = j.at("references").get<std::vector<std::string>>();
  double pinned = j.at("bleu").get<double>();

  double got = bleu_corpus(hyps, refs).corpus.bleu;
  double identity = bleu_corpus(refs, refs).corpus.bleu;
  double clipped =
      bleu_corpus({"the the the the"}, {"the cat"}).corpus.bleu;

  note = "fixture " + fmt(got, 6) + " vs pinned " + fmt(pinned, 6) +
         ", identity " + fmt(identity, 5) + ", clipped-the " + fmt(clipped, 3);
  return std::abs(got - pinned) <= 0.01 && identity == 100.0 && clipped == 0.0;
}

// ---------------------------------------------------------------- criterion 7

bool criterion7(Gate& g, std::string& note) {
  (void)g;
  Schedule paper{8000, 0.0007};
  double at_peak = lr_at_step(8000, paper);
  bool exact = at_peak == 0.0007;

  bool continuous = true;
  for (const Schedule& s : {paper, Schedule{60, 0.02}, Schedule{1, 0.1}}) {
    size_t w = s.warmup_steps;
    double peak = s.peak_lr;
    double before = w > 1 ? lr_at_step(w - 1, s) : 0.0;
    double at = lr_at_step(w, s);
    double after = lr_at_step(w + 1, s);
    // the ramp and decay branches must meet at the boundary: the one-step
    // jump on either side stays bounded by one warmup increment
    if (at != peak || before > at || after > at ||
        (w > 1 && (at - before) > peak / static_cast<double>(w) + 1e-15) ||
        (at - after) > peak * (1.0 - std::sqrt(static_cast<double>(w) /
                                               static_cast<double>(w + 1))) +
                           1e-15) {
      continuous = false;
    }
  }
  note = "lr_at_step(8000; warmup=8000, peak=0.0007) = " + fmt(at_peak, 10) +
         (exact ? " exactly" : " NOT exact") +
         (continuous ? ", branches continuous at the boundary"
                     : ", branch discontinuity detected");
  return exact && continuous;
}

// ---------------------------------------------------------------- criterion 8

bool criterion8(Gate& g, std::string& note) {
  (void)g;
  std::ifstream f(std::string(DEEPFORMER_TEST_DATA_DIR) +
                  "/bootstrap_fixture.json");
  if (!f) {
    note = "cannot read bootstrap_fixture.json";
    return false;
  }
  nlohmann::json j = nlohmann::json::parse(f);
  auto hyp_a = j.at("hyp_a").get<std::vector<std::string>>();
  auto hyp_b = j.at("hyp_b").get<std::vector<std::string>>();
  auto refs = j.at("references").get<std::vector<std::string>>();
  double oracle_p = j.at("oracle_p_value").get<double>();

  auto stats = [](const std::vector<std::string>& hyps,
                  const std::vector<std::string>& refs) {
    std::vector<SentenceBleuStats> out;
    for (size_t i = 0; i < hyps.size(); ++i) {
      out.push_back(
          sentence_bleu_stats(split_tokens(hyps[i]), split_tokens(refs[i])));
    }
    return out;
  };
  auto sa = stats(hyp_a, refs), sb = stats(hyp_b, refs);

  BootstrapResult same = paired_bootstrap(sa, sa, 1000, 0);
  bool identical_ok = same.p_value == 1.0 && same.win_rate == 0.0;

  // an everywhere-better system: A equals the references, B drops a word
  std::vector<std::string> perfect(refs.begin(), refs.begin() + 40);
  std::vector<std::string> worse;
  for (const auto& r : perfect) {
    auto toks = split_tokens(r);
    toks.pop_back();
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) s += (i ? " " : "") + toks[i];
    worse.push_back(s);
  }
  std::vector<std::string> ref40(refs.begin(), refs.begin() + 40);
  BootstrapResult better =
      paired_bootstrap(stats(perfect, ref40), stats(worse, ref40), 1000, 3);
  bool better_ok = better.p_value == 0.0 && better.win_rate == 1.0;

  BootstrapResult big = paired_bootstrap(sa, sb, 100000, 42);
  bool oracle_ok = std::abs(big.p_value - oracle_p) <= 0.02;

  BootstrapResult r1 = paired_bootstrap(sa, sb, 5000, 7);
  BootstrapResult r2 = paired_bootstrap(sa, sb, 5000, 7);
  bool det_ok = r1.p_value == r2.p_value && r1.win_rate == r2.win_rate;

  note = "identical p=" + fmt(same.p_value, 3) + ", everywhere-better p=" +
         fmt(better.p_value, 3) + ", fixture p=" + fmt(big.p_value, 5) +
         " vs oracle " + fmt(oracle_p, 5) + " (100k samples), deterministic " +
         (det_ok ? "yes" : "NO");
  return identical_ok && better_ok && oracle_ok && det_ok;
}

// ---------------------------------------------------------------- criterion 9

bool criterion9(Gate& g, std::string& note) {
  auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = g.shipped;
  cfg.seeds = {0, 1, 2};
  cfg.cells = {sweep_cell_from_string("8x2:admin"),
               sweep_cell_from_string("2x8:admin")};
  cfg.out_dir = g.out_dir + "/sweep";

  std::ostringstream table;
  int rc = cmd_sweep(cfg, table);
  std::ofstream(g.out_dir + "/c9_sweep.txt") << table.str();
  bool have_matrix = std::filesystem::exists(cfg.out_dir + "/matrix.csv");

  // surface the report itself, indented under the verdict line
  std::istringstream lines(table.str());
  std::string line;
  std::cout << "  | depth-direction sweep report (8x2 vs 2x8, 3 seeds)\n";
  while (std::getline(lines, line)) std::cout << "  |   " << line << "\n";

  note = "report emitted, matrix " + std::string(have_matrix ? "written" : "MISSING") +
         ", " + fmt(seconds_since(t0) / 60.0, 3) + " min";
  return rc == kExitOk && have_matrix;
}

// --------------------------------------------------------------- criterion 10

bool criterion10(Gate& g, std::string& note) {
  std::string steps_a = g.admin_seed0_steps, epochs_a = g.admin_seed0_epochs;
  bool reused = !steps_a.empty();
  if (!reused) {
    run_cell(g, "admin", g.shipped.seeds.at(0), &steps_a, &epochs_a);
  }
  std::string steps_b, epochs_b;
  run_cell(g, "admin", g.shipped.seeds.at(0), &steps_b, &epochs_b);

  bool same = steps_a == steps_b && epochs_a == epochs_b;
  note = std::string("admin seed-") + std::to_string(g.shipped.seeds.at(0)) +
         " rerun " + (reused ? "(vs criterion-2 record) " : "") +
         (same ? "byte-identical over " : "DIFFERS over ") +
         std::to_string(std::count(steps_a.begin(), steps_a.end(), '\n')) +
         " CSV lines";
  return same;
}

}  // namespace

int main(int argc, char** argv) {
  // deterministic mode for the whole gate: one worker, bitwise-reproducible
  setenv("DEEPFORMER_DETERMINISTIC", "1", 1);

  std::string config_path = DEEPFORMER_ACCEPT_CONFIG;
  std::string out_dir =
      (std::filesystem::temp_directory_path() / "deepformer-acceptance")
          .string();
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value after " << a << "\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--config") {
      config_path = next();
    } else if (a == "--out") {
      out_dir = next();
    } else if (a == "--only") {
      std::istringstream ss(next());
      std::string tok;
      while (std::getline(ss, tok, ',')) only.push_back(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance [--config path] [--out dir] [--only 1,2]\n";
      return 2;
    }
  }

  Gate g;
  try {
    g.shipped = load_run_config(config_path);
    g.shipped.resolve();
  } catch (const Error& e) {
    std::cerr << "cannot load acceptance config " << config_path << ": "
              << e.what() << "\n";
    return 2;
  }
  g.out_dir = out_dir;
  std::filesystem::create_directories(g.out_dir);

  struct Crit {
    int id;
    const char* label;
    std::function<bool(Gate&, std::string&)> fn;
  };
  const std::vector<Crit> crits = {
      {1, "gradient correctness", criterion1},
      {2, "stability A/B on the shipped config", criterion2},
      {3, "admin omega construction", criterion3},
      {4, "fold equivalence", criterion4},
      {5, "admin/post-LN equivalence at omega=1", criterion5},
      {6, "BLEU oracle", criterion6},
      {7, "schedule fidelity", criterion7},
      {8, "bootstrap sanity", criterion8},
      {9, "depth-direction diagnostic (report-only)", criterion9},
      {10, "training determinism", criterion10},
  };

  std::cout << "acceptance gate: config " << config_path << ", artifacts "
            << g.out_dir << "\n";
  int failures = 0;
  for (const Crit& c : crits) {
    if (!only.empty() &&
        std::find(only.begin(), only.end(), c.id) == only.end()) {
      continue;
    }
    std::string note;
    bool ok = false;
    try {
      ok = c.fn(g, note);
    } catch (const std::exception& e) {
      note = std::string("exception: ") + e.what();
    }
    std::cout << (ok ? "PASS" : "FAIL") << " criterion-" << c.id << ": "
              << c.label << " (" << note << ")" << std::endl;
    failures += !ok;
  }
  std::cout << (failures == 0 ? "acceptance: all selected criteria passed"
                              : "acceptance: " + std::to_string(failures) +
                                    " criterion(s) failed")
            << std::endl;
  return failures;
}
