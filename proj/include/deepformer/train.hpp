#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "deepformer/corpus.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/model.hpp"
#include "deepformer/optim.hpp"

namespace deepformer {

struct StepRecord {
  size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool nan_flag = false;
};

struct EpochRecord {
  size_t epoch = 0;
  double train_ppl = 0.0;
  double dev_ppl = 0.0;
};

// shortest text that parses back to the same double
inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct TrainRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  bool diverged = false;
  std::string reason;

  double best_dev_ppl() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : epochs) {
      if (std::isfinite(e.dev_ppl)) best = std::min(best, e.dev_ppl);
    }
    return best;
  }

  double final_dev_ppl() const {
    return epochs.empty() ? std::numeric_limits<double>::infinity()
                          : epochs.back().dev_ppl;
  }

  void steps_csv(std::ostream& os) const {
    os << "step,lr,loss,grad_norm,nan_flag\n";
    for (const auto& r : steps) {
      os << r.step << ',' << fmt_double(r.lr) << ',' << fmt_double(r.loss) << ','
         << fmt_double(r.grad_norm) << ',' << (r.nan_flag ? 1 : 0) << '\n';
    }
  }

  void epochs_csv(std::ostream& os) const {
    os << "epoch,train_ppl,dev_ppl\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << fmt_double(e.train_ppl) << ','
         << fmt_double(e.dev_ppl) << '\n';
    }
  }
};

// NaN/Inf anywhere, or loss stuck above 10x its running minimum, is divergence
class DivergenceDetector {
 public:
  explicit DivergenceDetector(double factor = 10.0, size_t window = 200)
      : factor_(factor), window_(window) {
    if (!(factor > 1.0)) throw ConfigError("explosion factor must exceed 1");
    if (window < 1) throw ConfigError("explosion window must be at least 1");
  }

  // empty string while healthy, otherwise the trigger name
  std::string observe(double loss, double grad_norm) {
    if (!std::isfinite(loss)) return "nan-loss";
    if (!std::isfinite(grad_norm)) return "nan-grad";
    min_loss_ = std::min(min_loss_, loss);
    if (loss > factor_ * min_loss_) {
      if (++consecutive_ >= window_) return "loss-explosion";
    } else {
      consecutive_ = 0;
    }
    return "";
  }

 private:
  double factor_;
  size_t window_;
  double min_loss_ = std::numeric_limits<double>::infinity();
  size_t consecutive_ = 0;
};

inline std::pair<bool, std::string> detect_divergence(
    const std::vector<StepRecord>& window, double factor = 10.0,
    size_t explode_steps = 200) {
  if (window.empty()) throw ContractError("divergence check needs at least one step");
  DivergenceDetector det(factor, explode_steps);
  for (const auto& r : window) {
    std::string why = det.observe(r.loss, r.grad_norm);
    if (!why.empty()) return {true, why};
  }
  return {false, ""};
}

struct EvalResult {
  double ppl = 0.0;
  double token_acc = 0.0;
  size_t tokens = 0;
};

// teacher-forced perplexity and token accuracy; dropout off, no smoothing
template <typename T>
EvalResult evaluate(Transformer<T>& model, const ParallelCorpus& corpus,
                    size_t token_budget = 1024) {
  if (corpus.size() == 0) throw DataError("cannot evaluate an empty corpus");
  double nll = 0.0;
  size_t tokens = 0, hits = 0;
  for (const Batch& b : make_batches(corpus, token_budget, 0)) {
    Tape<T> tape(false);
    NodeId lg = model.forward_logits(tape, b.src, b.src_len, b.tgt_in, b.tgt_len,
                                     b.n, false, 0);
    auto stats = tape.cross_entropy_ls_sum(lg, b.labels, 0.0, kPadId);
    nll += stats.nll_sum;
    tokens += stats.tokens;
    hits += stats.argmax_hits;
  }
  EvalResult r;
  r.tokens = tokens;
  r.ppl = std::exp(nll / static_cast<double>(tokens));
  r.token_acc = static_cast<double>(hits) / static_cast<double>(tokens);
  return r;
}

template <typename T>
double evaluate_perplexity(Transformer<T>& model, const ParallelCorpus& corpus,
                           size_t token_budget = 1024) {
  return evaluate(model, corpus, token_budget).ppl;
}

// greedy-decode every source and count exact target matches
template <typename T>
double seq_exact_rate(Transformer<T>& model, const ParallelCorpus& corpus,
                      size_t extra_len = 4) {
  if (corpus.size() == 0) throw DataError("cannot evaluate an empty corpus");
  size_t max_tgt = 0;
  for (const auto& t : corpus.tgt) max_tgt = std::max(max_tgt, t.size());
  auto hyp = model.greedy_decode(corpus.src, max_tgt + extra_len);
  size_t exact = 0;
  for (size_t i = 0; i < hyp.size(); ++i) exact += hyp[i] == corpus.tgt[i];
  return static_cast<double>(exact) / static_cast<double>(hyp.size());
}

struct TrainOptions {
  Schedule schedule;
  size_t epochs = 1;
  uint64_t seed = 0;
  size_t token_budget = 1024;
  size_t accum_steps = 1;
  double clip_norm = 0.0;  // 0 disables clipping
  double explode_factor = 10.0;
  size_t explode_steps = 200;

  void validate() const {
    schedule.validate();
    if (token_budget < 8) throw ConfigError("token budget too small");
    if (accum_steps < 1) throw ConfigError("accum_steps must be at least 1");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  }
};

template <typename T>
double global_grad_norm(const std::vector<Parameter<T>*>& params) {
  double acc = 0.0;
  for (const auto* p : params) {
    for (T g : p->grad.data) {
      double gd = static_cast<double>(g);
      acc += gd * gd;
    }
  }
  return std::sqrt(acc);
}

// one optimizer step per accum_steps micro-batches; updates the model in
// place and stops early (partial model, flagged record) on divergence
template <typename T>
TrainRecord train_loop(Transformer<T>& model, const ParallelCorpus& train,
                       const ParallelCorpus& dev, const TrainOptions& opt) {
  opt.validate();
  if (opt.epochs > 0 && train.size() == 0) {
    throw DataError("cannot train on an empty corpus");
  }
  TrainRecord record;
  auto params = model.parameters();
  RAdam<T> optimizer(params);
  DivergenceDetector detector(opt.explode_factor, opt.explode_steps);
  double eps_ls = model.config().label_smoothing;
  size_t step = 0;
  uint64_t forwards = 0;

  for (size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    auto batches = make_batches(train, opt.token_budget, mix64(opt.seed, epoch));
    double ep_nll = 0.0;
    size_t ep_tokens = 0;
    for (size_t i = 0; i < batches.size(); i += opt.accum_steps) {
      zero_grads(params);
      double loss_sum = 0.0;
      size_t group_tokens = 0;
      size_t group_end = std::min(i + opt.accum_steps, batches.size());
      for (size_t k = i; k < group_end; ++k) {
        const Batch& b = batches[k];
        Tape<T> tape;
        NodeId lg = model.forward_logits(tape, b.src, b.src_len, b.tgt_in,
                                         b.tgt_len, b.n, true,
                                         mix64(opt.seed, 0x64726f70u, forwards++));
        auto stats = tape.cross_entropy_ls_sum(lg, b.labels, eps_ls, kPadId);
        tape.backward(stats.sum_node);
        loss_sum += static_cast<double>(tape.value(stats.sum_node).data[0]);
        group_tokens += stats.tokens;
        ep_nll += stats.nll_sum;
        ep_tokens += stats.tokens;
      }
      T inv = static_cast<T>(1.0 / static_cast<double>(group_tokens));
      for (auto* p : params) {
        for (T& g : p->grad.data) g *= inv;
      }

      double loss = loss_sum / static_cast<double>(group_tokens);
      double gnorm = global_grad_norm(params);
      ++step;
      double lr = lr_at_step(step, opt.schedule);
      record.steps.push_back(
          {step, lr, loss, gnorm, !std::isfinite(loss) || !std::isfinite(gnorm)});

      std::string why = detector.observe(loss, gnorm);
      if (!why.empty()) {
        record.diverged = true;
        record.reason = why;
        return record;
      }
      if (opt.clip_norm > 0.0 && gnorm > opt.clip_norm) {
        T scale = static_cast<T>(opt.clip_norm / gnorm);
        for (auto* p : params) {
          for (T& g : p->grad.data) g *= scale;
        }
      }
      optimizer.step(lr);
    }
    double train_ppl = std::exp(ep_nll / static_cast<double>(ep_tokens));
    double dev_ppl = evaluate_perplexity(model, dev, opt.token_budget);
    record.epochs.push_back({epoch, train_ppl, dev_ppl});
  }
  return record;
}

}  // namespace deepformer
