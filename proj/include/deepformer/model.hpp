#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepformer/config.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/rng.hpp"
#include "deepformer/tape.hpp"
#include "deepformer/tensor.hpp"

namespace deepformer {

// optional forward-pass instrumentation: branch outputs feed ADMIN profiling,
// attention captures feed the mask/normalization tests
template <typename T>
struct Probe {
  bool capture_branches = false;
  bool capture_attention = false;
  std::vector<Tensor<T>> branch_outputs;
  std::vector<Tensor<T>> attention_weights;
  size_t branch_calls = 0;
};

// additive mask with -inf at forbidden keys; pad keys are never attendable
template <typename T>
Tensor<T> src_key_mask(const std::vector<int32_t>& ids, size_t batch, size_t len) {
  const T ninf = -std::numeric_limits<T>::infinity();
  Tensor<T> m({batch, 1, 1, len});
  for (size_t b = 0; b < batch; ++b) {
    size_t allowed = 0;
    for (size_t t = 0; t < len; ++t) {
      if (ids[b * len + t] == kPadId) {
        m[b * len + t] = ninf;
      } else {
        ++allowed;
      }
    }
    if (allowed == 0) {
      throw ContractError("sentence " + std::to_string(b) +
                          " has no attendable source positions");
    }
  }
  return m;
}

// causal plus key-padding mask for decoder self-attention
template <typename T>
Tensor<T> tgt_self_mask(const std::vector<int32_t>& ids, size_t batch, size_t len) {
  const T ninf = -std::numeric_limits<T>::infinity();
  Tensor<T> m({batch, 1, len, len});
  for (size_t b = 0; b < batch; ++b)
    for (size_t q = 0; q < len; ++q) {
      size_t allowed = 0;
      for (size_t k = 0; k < len; ++k) {
        bool ok = k <= q && ids[b * len + k] != kPadId;
        if (ok) ++allowed;
        m[(b * len + q) * len + k] = ok ? T(0) : ninf;
      }
      if (allowed == 0) {
        throw ContractError("decoder row " + std::to_string(q) + " of sentence " +
                            std::to_string(b) + " has no attendable positions");
      }
    }
  return m;
}

// boolean [lq, lk] mask (true = attend allowed) to additive form
template <typename T>
Tensor<T> additive_attention_mask(const std::vector<uint8_t>& allowed, size_t lq,
                                  size_t lk) {
  if (allowed.size() != lq * lk) throw ShapeError("mask extent mismatch");
  const T ninf = -std::numeric_limits<T>::infinity();
  Tensor<T> m({1, 1, lq, lk});
  for (size_t q = 0; q < lq; ++q) {
    size_t n = 0;
    for (size_t k = 0; k < lk; ++k) {
      if (allowed[q * lk + k]) ++n;
      m[q * lk + k] = allowed[q * lk + k] ? T(0) : ninf;
    }
    if (n == 0) {
      throw ContractError("mask row " + std::to_string(q) + " allows no positions");
    }
  }
  return m;
}

enum class ParamKind { weight, bias, ln_gain, ln_bias, embedding };

template <typename T>
class Transformer {
 public:
  // no key bias: softmax shifts per-query scores uniformly, so a key bias
  // cannot affect the output and its gradient is identically zero
  struct AttnParams {
    Parameter<T>*wq, *bq, *wk, *wv, *bv, *wo, *bo;
  };
  struct FFParams {
    Parameter<T>*w1, *b1, *w2, *b2;
  };
  struct LnParams {
    Parameter<T>*g, *b;
  };
  struct EncLayer {
    AttnParams attn;
    LnParams ln1;
    FFParams ff;
    LnParams ln2;
  };
  struct DecLayer {
    AttnParams self_attn;
    LnParams ln1;
    AttnParams cross;
    LnParams ln2;
    FFParams ff;
    LnParams ln3;
  };

  explicit Transformer(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    size_t d = cfg_.d_model, f = cfg_.d_ff;
    src_emb_ = add_param("src_emb", {cfg_.src_vocab, d}, ParamKind::embedding);
    tgt_emb_ = add_param("tgt_emb", {cfg_.tgt_vocab, d}, ParamKind::embedding);
    for (size_t i = 0; i < cfg_.n_enc_layers; ++i) {
      std::string p = "enc." + std::to_string(i) + ".";
      EncLayer l;
      l.attn = add_attn(p + "attn.");
      l.ln1 = add_ln(p + "ln1.");
      l.ff = {add_param(p + "ff.w1", {d, f}, ParamKind::weight),
              add_param(p + "ff.b1", {f}, ParamKind::bias),
              add_param(p + "ff.w2", {f, d}, ParamKind::weight),
              add_param(p + "ff.b2", {d}, ParamKind::bias)};
      l.ln2 = add_ln(p + "ln2.");
      enc_.push_back(l);
      branch_out_.push_back({l.attn.wo, l.attn.bo});
      branch_out_.push_back({l.ff.w2, l.ff.b2});
    }
    for (size_t i = 0; i < cfg_.n_dec_layers; ++i) {
      std::string p = "dec." + std::to_string(i) + ".";
      DecLayer l;
      l.self_attn = add_attn(p + "self.");
      l.ln1 = add_ln(p + "ln1.");
      l.cross = add_attn(p + "cross.");
      l.ln2 = add_ln(p + "ln2.");
      l.ff = {add_param(p + "ff.w1", {d, f}, ParamKind::weight),
              add_param(p + "ff.b1", {f}, ParamKind::bias),
              add_param(p + "ff.w2", {f, d}, ParamKind::weight),
              add_param(p + "ff.b2", {d}, ParamKind::bias)};
      l.ln3 = add_ln(p + "ln3.");
      dec_.push_back(l);
      branch_out_.push_back({l.self_attn.wo, l.self_attn.bo});
      branch_out_.push_back({l.cross.wo, l.cross.bo});
      branch_out_.push_back({l.ff.w2, l.ff.b2});
    }
    out_w_ = add_param("out.w", {d, cfg_.tgt_vocab}, ParamKind::weight);
    out_b_ = add_param("out.b", {cfg_.tgt_vocab}, ParamKind::bias);
    omegas_.assign(cfg_.n_branches(), 1.0);
    ln_eps_.assign(cfg_.n_branches(), cfg_.ln_eps);
    build_positions();
  }

  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  Parameter<T>& param(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw IndexError("no parameter named " + name);
    return *params_[it->second];
  }

  ParamKind kind_of(size_t param_index) const { return kinds_[param_index]; }

  size_t param_count() const {
    size_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
  }

  // Xavier-uniform linear maps, zero biases, unit LN gains, and
  // N(0, d_model^{-1/2})-variance embeddings
  void init_default(uint64_t seed) {
    Rng rng(mix64(seed, 0x1417u));
    double emb_std = std::pow(static_cast<double>(cfg_.d_model), -0.25);
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      switch (kinds_[i]) {
        case ParamKind::weight: {
          double fan_in = static_cast<double>(p.value.shape[0]);
          double fan_out = static_cast<double>(p.value.shape[1]);
          double a = std::sqrt(6.0 / (fan_in + fan_out));
          for (size_t j = 0; j < p.value.numel(); ++j)
            p.value[j] = static_cast<T>(rng.next_uniform(-a, a));
          break;
        }
        case ParamKind::embedding:
          for (size_t j = 0; j < p.value.numel(); ++j)
            p.value[j] = static_cast<T>(rng.next_normal(0.0, emb_std));
          break;
        case ParamKind::ln_gain:
          std::fill(p.value.data.begin(), p.value.data.end(), T(1));
          break;
        case ParamKind::bias:
        case ParamKind::ln_bias:
          std::fill(p.value.data.begin(), p.value.data.end(), T(0));
          break;
      }
      p.zero_grad();
    }
  }

  const std::vector<double>& omegas() const { return omegas_; }

  void set_omegas(const std::vector<double>& om) {
    if (om.size() != cfg_.n_branches()) {
      throw ConfigError("expected " + std::to_string(cfg_.n_branches()) +
                        " omegas, got " + std::to_string(om.size()));
    }
    for (double o : om) {
      if (!(o > 0.0) || !std::isfinite(o)) {
        throw ConfigError("omegas must be positive and finite");
      }
    }
    omegas_ = om;
  }

  std::vector<double>& ln_eps_per_branch() { return ln_eps_; }
  const std::vector<double>& ln_eps_per_branch() const { return ln_eps_; }

  const Tensor<T>& positional_table() const { return pos_; }

  // ---- forward -------------------------------------------------------

  // multi-head attention sublayer over existing nodes; mask broadcasts onto
  // [B, H, Tq, Tk] scores
  NodeId attention(Tape<T>& t, NodeId q_in, NodeId kv_in, const AttnParams& p,
                   const Tensor<T>& mask, Probe<T>* probe = nullptr) {
    NodeId q = t.add_bias(t.matmul(q_in, t.leaf(*p.wq)), t.leaf(*p.bq));
    NodeId k = t.matmul(kv_in, t.leaf(*p.wk));
    NodeId v = t.add_bias(t.matmul(kv_in, t.leaf(*p.wv)), t.leaf(*p.bv));
    NodeId qh = t.split_heads(q, cfg_.n_heads);
    NodeId kh = t.split_heads(k, cfg_.n_heads);
    NodeId vh = t.split_heads(v, cfg_.n_heads);
    T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.d_head())));
    NodeId scores = t.add_broadcast_const(t.scale(t.matmul(qh, kh, true), s), mask);
    NodeId w = t.softmax_lastdim(scores);
    if (probe != nullptr && probe->capture_attention) {
      probe->attention_weights.push_back(t.value(w));
    }
    NodeId ctx = t.merge_heads(t.matmul(w, vh));
    return t.add_bias(t.matmul(ctx, t.leaf(*p.wo)), t.leaf(*p.bo));
  }

  NodeId feed_forward(Tape<T>& t, NodeId x, const FFParams& p) {
    NodeId h = t.relu(t.add_bias(t.matmul(x, t.leaf(*p.w1)), t.leaf(*p.b1)));
    return t.add_bias(t.matmul(h, t.leaf(*p.w2)), t.leaf(*p.b2));
  }

  // one residual block in the configured mode; branch_fn(node) -> node
  template <typename F>
  NodeId block(Tape<T>& t, NodeId x, size_t branch, const LnParams& ln, F&& branch_fn,
               bool train, uint64_t dseed, size_t* dsite, Probe<T>* probe) {
    double om = omegas_[branch];
    if (!(om > 0.0)) {
      throw ConfigError("omega for branch " + std::to_string(branch) +
                        " must be positive");
    }
    double eps = ln_eps_[branch];
    double rate = train ? cfg_.dropout : 0.0;
    NodeId y;
    if (cfg_.block_mode == BlockMode::preln) {
      NodeId fx = branch_fn(t.layer_norm(x, t.leaf(*ln.g), t.leaf(*ln.b), eps));
      fx = t.dropout(fx, rate, mix64(dseed, (*dsite)++));
      note_branch(t, fx, probe);
      y = t.add(x, fx);
    } else {
      NodeId fx = branch_fn(x);
      fx = t.dropout(fx, rate, mix64(dseed, (*dsite)++));
      note_branch(t, fx, probe);
      NodeId skip = x;
      if (cfg_.block_mode == BlockMode::admin) {
        skip = t.mul_lastdim(x, Tensor<T>::full({cfg_.d_model}, static_cast<T>(om)));
      }
      y = t.layer_norm(t.add(skip, fx), t.leaf(*ln.g), t.leaf(*ln.b), eps);
    }
    return y;
  }

  NodeId encode(Tape<T>& t, const std::vector<int32_t>& src, size_t batch, size_t len,
                const Tensor<T>& src_mask, bool train, uint64_t dseed,
                Probe<T>* probe = nullptr) {
    size_t dsite = 0;
    NodeId x = embed_side(t, *src_emb_, src, batch, len, train, mix64(dseed, 1), &dsite);
    for (size_t i = 0; i < cfg_.n_enc_layers; ++i) {
      const EncLayer& l = enc_[i];
      size_t b0 = 2 * i;
      x = block(t, x, b0, l.ln1,
                [&](NodeId in) { return attention(t, in, in, l.attn, src_mask, probe); },
                train, mix64(dseed, 2 + i), &dsite, probe);
      x = block(t, x, b0 + 1, l.ln2,
                [&](NodeId in) { return feed_forward(t, in, l.ff); }, train,
                mix64(dseed, 1000 + i), &dsite, probe);
    }
    return x;
  }

  // decoder stack over a previously encoded source; returns vocabulary logits
  NodeId decode(Tape<T>& t, NodeId enc_out, const std::vector<int32_t>& tgt_in,
                size_t batch, size_t len, const Tensor<T>& tgt_mask,
                const Tensor<T>& cross_mask, bool train, uint64_t dseed,
                Probe<T>* probe = nullptr) {
    size_t dsite = 1u << 20;  // separate dropout sites from the encoder's
    NodeId x = embed_side(t, *tgt_emb_, tgt_in, batch, len, train, mix64(dseed, 3), &dsite);
    size_t base = 2 * cfg_.n_enc_layers;
    for (size_t i = 0; i < cfg_.n_dec_layers; ++i) {
      const DecLayer& l = dec_[i];
      size_t b0 = base + 3 * i;
      x = block(t, x, b0, l.ln1,
                [&](NodeId in) { return attention(t, in, in, l.self_attn, tgt_mask, probe); },
                train, mix64(dseed, 2000 + i), &dsite, probe);
      x = block(t, x, b0 + 1, l.ln2,
                [&](NodeId in) { return attention(t, in, enc_out, l.cross, cross_mask, probe); },
                train, mix64(dseed, 3000 + i), &dsite, probe);
      x = block(t, x, b0 + 2, l.ln3,
                [&](NodeId in) { return feed_forward(t, in, l.ff); }, train,
                mix64(dseed, 4000 + i), &dsite, probe);
    }
    return t.add_bias(t.matmul(x, t.leaf(*out_w_)), t.leaf(*out_b_));
  }

  // full pass from padded id matrices to logits [batch, tgt_len, V]
  NodeId forward_logits(Tape<T>& t, const std::vector<int32_t>& src, size_t src_len,
                        const std::vector<int32_t>& tgt_in, size_t tgt_len,
                        size_t batch, bool train, uint64_t dseed,
                        Probe<T>* probe = nullptr) {
    Tensor<T> smask = src_key_mask<T>(src, batch, src_len);
    Tensor<T> tmask = tgt_self_mask<T>(tgt_in, batch, tgt_len);
    NodeId enc_out = encode(t, src, batch, src_len, smask, train, dseed, probe);
    return decode(t, enc_out, tgt_in, batch, tgt_len, tmask, smask, train, dseed, probe);
  }

  // batched greedy decoding; sentences are content tokens without specials,
  // the returned hypotheses likewise
  std::vector<std::vector<int32_t>> greedy_decode(
      const std::vector<std::vector<int32_t>>& sentences, size_t max_new,
      size_t group_size = 64) {
    if (max_new < 1) throw ConfigError("greedy_decode needs max_new >= 1");
    if (group_size < 1) throw ConfigError("greedy_decode needs group_size >= 1");
    std::vector<std::vector<int32_t>> out(sentences.size());
    for (size_t start = 0; start < sentences.size(); start += group_size) {
      size_t n = std::min(group_size, sentences.size() - start);
      decode_group(sentences, start, n, max_new, out);
    }
    return out;
  }

  // divide each branch's output projection by omega and absorb the scale
  // change into that block's normalization epsilon, then drop back to the
  // plain post-LN formulation
  void fold_omegas() {
    if (cfg_.block_mode != BlockMode::admin) {
      throw FoldError("folding requires an admin-mode model");
    }
    for (size_t i = 0; i < omegas_.size(); ++i) {
      double om = omegas_[i];
      if (!(om > 0.0)) throw FoldError("non-positive omega at branch " + std::to_string(i));
      Parameter<T>* w = branch_out_[i].first;
      Parameter<T>* b = branch_out_[i].second;
      for (size_t j = 0; j < w->value.numel(); ++j)
        w->value[j] = static_cast<T>(static_cast<double>(w->value[j]) / om);
      for (size_t j = 0; j < b->value.numel(); ++j)
        b->value[j] = static_cast<T>(static_cast<double>(b->value[j]) / om);
      ln_eps_[i] /= om * om;
    }
    omegas_.assign(omegas_.size(), 1.0);
    cfg_.block_mode = BlockMode::postln;
  }

  std::unique_ptr<Transformer> clone() const {
    auto copy = std::make_unique<Transformer>(cfg_);
    for (size_t i = 0; i < params_.size(); ++i)
      copy->params_[i]->value = params_[i]->value;
    copy->omegas_ = omegas_;
    copy->ln_eps_ = ln_eps_;
    return copy;
  }

 private:
  Parameter<T>* add_param(const std::string& name, Shape shape, ParamKind kind) {
    params_.push_back(std::make_unique<Parameter<T>>(name, Tensor<T>(std::move(shape))));
    kinds_.push_back(kind);
    by_name_[name] = params_.size() - 1;
    return params_.back().get();
  }

  AttnParams add_attn(const std::string& p) {
    size_t d = cfg_.d_model;
    return {add_param(p + "wq", {d, d}, ParamKind::weight),
            add_param(p + "bq", {d}, ParamKind::bias),
            add_param(p + "wk", {d, d}, ParamKind::weight),
            add_param(p + "wv", {d, d}, ParamKind::weight),
            add_param(p + "bv", {d}, ParamKind::bias),
            add_param(p + "wo", {d, d}, ParamKind::weight),
            add_param(p + "bo", {d}, ParamKind::bias)};
  }

  LnParams add_ln(const std::string& p) {
    return {add_param(p + "g", {cfg_.d_model}, ParamKind::ln_gain),
            add_param(p + "b", {cfg_.d_model}, ParamKind::ln_bias)};
  }

  void build_positions() {
    size_t d = cfg_.d_model;
    pos_ = Tensor<T>({cfg_.max_len, d});
    for (size_t t = 0; t < cfg_.max_len; ++t) {
      for (size_t k = 0; 2 * k < d; ++k) {
        double rate = std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                            static_cast<double>(d));
        pos_[t * d + 2 * k] = static_cast<T>(std::sin(static_cast<double>(t) * rate));
        pos_[t * d + 2 * k + 1] = static_cast<T>(std::cos(static_cast<double>(t) * rate));
      }
    }
  }

  NodeId embed_side(Tape<T>& t, Parameter<T>& table, const std::vector<int32_t>& ids,
                    size_t batch, size_t len, bool train, uint64_t dseed,
                    size_t* dsite) {
    if (len > cfg_.max_len) {
      throw ConfigError("sequence length " + std::to_string(len) +
                        " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    T s = static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model)));
    NodeId e = t.embed(t.leaf(table), ids, batch, len, s, &pos_);
    return t.dropout(e, train ? cfg_.dropout : 0.0, mix64(dseed, (*dsite)++));
  }

  void note_branch(Tape<T>& t, NodeId fx, Probe<T>* probe) {
    if (probe == nullptr) return;
    ++probe->branch_calls;
    if (probe->capture_branches) probe->branch_outputs.push_back(t.value(fx));
  }

  void decode_group(const std::vector<std::vector<int32_t>>& sentences, size_t start,
                    size_t n, size_t max_new, std::vector<std::vector<int32_t>>& out) {
    size_t src_len = 0;
    for (size_t i = 0; i < n; ++i)
      src_len = std::max(src_len, sentences[start + i].size() + 1);
    std::vector<int32_t> src(n * src_len, kPadId);
    for (size_t i = 0; i < n; ++i) {
      const auto& s = sentences[start + i];
      for (size_t j = 0; j < s.size(); ++j) src[i * src_len + j] = s[j];
      src[i * src_len + s.size()] = kEosId;
    }
    Tensor<T> smask = src_key_mask<T>(src, n, src_len);
    Tensor<T> enc_val;
    {
      Tape<T> t(false);
      NodeId enc_out = encode(t, src, n, src_len, smask, false, 0, nullptr);
      enc_val = t.value(enc_out);
    }
    std::vector<std::vector<int32_t>> emitted(n);
    std::vector<bool> done(n, false);
    for (size_t step = 0; step < max_new; ++step) {
      size_t tlen = step + 1;
      std::vector<int32_t> tgt_in(n * tlen, kPadId);
      for (size_t i = 0; i < n; ++i) {
        tgt_in[i * tlen] = kBosId;
        for (size_t j = 0; j < emitted[i].size(); ++j)
          tgt_in[i * tlen + 1 + j] = emitted[i][j];
      }
      Tape<T> t(false);
      NodeId enc_out = t.constant(enc_val);
      Tensor<T> tmask = tgt_self_mask<T>(tgt_in, n, tlen);
      NodeId logits = decode(t, enc_out, tgt_in, n, tlen, tmask, smask, false, 0, nullptr);
      const Tensor<T>& lv = t.value(logits);
      size_t v = cfg_.tgt_vocab;
      bool all_done = true;
      for (size_t i = 0; i < n; ++i) {
        if (done[i]) continue;
        const T* row = lv.data.data() + (i * tlen + tlen - 1) * v;
        size_t arg = 0;
        for (size_t j = 1; j < v; ++j)
          if (row[j] > row[arg]) arg = j;
        int32_t tok = static_cast<int32_t>(arg);
        if (tok == kEosId) {
          done[i] = true;
        } else {
          emitted[i].push_back(tok);
          all_done = false;
        }
      }
      if (all_done) break;
    }
    for (size_t i = 0; i < n; ++i) out[start + i] = std::move(emitted[i]);
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<ParamKind> kinds_;
  std::unordered_map<std::string, size_t> by_name_;
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Parameter<T>*src_emb_, *tgt_emb_, *out_w_, *out_b_;
  std::vector<std::pair<Parameter<T>*, Parameter<T>*>> branch_out_;
  std::vector<double> omegas_;
  std::vector<double> ln_eps_;
  Tensor<T> pos_;
};

}  // namespace deepformer
