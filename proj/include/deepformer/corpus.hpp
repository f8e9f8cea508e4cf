#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepformer/config.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/rng.hpp"

namespace deepformer {

class Vocab {
 public:
  static Vocab make(size_t size) {
    if (size < 8) throw ConfigError("vocab size must be at least 8");
    Vocab v;
    v.tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (size_t i = 4; i < size; ++i) v.tokens_.push_back("t" + std::to_string(i));
    v.index();
    return v;
  }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 8) throw DataError("vocab file has fewer than 8 tokens");
    const char* reserved[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (size_t i = 0; i < 4; ++i) {
      if (tokens[i] != reserved[i]) {
        throw DataError("vocab line " + std::to_string(i) + " must be " +
                        reserved[i] + ", got " + tokens[i]);
      }
    }
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.index();
    return v;
  }

  size_t size() const { return tokens_.size(); }

  int32_t id_of(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& token_of(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
  }

  std::vector<int32_t> encode(const std::string& line) const {
    std::vector<int32_t> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(id_of(tok));
    return out;
  }

  std::string decode(const std::vector<int32_t>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i > 0) out += ' ';
      out += token_of(ids[i]);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write vocab file " + path);
    for (const auto& t : tokens_) f << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read vocab file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

 private:
  void index() {
    ids_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<int32_t>(i)).second) {
        throw DataError("duplicate vocab token " + tokens_[i]);
      }
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> ids_;
};

enum class TaskKind { copy, reverse_substitute };

inline const char* task_kind_name(TaskKind k) {
  return k == TaskKind::copy ? "copy" : "reverse_substitute";
}

inline TaskKind task_kind_from_name(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse_substitute") return TaskKind::reverse_substitute;
  throw ConfigError("unknown task kind: " + s);
}

struct TaskSpec {
  TaskKind kind = TaskKind::reverse_substitute;
  size_t vocab_size = 64;
  size_t min_len = 5;
  size_t max_len = 24;
  uint64_t perm_seed = 0;
  size_t n_train = 20000;
  size_t n_dev = 1000;
  size_t n_test = 1000;

  void validate() const {
    if (vocab_size < 8) throw ConfigError("vocab size must be at least 8");
    if (min_len < 1) throw ConfigError("min sentence length must be at least 1");
    if (max_len < min_len) throw ConfigError("max length below min length");
    if (n_train == 0) throw ConfigError("empty train split");
  }
};

struct ParallelCorpus {
  std::vector<std::vector<int32_t>> src;
  std::vector<std::vector<int32_t>> tgt;
  size_t size() const { return src.size(); }
};

struct TaskData {
  ParallelCorpus train, dev, test;
  std::vector<int32_t> perm;  // content-token substitution, identity on ids 0-3
};

// substitution permutation over content ids, identity on reserved ids
inline std::vector<int32_t> substitution_perm(size_t vocab_size, uint64_t perm_seed) {
  std::vector<int32_t> perm(vocab_size);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix64(perm_seed, 0x7065726du));  // "perm"
  rng.shuffle(std::span<int32_t>(perm.data() + 4, vocab_size - 4));
  return perm;
}

inline std::vector<int32_t> apply_task(const std::vector<int32_t>& src, TaskKind kind,
                                       const std::vector<int32_t>& perm) {
  if (kind == TaskKind::copy) return src;
  std::vector<int32_t> tgt(src.size());
  for (size_t i = 0; i < src.size(); ++i) {
    int32_t s = src[src.size() - 1 - i];
    tgt[i] = perm[static_cast<size_t>(s)];
  }
  return tgt;
}

inline uint64_t sentence_hash(const std::vector<int32_t>& s) {
  uint64_t h = mix64(s.size());
  for (int32_t t : s) h = mix64(h, static_cast<uint64_t>(t));
  return h;
}

// deterministic corpus: candidate sentences are seeded per index, and each
// lands in the split its content hash selects, so identical sentences can
// never straddle splits
inline TaskData gen_task(const TaskSpec& spec, uint64_t seed) {
  spec.validate();
  TaskData data;
  data.perm = substitution_perm(spec.vocab_size, spec.perm_seed);

  size_t want[3] = {spec.n_train, spec.n_dev, spec.n_test};
  ParallelCorpus* splits[3] = {&data.train, &data.dev, &data.test};
  size_t filled = 0, total = want[0] + want[1] + want[2];
  for (uint64_t i = 0; filled < total; ++i) {
    if (i > 64 * static_cast<uint64_t>(total) + 4096) {
      throw DataError("split quotas unreachable; corpus sizes too skewed");
    }
    Rng rng(mix64(seed, i, 0x73656e74u));  // "sent"
    size_t len = spec.min_len + rng.next_below(spec.max_len - spec.min_len + 1);
    std::vector<int32_t> src(len);
    for (auto& t : src) {
      t = static_cast<int32_t>(4 + rng.next_below(spec.vocab_size - 4));
    }
    uint64_t h = sentence_hash(src) % 100;
    size_t which = h < 90 ? 0 : h < 95 ? 1 : 2;
    if (splits[which]->src.size() >= want[which]) continue;
    splits[which]->tgt.push_back(apply_task(src, spec.kind, data.perm));
    splits[which]->src.push_back(std::move(src));
    ++filled;
  }
  return data;
}

struct Batch {
  std::vector<int32_t> src;     // content + eos, padded
  std::vector<int32_t> tgt_in;  // bos + content, padded
  std::vector<int32_t> labels;  // content + eos, padded
  size_t n = 0;
  size_t src_len = 0;
  size_t tgt_len = 0;
  size_t token_cost = 0;  // sum over rows of max(src, tgt) length + 2
};

inline Batch build_batch(const ParallelCorpus& corpus, const std::vector<size_t>& idx) {
  Batch b;
  b.n = idx.size();
  size_t ms = 0, mt = 0;
  for (size_t i : idx) {
    ms = std::max(ms, corpus.src[i].size());
    mt = std::max(mt, corpus.tgt[i].size());
    b.token_cost += std::max(corpus.src[i].size(), corpus.tgt[i].size()) + 2;
  }
  b.src_len = ms + 1;
  b.tgt_len = mt + 1;
  b.src.assign(b.n * b.src_len, kPadId);
  b.tgt_in.assign(b.n * b.tgt_len, kPadId);
  b.labels.assign(b.n * b.tgt_len, kPadId);
  for (size_t r = 0; r < b.n; ++r) {
    const auto& s = corpus.src[idx[r]];
    const auto& t = corpus.tgt[idx[r]];
    for (size_t j = 0; j < s.size(); ++j) b.src[r * b.src_len + j] = s[j];
    b.src[r * b.src_len + s.size()] = kEosId;
    b.tgt_in[r * b.tgt_len] = kBosId;
    for (size_t j = 0; j < t.size(); ++j) {
      b.tgt_in[r * b.tgt_len + 1 + j] = t[j];
      b.labels[r * b.tgt_len + j] = t[j];
    }
    b.labels[r * b.tgt_len + t.size()] = kEosId;
  }
  return b;
}

// one epoch of batches: shuffle, stable-sort by length so similar lengths
// share a batch, pack greedily under the token budget, shuffle batch order
inline std::vector<Batch> make_batches(const ParallelCorpus& corpus, size_t budget,
                                       uint64_t seed) {
  if (corpus.size() == 0) throw DataError("cannot batch an empty corpus");
  if (corpus.src.size() != corpus.tgt.size()) {
    throw DataError("source and target sentence counts differ");
  }
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix64(seed, 0x62617463u));  // "batc"
  rng.shuffle(std::span<size_t>(order));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::max(corpus.src[a].size(), corpus.tgt[a].size()) <
           std::max(corpus.src[b].size(), corpus.tgt[b].size());
  });

  std::vector<Batch> batches;
  std::vector<size_t> cur;
  size_t cur_cost = 0;
  for (size_t i : order) {
    size_t cost = std::max(corpus.src[i].size(), corpus.tgt[i].size()) + 2;
    if (cost > budget) {
      throw DataError("sentence " + std::to_string(i) + " needs " +
                      std::to_string(cost) + " tokens, budget is " +
                      std::to_string(budget));
    }
    if (cur_cost + cost > budget && !cur.empty()) {
      batches.push_back(build_batch(corpus, cur));
      cur.clear();
      cur_cost = 0;
    }
    cur.push_back(i);
    cur_cost += cost;
  }
  if (!cur.empty()) batches.push_back(build_batch(corpus, cur));
  rng.shuffle(std::span<Batch>(batches));
  return batches;
}

inline void save_corpus(const std::string& prefix, const ParallelCorpus& corpus,
                        const Vocab& vocab) {
  std::ofstream fs(prefix + ".src", std::ios::binary);
  std::ofstream ft(prefix + ".tgt", std::ios::binary);
  if (!fs || !ft) throw DataError("cannot write corpus files at " + prefix);
  for (size_t i = 0; i < corpus.size(); ++i) {
    fs << vocab.decode(corpus.src[i]) << '\n';
    ft << vocab.decode(corpus.tgt[i]) << '\n';
  }
}

inline ParallelCorpus load_corpus(const std::string& prefix, const Vocab& vocab) {
  std::ifstream fs(prefix + ".src", std::ios::binary);
  std::ifstream ft(prefix + ".tgt", std::ios::binary);
  if (!fs) throw DataError("cannot read " + prefix + ".src");
  if (!ft) throw DataError("cannot read " + prefix + ".tgt");
  ParallelCorpus c;
  std::string ls, lt;
  while (true) {
    bool gs = static_cast<bool>(std::getline(fs, ls));
    bool gt = static_cast<bool>(std::getline(ft, lt));
    if (gs != gt) throw DataError("line counts differ between " + prefix +
                                  ".src and " + prefix + ".tgt");
    if (!gs) break;
    if (!ls.empty() && ls.back() == '\r') ls.pop_back();
    if (!lt.empty() && lt.back() == '\r') lt.pop_back();
    c.src.push_back(vocab.encode(ls));
    c.tgt.push_back(vocab.encode(lt));
  }
  return c;
}

}  // namespace deepformer
