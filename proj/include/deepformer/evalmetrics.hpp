#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "deepformer/errors.hpp"
#include "deepformer/rng.hpp"

namespace deepformer {

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(std::move(tok));
  return out;
}

// per-sentence clipped n-gram counts, n = 1..4; the unit the bootstrap resamples
struct SentenceBleuStats {
  std::array<uint64_t, 4> match{};  // clipped matches against the reference
  std::array<uint64_t, 4> total{};  // hypothesis n-gram counts
  uint64_t hyp_len = 0;
  uint64_t ref_len = 0;
};

inline SentenceBleuStats sentence_bleu_stats(const std::vector<std::string>& hyp,
                                             const std::vector<std::string>& ref) {
  SentenceBleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (size_t n = 1; n <= 4; ++n) {
    if (hyp.size() < n) break;
    std::unordered_map<std::string, uint64_t> ref_counts;
    if (ref.size() >= n) {
      for (size_t i = 0; i + n <= ref.size(); ++i) {
        std::string g = ref[i];
        for (size_t k = 1; k < n; ++k) g += ' ' + ref[i + k];
        ++ref_counts[g];
      }
    }
    std::unordered_map<std::string, uint64_t> hyp_counts;
    for (size_t i = 0; i + n <= hyp.size(); ++i) {
      std::string g = hyp[i];
      for (size_t k = 1; k < n; ++k) g += ' ' + hyp[i + k];
      ++hyp_counts[g];
    }
    for (const auto& [g, c] : hyp_counts) {
      s.total[n - 1] += c;
      auto it = ref_counts.find(g);
      if (it != ref_counts.end()) s.match[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

struct BleuBreakdown {
  double bleu = 0.0;  // 0-100
  std::array<double, 4> precisions{};
  double brevity_penalty = 1.0;
  uint64_t hyp_len = 0;
  uint64_t ref_len = 0;
};

// corpus-level: counts are summed over sentences before dividing, unsmoothed
inline BleuBreakdown bleu_from_stats(const std::vector<SentenceBleuStats>& stats) {
  if (stats.empty()) throw DataError("bleu: empty corpus");
  BleuBreakdown b;
  std::array<uint64_t, 4> match{}, total{};
  for (const auto& s : stats) {
    b.hyp_len += s.hyp_len;
    b.ref_len += s.ref_len;
    for (size_t n = 0; n < 4; ++n) {
      match[n] += s.match[n];
      total[n] += s.total[n];
    }
  }
  if (b.hyp_len == 0) return b;  // all-empty hypotheses score 0
  b.brevity_penalty =
      b.hyp_len < b.ref_len
          ? std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len))
          : 1.0;
  double log_sum = 0.0;
  for (size_t n = 0; n < 4; ++n) {
    b.precisions[n] =
        total[n] ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : 0.0;
    if (b.precisions[n] == 0.0) return b;  // any zero precision zeroes the score
    log_sum += std::log(b.precisions[n]);
  }
  b.bleu = 100.0 * b.brevity_penalty * std::exp(log_sum / 4.0);
  return b;
}

// sentence-level helper for the report; add-one smoothing on n >= 2 only.
// internal bookkeeping for bootstrap diagnostics, never the corpus score
inline double smoothed_sentence_bleu(const SentenceBleuStats& s) {
  if (s.hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(s.match[n]);
    double t = static_cast<double>(s.total[n]);
    if (n > 0) {
      m += 1.0;
      t += 1.0;
    }
    double p = t > 0.0 ? m / t : 0.0;
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  double bp = s.hyp_len < s.ref_len
                  ? std::exp(1.0 - static_cast<double>(s.ref_len) /
                                       static_cast<double>(s.hyp_len))
                  : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

struct EvalReport {
  BleuBreakdown corpus;
  std::vector<SentenceBleuStats> stats;
  std::vector<double> sentence_bleu;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["bleu"] = corpus.bleu;
    j["precisions"] = corpus.precisions;
    j["brevity_penalty"] = corpus.brevity_penalty;
    j["hyp_len"] = corpus.hyp_len;
    j["ref_len"] = corpus.ref_len;
    j["sentence_bleu"] = sentence_bleu;
    return j;
  }
};

inline EvalReport bleu_corpus(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size()) {
    throw DataError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(references.size()) + " references");
  }
  EvalReport r;
  r.stats.reserve(hypotheses.size());
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    r.stats.push_back(
        sentence_bleu_stats(split_tokens(hypotheses[i]), split_tokens(references[i])));
    r.sentence_bleu.push_back(smoothed_sentence_bleu(r.stats.back()));
  }
  r.corpus = bleu_from_stats(r.stats);
  return r;
}

struct BootstrapResult {
  double p_value = 1.0;   // fraction of resamples where B >= A; ties favor the null
  double win_rate = 0.0;  // fraction of resamples where A > B strictly
  size_t n_samples = 0;
};

// paired bootstrap over sentences: each resample draws indices with replacement
// and recomputes corpus BLEU for both systems from the resampled count tuples.
// A is the claimed-better system; one-sided
inline BootstrapResult paired_bootstrap(const std::vector<SentenceBleuStats>& a,
                                        const std::vector<SentenceBleuStats>& b,
                                        size_t n_samples = 1000, uint64_t seed = 0) {
  if (a.empty() || b.empty()) throw DataError("bootstrap: empty score list");
  if (a.size() != b.size()) {
    throw DataError("bootstrap: misaligned score lists (" + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()) + ")");
  }
  if (n_samples == 0) throw DataError("bootstrap: n_samples must be positive");
  const size_t n = a.size();
  size_t b_geq = 0, a_wins = 0;
  std::vector<SentenceBleuStats> sa(n), sb(n);
  for (size_t s = 0; s < n_samples; ++s) {
    Rng rng(mix64(seed, 0x626f6f74, s));
    for (size_t i = 0; i < n; ++i) {
      size_t idx = static_cast<size_t>(rng.next_below(n));
      sa[i] = a[idx];
      sb[i] = b[idx];
    }
    double score_a = bleu_from_stats(sa).bleu;
    double score_b = bleu_from_stats(sb).bleu;
    if (score_b >= score_a) ++b_geq;
    if (score_a > score_b) ++a_wins;
  }
  BootstrapResult r;
  r.n_samples = n_samples;
  r.p_value = static_cast<double>(b_geq) / static_cast<double>(n_samples);
  r.win_rate = static_cast<double>(a_wins) / static_cast<double>(n_samples);
  return r;
}

// Fig. 3 style diagnostics. Frequency bucket edges follow compare-mt's defaults
inline const std::array<std::string, 6>& frequency_bucket_labels() {
  static const std::array<std::string, 6> labels = {"unseen",  "1-4",     "5-9",
                                                    "10-99",   "100-999", ">=1000"};
  return labels;
}

inline size_t frequency_bucket(uint64_t freq) {
  if (freq == 0) return 0;
  if (freq <= 4) return 1;
  if (freq <= 9) return 2;
  if (freq <= 99) return 3;
  if (freq <= 999) return 4;
  return 5;
}

inline const std::array<std::string, 4>& length_bucket_labels() {
  static const std::array<std::string, 4> labels = {"<10", "10-19", "20-29", ">=30"};
  return labels;
}

inline size_t length_bucket(uint64_t ref_len) {
  if (ref_len < 10) return 0;
  if (ref_len < 20) return 1;
  if (ref_len < 30) return 2;
  return 3;
}

struct FrequencyBucketRow {
  uint64_t matched = 0;
  uint64_t total = 0;
  double accuracy() const {
    return total ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
  }
};

struct FineGrainedReport {
  // word accuracy by training-corpus frequency; absent buckets are omitted
  std::map<std::string, FrequencyBucketRow> word_accuracy;
  // corpus BLEU restricted to reference-length buckets; absent buckets omitted
  std::map<std::string, BleuBreakdown> bleu_by_length;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["word_accuracy_by_frequency"] = nlohmann::json::object();
    for (const auto& label : frequency_bucket_labels()) {
      auto it = word_accuracy.find(label);
      if (it == word_accuracy.end()) continue;
      j["word_accuracy_by_frequency"][label] = {{"matched", it->second.matched},
                                                {"total", it->second.total},
                                                {"accuracy", it->second.accuracy()}};
    }
    j["bleu_by_length"] = nlohmann::json::object();
    for (const auto& label : length_bucket_labels()) {
      auto it = bleu_by_length.find(label);
      if (it == bleu_by_length.end()) continue;
      j["bleu_by_length"][label] = {{"bleu", it->second.bleu},
                                    {"sentences_hyp_len", it->second.hyp_len},
                                    {"sentences_ref_len", it->second.ref_len}};
    }
    return j;
  }
};

inline FineGrainedReport fine_grained_report(
    const std::vector<std::string>& hypotheses,
    const std::vector<std::string>& references,
    const std::vector<std::string>& training_corpus) {
  if (hypotheses.size() != references.size()) {
    throw DataError("fine-grained report: " + std::to_string(hypotheses.size()) +
                    " hypotheses vs " + std::to_string(references.size()) +
                    " references");
  }
  std::unordered_map<std::string, uint64_t> freq;
  for (const auto& line : training_corpus) {
    for (auto& tok : split_tokens(line)) ++freq[tok];
  }

  FineGrainedReport rep;
  std::array<FrequencyBucketRow, 6> freq_rows{};
  std::array<std::vector<SentenceBleuStats>, 4> length_groups;

  for (size_t i = 0; i < references.size(); ++i) {
    auto hyp = split_tokens(hypotheses[i]);
    auto ref = split_tokens(references[i]);

    // bag-of-words matching per sentence: each reference token instance either
    // finds a hypothesis copy or does not
    std::unordered_map<std::string, uint64_t> hyp_counts, ref_counts;
    for (const auto& t : hyp) ++hyp_counts[t];
    for (const auto& t : ref) ++ref_counts[t];
    for (const auto& [tok, rc] : ref_counts) {
      auto it = freq.find(tok);
      size_t bucket = frequency_bucket(it == freq.end() ? 0 : it->second);
      auto hit = hyp_counts.find(tok);
      uint64_t matched = hit == hyp_counts.end() ? 0 : std::min(rc, hit->second);
      freq_rows[bucket].total += rc;
      freq_rows[bucket].matched += matched;
    }

    length_groups[length_bucket(ref.size())].push_back(sentence_bleu_stats(hyp, ref));
  }

  for (size_t k = 0; k < freq_rows.size(); ++k) {
    if (freq_rows[k].total > 0) rep.word_accuracy[frequency_bucket_labels()[k]] = freq_rows[k];
  }
  for (size_t k = 0; k < length_groups.size(); ++k) {
    if (!length_groups[k].empty()) {
      rep.bleu_by_length[length_bucket_labels()[k]] = bleu_from_stats(length_groups[k]);
    }
  }
  return rep;
}

}  // namespace deepformer
