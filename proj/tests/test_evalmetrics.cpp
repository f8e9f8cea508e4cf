#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/errors.hpp"
#include "deepformer/evalmetrics.hpp"
#include "deepformer/rng.hpp"

using namespace deepformer;

namespace {

nlohmann::json load_fixture(const std::string& name) {
  std::ifstream in(std::string(DEEPFORMER_TEST_DATA_DIR) + "/" + name);
  EXPECT_TRUE(in.good()) << "missing fixture " << name;
  return nlohmann::json::parse(in);
}

std::string join(const std::vector<std::string>& toks) {
  std::string s;
  for (const auto& t : toks) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

TEST(Tokens, SplitsOnAnyWhitespace) {
  auto t = split_tokens("  the\tquick  brown \n fox ");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[0], "the");
  EXPECT_EQ(t[3], "fox");
  EXPECT_TRUE(split_tokens("").empty());
  EXPECT_TRUE(split_tokens("   ").empty());
}

TEST(Bleu, IdentityScoresExactlyOneHundred) {
  std::vector<std::string> refs = {"the cat sat on the mat",
                                   "a quick brown fox jumps over the lazy dog",
                                   "one two three four"};
  auto r = bleu_corpus(refs, refs);
  EXPECT_DOUBLE_EQ(r.corpus.bleu, 100.0);
  EXPECT_DOUBLE_EQ(r.corpus.brevity_penalty, 1.0);
  for (double p : r.corpus.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
  EXPECT_EQ(r.corpus.hyp_len, r.corpus.ref_len);
}

TEST(Bleu, ClippingZeroesTheDegenerateExample) {
  // hyp "the the the the" vs ref "the cat": clipped unigram precision is 1/4
  // (one "the" in the reference) and the bigram precision is 0, so BLEU is 0.00
  auto r = bleu_corpus({"the the the the"}, {"the cat"});
  EXPECT_DOUBLE_EQ(r.corpus.bleu, 0.0);
  EXPECT_DOUBLE_EQ(r.corpus.precisions[0], 0.25);
  EXPECT_DOUBLE_EQ(r.corpus.precisions[1], 0.0);
}

TEST(Bleu, MatchesCommittedFixture) {
  auto j = load_fixture("bleu_fixture.json");
  std::vector<std::string> hyps = j["hypotheses"], refs = j["references"];
  auto r = bleu_corpus(hyps, refs);
  EXPECT_NEAR(r.corpus.bleu, j["bleu"].get<double>(), 0.01);
  EXPECT_NEAR(r.corpus.brevity_penalty, j["brevity_penalty"].get<double>(), 1e-6);
  for (size_t n = 0; n < 4; ++n) {
    EXPECT_NEAR(r.corpus.precisions[n], j["precisions"][n].get<double>(), 1e-6);
  }
  EXPECT_EQ(r.corpus.hyp_len, j["hyp_len"].get<uint64_t>());
  EXPECT_EQ(r.corpus.ref_len, j["ref_len"].get<uint64_t>());
  EXPECT_LT(r.corpus.brevity_penalty, 1.0);  // fixture exercises the short-hyp branch

  auto js = r.to_json();
  EXPECT_NEAR(js["bleu"].get<double>(), r.corpus.bleu, 0.0);
  EXPECT_EQ(js["sentence_bleu"].size(), hyps.size());
}

TEST(Bleu, CorpusScoreIsOrderInvariant) {
  auto j = load_fixture("bleu_fixture.json");
  std::vector<std::string> hyps = j["hypotheses"], refs = j["references"];
  double base = bleu_corpus(hyps, refs).corpus.bleu;
  std::vector<size_t> perm = {4, 2, 0, 3, 1};
  std::vector<std::string> ph, pr;
  for (size_t i : perm) {
    ph.push_back(hyps[i]);
    pr.push_back(refs[i]);
  }
  EXPECT_DOUBLE_EQ(bleu_corpus(ph, pr).corpus.bleu, base);
}

TEST(Bleu, BrevityPenaltyOnlyShrinksShortHypotheses) {
  // hyp one token short: BP = exp(1 - 4/3); 4-gram precision is 0 so BLEU is 0,
  // but the breakdown still carries the penalty
  auto r = bleu_corpus({"a b c"}, {"a b c d"});
  EXPECT_NEAR(r.corpus.brevity_penalty, std::exp(1.0 - 4.0 / 3.0), 1e-12);
  EXPECT_DOUBLE_EQ(r.corpus.bleu, 0.0);
  auto rl = bleu_corpus({"a b c d e"}, {"a b c d"});
  EXPECT_DOUBLE_EQ(rl.corpus.brevity_penalty, 1.0);
}

TEST(Bleu, ErrorsAndEdgeCases) {
  EXPECT_THROW(bleu_corpus({"a"}, {"a", "b"}), DataError);
  EXPECT_THROW(bleu_from_stats({}), DataError);
  auto r = bleu_corpus({"", ""}, {"a b", "c d"});
  EXPECT_DOUBLE_EQ(r.corpus.bleu, 0.0);  // all-empty hypotheses
  EXPECT_EQ(r.corpus.hyp_len, 0u);
}

TEST(Bleu, SmoothedSentenceScoreIsInternalOnly) {
  // add-one smoothing on n >= 2 keeps single-sentence diagnostics nonzero
  auto s = sentence_bleu_stats({"a", "b"}, {"a", "c"});
  // p1 = 1/2 raw, p2 = (0+1)/(1+1), p3 = p4 = (0+1)/(0+1)
  EXPECT_NEAR(smoothed_sentence_bleu(s), 100.0 * std::pow(0.25, 0.25), 1e-9);
  EXPECT_DOUBLE_EQ(smoothed_sentence_bleu(SentenceBleuStats{}), 0.0);
  auto perfect = sentence_bleu_stats({"a", "b", "c", "d", "e"}, {"a", "b", "c", "d", "e"});
  EXPECT_DOUBLE_EQ(smoothed_sentence_bleu(perfect), 100.0);
}

TEST(Bootstrap, IdenticalSystemsAcceptTheNull) {
  auto j = load_fixture("bleu_fixture.json");
  std::vector<std::string> hyps = j["hypotheses"], refs = j["references"];
  auto r = bleu_corpus(hyps, refs);
  auto b = paired_bootstrap(r.stats, r.stats, 500, 3);
  EXPECT_DOUBLE_EQ(b.p_value, 1.0);
  EXPECT_DOUBLE_EQ(b.win_rate, 0.0);
  EXPECT_EQ(b.n_samples, 500u);
}

TEST(Bootstrap, EverywhereBetterSystemRejectsAtZero) {
  std::vector<std::string> refs, worse;
  for (int i = 0; i < 40; ++i) {
    refs.push_back("tok" + std::to_string(i) + " a b c d e f");
    worse.push_back("tok" + std::to_string(i) + " a b c d e wrong");
  }
  auto a = bleu_corpus(refs, refs);   // perfect on every sentence
  auto b = bleu_corpus(worse, refs);  // strictly worse on every sentence
  auto res = paired_bootstrap(a.stats, b.stats, 1000, 11);
  EXPECT_DOUBLE_EQ(res.p_value, 0.0);
  EXPECT_DOUBLE_EQ(res.win_rate, 1.0);
}

TEST(Bootstrap, MatchesHighSampleOracleOnFixture) {
  auto j = load_fixture("bootstrap_fixture.json");
  std::vector<std::string> ha = j["hyp_a"], hb = j["hyp_b"], refs = j["references"];
  ASSERT_EQ(refs.size(), 200u);
  auto a = bleu_corpus(ha, refs);
  auto b = bleu_corpus(hb, refs);
  EXPECT_NEAR(a.corpus.bleu, j["bleu_a"].get<double>(), 1e-5);
  EXPECT_NEAR(b.corpus.bleu, j["bleu_b"].get<double>(), 1e-5);

  // the oracle ran 100k samples through an unrelated RNG; estimates must agree
  auto r = paired_bootstrap(a.stats, b.stats, 10000, 42);
  EXPECT_NEAR(r.p_value, j["oracle_p_value"].get<double>(), 0.02);
  EXPECT_NEAR(r.win_rate, j["oracle_win_rate"].get<double>(), 0.02);
  EXPECT_DOUBLE_EQ(r.win_rate, 1.0 - r.p_value);  // no ties in this fixture
}

TEST(Bootstrap, DeterministicPerSeed) {
  auto j = load_fixture("bootstrap_fixture.json");
  std::vector<std::string> ha = j["hyp_a"], hb = j["hyp_b"], refs = j["references"];
  auto a = bleu_corpus(ha, refs);
  auto b = bleu_corpus(hb, refs);
  auto r1 = paired_bootstrap(a.stats, b.stats, 1000, 5);
  auto r2 = paired_bootstrap(a.stats, b.stats, 1000, 5);
  EXPECT_DOUBLE_EQ(r1.p_value, r2.p_value);
  EXPECT_DOUBLE_EQ(r1.win_rate, r2.win_rate);
}

TEST(Bootstrap, PValueTracksDegradation) {
  // A has one bad token per sentence; B repairs 30 sentences and corrupts a
  // second position on k others. Larger k must not raise the p-value
  const int n = 100;
  Rng rng(123);
  std::vector<std::vector<std::string>> toks;
  std::vector<std::string> refs, a_side;
  for (int i = 0; i < n; ++i) {
    std::vector<std::string> t;
    for (int k = 0; k < 10; ++k) t.push_back("v" + std::to_string(rng.next_below(20)));
    toks.push_back(t);
    refs.push_back(join(t));
    auto at = t;
    at[0] = "wrongA";
    a_side.push_back(join(at));
  }
  auto mk_b = [&](int k_worse) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
      auto t = toks[i];
      if (i >= 30) {
        t[0] = "wrongA";
        if (i < 30 + k_worse) t[5] = "wrongB";
      }
      out.push_back(join(t));
    }
    return out;
  };
  auto a = bleu_corpus(a_side, refs);
  auto p_at = [&](int k) {
    auto b = bleu_corpus(mk_b(k), refs);
    return paired_bootstrap(a.stats, b.stats, 2000, 9).p_value;
  };
  double p15 = p_at(15), p30 = p_at(30), p45 = p_at(45);
  EXPECT_GT(p15, p30 + 0.05);
  EXPECT_LE(p45, p30);
  EXPECT_GT(p15, 0.02);
  EXPECT_LT(p45, 0.02);
}

TEST(Bootstrap, RejectsDegenerateInputs) {
  auto r = bleu_corpus({"a b"}, {"a b"});
  EXPECT_THROW(paired_bootstrap({}, {}, 100, 0), DataError);
  EXPECT_THROW(paired_bootstrap(r.stats, {r.stats[0], r.stats[0]}, 100, 0), DataError);
  EXPECT_THROW(paired_bootstrap(r.stats, r.stats, 0, 0), DataError);
}

TEST(Buckets, EdgesFollowTheReportedRanges) {
  EXPECT_EQ(frequency_bucket(0), 0u);
  EXPECT_EQ(frequency_bucket(1), 1u);
  EXPECT_EQ(frequency_bucket(4), 1u);
  EXPECT_EQ(frequency_bucket(5), 2u);
  EXPECT_EQ(frequency_bucket(9), 2u);
  EXPECT_EQ(frequency_bucket(10), 3u);
  EXPECT_EQ(frequency_bucket(99), 3u);
  EXPECT_EQ(frequency_bucket(100), 4u);
  EXPECT_EQ(frequency_bucket(999), 4u);
  EXPECT_EQ(frequency_bucket(1000), 5u);
  EXPECT_EQ(length_bucket(9), 0u);
  EXPECT_EQ(length_bucket(10), 1u);
  EXPECT_EQ(length_bucket(19), 1u);
  EXPECT_EQ(length_bucket(20), 2u);
  EXPECT_EQ(length_bucket(29), 2u);
  EXPECT_EQ(length_bucket(30), 3u);
}

TEST(FineGrained, PerfectHypothesesAreperfectEverywhere) {
  std::vector<std::string> refs = {"alpha beta gamma delta epsilon",
                                   "alpha alpha beta beta gamma gamma delta delta "
                                   "epsilon epsilon alpha beta"};
  std::vector<std::string> train = {"alpha", "beta beta beta beta beta",
                                    "gamma gamma gamma gamma gamma gamma gamma "
                                    "gamma gamma gamma"};
  auto rep = fine_grained_report(refs, refs, train);
  for (const auto& [label, row] : rep.word_accuracy) {
    EXPECT_DOUBLE_EQ(row.accuracy(), 1.0) << label;
  }
  for (const auto& [label, b] : rep.bleu_by_length) {
    EXPECT_DOUBLE_EQ(b.bleu, 100.0) << label;
  }
  // refs of length 5 and 12: exactly the first two length buckets appear
  EXPECT_EQ(rep.bleu_by_length.size(), 2u);
  EXPECT_TRUE(rep.bleu_by_length.count("<10"));
  EXPECT_TRUE(rep.bleu_by_length.count("10-19"));
}

TEST(FineGrained, HandCountedThreeSentenceFixture) {
  // training frequencies: alpha x4, beta x5, gamma x10, delta x100, epsilon
  // x1000, zeta unseen
  std::vector<std::string> train = {"alpha alpha alpha", "alpha",
                                    "beta beta beta beta beta"};
  {
    std::string g;
    for (int i = 0; i < 10; ++i) g += i ? " gamma" : "gamma";
    train.push_back(g);
    std::string d;
    for (int i = 0; i < 100; ++i) d += i ? " delta" : "delta";
    train.push_back(d);
    std::string e;
    for (int i = 0; i < 1000; ++i) e += i ? " epsilon" : "epsilon";
    train.push_back(e);
  }
  std::vector<std::string> refs = {
      "alpha beta zeta",
      "gamma delta epsilon zeta alpha",
      "beta beta beta alpha gamma gamma delta delta delta delta zeta zeta"};
  std::vector<std::string> hyps = {"alpha beta zeta", "gamma delta epsilon",
                                   "beta beta alpha alpha gamma delta delta"};
  auto rep = fine_grained_report(hyps, refs, train);

  ASSERT_EQ(rep.word_accuracy.size(), 6u);
  auto row = [&](const char* label) { return rep.word_accuracy.at(label); };
  EXPECT_EQ(row("unseen").matched, 1u);
  EXPECT_EQ(row("unseen").total, 4u);
  EXPECT_EQ(row("1-4").matched, 2u);  // alpha
  EXPECT_EQ(row("1-4").total, 3u);
  EXPECT_EQ(row("5-9").matched, 3u);  // beta: 1 + min(3,2)
  EXPECT_EQ(row("5-9").total, 4u);
  EXPECT_EQ(row("10-99").matched, 2u);  // gamma
  EXPECT_EQ(row("10-99").total, 3u);
  EXPECT_EQ(row("100-999").matched, 3u);  // delta: 1 + min(4,2)
  EXPECT_EQ(row("100-999").total, 5u);
  EXPECT_EQ(row(">=1000").matched, 1u);  // epsilon
  EXPECT_EQ(row(">=1000").total, 1u);
  EXPECT_DOUBLE_EQ(row("100-999").accuracy(), 0.6);

  // length buckets: two refs under 10 tokens, one of 12; none longer
  ASSERT_EQ(rep.bleu_by_length.size(), 2u);
  const auto& mid = rep.bleu_by_length.at("10-19");
  EXPECT_EQ(mid.hyp_len, 7u);
  EXPECT_EQ(mid.ref_len, 12u);
  EXPECT_NEAR(mid.precisions[0], 6.0 / 7.0, 1e-12);
  EXPECT_NEAR(mid.precisions[1], 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(mid.precisions[2], 2.0 / 5.0, 1e-12);
  EXPECT_DOUBLE_EQ(mid.bleu, 0.0);  // no 4-gram matches in the bucket
  const auto& low = rep.bleu_by_length.at("<10");
  EXPECT_EQ(low.hyp_len, 6u);
  EXPECT_EQ(low.ref_len, 8u);

  // bucket totals cover the corpus exactly
  uint64_t hyp_sum = 0, ref_sum = 0;
  for (const auto& [label, b] : rep.bleu_by_length) {
    hyp_sum += b.hyp_len;
    ref_sum += b.ref_len;
  }
  EXPECT_EQ(hyp_sum, 13u);
  EXPECT_EQ(ref_sum, 20u);

  auto js = rep.to_json();
  EXPECT_FALSE(js["bleu_by_length"].contains(">=30"));
  EXPECT_TRUE(js["word_accuracy_by_frequency"].contains("unseen"));
  EXPECT_DOUBLE_EQ(
      js["word_accuracy_by_frequency"]["unseen"]["accuracy"].get<double>(), 0.25);
}

TEST(FineGrained, MismatchedSidesThrow) {
  EXPECT_THROW(fine_grained_report({"a"}, {"a", "b"}, {}), DataError);
}

}  // namespace
