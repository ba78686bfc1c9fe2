#include <gtest/gtest.h>

#include <cmath>

#include "loretta/evaluation.hpp"
#include "test_support.hpp"

namespace loretta {
namespace {

using testing_support::small_dataset;
using testing_support::small_model;
using testing_support::tiny_config;
using testing_support::tiny_layout;

// Tied output embedding at zero gives all-zero logits.
Parameters<double> uniform_model() {
  auto p = init_params<double>(tiny_config(), 1);
  for (const auto& t : p.layout().tensors())
    if (t.name == "tok_emb") std::fill(p.span(t).begin(), p.span(t).end(), 0.0);
  return p;
}

TEST(Perplexity, UniformLogitsGiveVocabularySize) {
  const auto p = uniform_model();
  const auto batch = testing_support::random_batch(tiny_layout(), 20, 12, 3);
  const auto t = total_nll(p, std::span<const AssembledSequence>(batch));
  const auto r = make_ppl_report({"A"}, t);
  EXPECT_NEAR(r.ppl, 37.0, 1e-3);
  EXPECT_EQ(r.n_tokens, 20u * 11u);
  EXPECT_DOUBLE_EQ(r.ppl, std::exp(r.mean_nll));
}

TEST(Perplexity, RiggedMarkovLogitsMatchAnalytic) {
  // Three-state chain over content ids 0..2 of modality A.
  const auto layout = tiny_layout();
  const double P[3][3] = {{0.7, 0.2, 0.1}, {0.25, 0.5, 0.25}, {0.05, 0.15, 0.8}};
  Rng rng(4);
  std::vector<AssembledSequence> seqs;
  double analytic_sum = 0;
  std::size_t analytic_n = 0;
  for (int s = 0; s < 30; ++s) {
    TokenSeq seg{0, {static_cast<TokenId>(rng.below(3))}};
    for (int i = 0; i < 40; ++i) {
      const double u = rng.uniform();
      const auto prev = seg.tokens.back();
      TokenId next = 0;
      for (double c = P[prev][0]; u >= c && next < 2;) c += P[prev][++next];
      analytic_sum -= std::log(P[prev][next]);
      ++analytic_n;
      seg.tokens.push_back(next);
    }
    AssembledSequence a;
    append_segment(a, layout, seg);
    // Only transitions inside the chain are scored.
    std::fill(a.loss_mask.begin(), a.loss_mask.end(), 0);
    for (std::size_t i = 2; i + 1 < a.size(); ++i) a.loss_mask[i] = 1;
    seqs.push_back(std::move(a));
  }
  ForwardOutput<double> out;
  out.offsets = {0};
  for (const auto& s : seqs) out.offsets.push_back(out.offsets.back() + s.size());
  out.logits = MatX<double>::Constant(static_cast<Eigen::Index>(out.offsets.back()), layout.vocab_total(), -1e300);
  for (std::size_t s = 0; s < seqs.size(); ++s)
    for (std::size_t i = 0; i < seqs[s].size(); ++i) {
      const auto row = static_cast<Eigen::Index>(out.offsets[s] + i);
      const auto tok = seqs[s].tokens[i];
      if (tok < 3)
        for (int j = 0; j < 3; ++j) out.logits(row, j) = std::log(P[tok][j]);
      else
        out.logits.row(row).setZero();
    }
  const auto t = accumulate_nll(out, std::span<const AssembledSequence>(seqs));
  EXPECT_EQ(t.count, analytic_n);
  const auto r = make_ppl_report({"A"}, t);
  EXPECT_NEAR(r.ppl, std::exp(analytic_sum / static_cast<double>(analytic_n)), 1e-9);
}

TEST(Perplexity, EvaluationTargetsAreContentAndEos) {
  const auto layout = tiny_layout();
  const auto s = evaluation_sequence(layout, {TokenSeq{0, {1, 2}}, TokenSeq{2, {3}}});
  EXPECT_EQ(s.loss_mask, (std::vector<std::uint8_t>{0, 1, 1, 1, 0, 1, 1}));
}

TEST(Perplexity, IndependentOfThreadCount) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto p = init_params<float>(small_model(layout), 2);
  setenv("LORETTA_LAB_THREADS", "1", 1);
  const auto a = perplexity(p, layout, ds.subset("test"), {kImage, kWave});
  setenv("LORETTA_LAB_THREADS", "3", 1);
  const auto b = perplexity(p, layout, ds.subset("test"), {kImage, kWave});
  unsetenv("LORETTA_LAB_THREADS");
  EXPECT_EQ(a.mean_nll, b.mean_nll);
  EXPECT_EQ(a.n_tokens, ds.subset("test").records.size() * (64 + 16 + 2));
  EXPECT_THROW(perplexity(p, layout, ds.subset("pair_AB"), {kWave}), InputError);
}

TEST(Membership, IdenticalDataHasUnitRatio) {
  const auto layout = tiny_layout();
  const auto p = init_params<double>(tiny_config(), 3);
  const auto d = testing_support::random_batch(layout, 8, 12, 1);
  const auto v = sigma_membership(p, std::span<const AssembledSequence>(d), std::span<const AssembledSequence>(d));
  EXPECT_DOUBLE_EQ(v.ratio, 1.0);
  EXPECT_TRUE(v.same_modality);
  auto far = d;
  far[0].tokens[1] = 1000;
  EXPECT_THROW(sigma_membership(p, std::span<const AssembledSequence>(far), std::span<const AssembledSequence>(d)),
               InputError);
}

TEST(Membership, VerdictUsesSigmaSquared) {
  const auto layout = tiny_layout();
  const auto p = init_params<double>(tiny_config(), 3);
  const auto a = testing_support::random_batch(layout, 8, 12, 1);
  const auto b = testing_support::random_batch(layout, 8, 12, 2);
  const std::span<const AssembledSequence> sa(a), sb(b);
  const auto v = sigma_membership(p, sa, sb, 3.0);
  EXPECT_DOUBLE_EQ(v.ratio, v.nll_i / v.nll_j);
  EXPECT_TRUE(v.same_modality);
  const auto tight = sigma_membership(p, sa, sb, std::sqrt(v.ratio) * 0.999);
  EXPECT_FALSE(tight.same_modality);
}

TEST(Probe, SeparableFeaturesReachFullAccuracy) {
  Rng rng(1);
  const int n = 400;
  Eigen::MatrixXd x(n, 12);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % 10;
    for (int j = 0; j < 12; ++j) x(i, j) = rng.normal(0, 0.1) + (j == i % 10 ? 3.0 : 0.0);
  }
  ProbeConfig cfg;
  const auto r = linear_probe(x.topRows(200), {y.begin(), y.begin() + 200}, x.bottomRows(200),
                              {y.begin() + 200, y.end()}, 10, 1, cfg, 5);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.trial_accuracy.size(), 3u);
}

TEST(Probe, ShuffledLabelsGiveChance) {
  Rng rng(2);
  const int n_pool = 400, n_test = 4000;
  Eigen::MatrixXd pool(n_pool, 16), test(n_test, 16);
  for (Eigen::Index i = 0; i < pool.size(); ++i) pool.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < test.size(); ++i) test.data()[i] = rng.normal();
  std::vector<int> yp(n_pool), yt(n_test);
  for (int i = 0; i < n_pool; ++i) yp[static_cast<std::size_t>(i)] = i % 10;
  for (int i = 0; i < n_test; ++i) yt[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(10));
  const auto r = linear_probe(pool, yp, test, yt, 10, 1, ProbeConfig{}, 3);
  EXPECT_NEAR(r.accuracy, 0.10, 0.05);
}

TEST(Probe, MemorizesItsTrainingSet) {
  Rng rng(3);
  Eigen::MatrixXd x(200, 64);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  std::vector<int> y(200);
  for (auto& v : y) v = static_cast<int>(rng.below(10));
  for (int c = 0; c < 10; ++c) y[static_cast<std::size_t>(c)] = c;
  ProbeConfig cfg;
  cfg.n_per_class = 1;
  cfg.trials = 1;
  // Pool with one sample per class, test on the same rows.
  Eigen::MatrixXd px = x.topRows(10);
  std::vector<int> py(y.begin(), y.begin() + 10);
  EXPECT_EQ(linear_probe(px, py, px, py, 10, 1, cfg, 1).accuracy, 1.0);
}

TEST(Probe, Errors) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(5, 2);
  std::vector<int> y = {0, 0, 1, 1, 1};
  ProbeConfig cfg;
  EXPECT_THROW(linear_probe(x, y, x, y, 2, 1, cfg, 0), InputError);  // 2 < 20 per class
  EXPECT_THROW(linear_probe(x, y, x, y, 3, 1, cfg, 0), InputError);  // class 2 absent
  EXPECT_THROW(linear_probe(x, {0, 1}, x, y, 2, 1, cfg, 0), InputError);
}

TEST(CycleError, OracleGeneratorEqualsDirectScore) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto p = init_params<float>(small_model(layout), 4);
  const auto& test = ds.subset("test");
  std::size_t calls = 0;
  // Oracle: returns the record's true A for the link B it is handed.
  const PseudoGenerator oracle = [&](const TokenSeq& link, std::uint32_t target, Rng&) {
    for (const auto& r : test.records)
      if (r.segment(kText).tokens == link.tokens) {
        ++calls;
        return GenerationResult{target, r.segment(target).tokens, false};
      }
    return GenerationResult{target, {}, false};
  };
  Rng rng(1);
  const auto st = cycle_error(layout, test, kText, kWave, kImage, 10, oracle, model_scorer(p), rng, 200);
  ASSERT_EQ(st.two_hop.size(), 10u);
  EXPECT_EQ(st.failures, 0u);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& r = test.records[i];
    const auto direct = build_transitive_sequence(layout, r.segment(kImage), r.segment(kWave));
    EXPECT_NEAR(st.two_hop[i], model_scorer(p)(direct).mean(), 1e-12);
  }
  EXPECT_LE(st.two_hop_ci.lo, st.two_hop_ci.mean);
  EXPECT_GE(st.two_hop_ci.hi, st.two_hop_ci.mean);
}

TEST(CycleError, UntrainedModelNearLogVocabulary) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto p = init_params<float>(small_model(layout), 4);
  const std::vector<std::size_t> max_len = {64, 16, 16};
  Rng rng(2);
  const auto st = cycle_error(layout, ds.subset("test"), kText, kWave, kImage, 5,
                              model_generator(p, layout, max_len, SamplingOptions{}), model_scorer(p), rng, 100);
  ASSERT_FALSE(st.two_hop.empty());
  EXPECT_NEAR(st.two_hop_ci.mean, std::log(static_cast<double>(layout.vocab_total())), 0.1);
  EXPECT_NEAR(st.one_hop_ci.mean, std::log(static_cast<double>(layout.vocab_total())), 0.1);
}

TEST(Bootstrap, DegenerateSampleHasZeroWidth) {
  Rng rng(0);
  const auto iv = bootstrap_mean({2.0, 2.0, 2.0}, 50, rng);
  EXPECT_EQ(iv.lo, 2.0);
  EXPECT_EQ(iv.hi, 2.0);
}

}  // namespace
}  // namespace loretta
