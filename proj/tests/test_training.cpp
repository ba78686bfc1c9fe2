#include <gtest/gtest.h>

#include <filesystem>

#include "loretta/training.hpp"
#include "test_support.hpp"

namespace loretta {
namespace {

namespace fs = std::filesystem;
using testing_support::small_dataset;
using testing_support::small_model;

TEST(Loader, EpochReshuffleAndRestore) {
  Loader a(7, Rng(3));
  std::vector<std::size_t> first, second;
  for (int i = 0; i < 7; ++i) first.push_back(a.next());
  for (int i = 0; i < 7; ++i) second.push_back(a.next());
  auto s1 = first, s2 = second;
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  EXPECT_EQ(s1, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(s1, s2);
  EXPECT_NE(first, second);

  Loader b(7, Rng(3));
  for (int i = 0; i < 3; ++i) b.next();
  Loader c(7, Rng(3));
  c.restore(b.state());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(b.next(), c.next());
}

TEST(MakeBatch, RoundRobinAcrossLoaders) {
  const auto& ds = small_dataset();
  TrainConfig cfg;
  cfg.accumulation = 4;
  cfg.batch_size = 2;
  const auto sources = training_sources(ds, Strategy::kC2M3, cfg);
  ASSERT_EQ(sources.size(), 2u);
  std::vector<Loader> loaders;
  for (std::size_t i = 0; i < sources.size(); ++i) loaders.emplace_back(sources[i].size(), Rng(i));
  Rng rng(0);
  const auto mbs = make_batch(sources, loaders, 0, Strategy::kC2M3, cfg, ds.layout(1), 256, rng);
  ASSERT_EQ(mbs.size(), 4u);
  EXPECT_EQ(mbs[0].source, 0u);
  EXPECT_EQ(mbs[1].source, 1u);
  EXPECT_EQ(mbs[2].source, 0u);
  EXPECT_EQ(mbs[3].source, 1u);
}

TEST(MakeBatch, GptIsCanonicalAndUnmasked) {
  const auto& ds = small_dataset();
  TrainConfig cfg;
  cfg.batch_size = 10;
  const auto layout = ds.layout(1);
  const auto sources = training_sources(ds, Strategy::kGPT, cfg);
  std::vector<Loader> loaders;
  for (std::size_t i = 0; i < sources.size(); ++i) loaders.emplace_back(sources[i].size(), Rng(i));
  Rng rng(1);
  std::size_t n = 0;
  while (n < 1000) {
    for (const auto& mb : make_batch(sources, loaders, 0, Strategy::kGPT, cfg, layout, 256, rng)) {
      EXPECT_EQ(mb.masked, 0u);
      for (const auto& s : mb.seqs) {
        EXPECT_EQ(s.tokens[0], layout.bos(sources[mb.source].modalities[0]));
        EXPECT_EQ(std::count(s.tokens.begin(), s.tokens.end(), layout.eospan()), 0);
        ++n;
      }
    }
  }
}

TEST(MakeBatch, C2M3MaskedFraction) {
  const auto& ds = small_dataset();
  TrainConfig cfg;
  cfg.batch_size = 50;
  const auto layout = ds.layout(1);
  const auto sources = training_sources(ds, Strategy::kC2M3, cfg);
  std::vector<Loader> loaders;
  for (std::size_t i = 0; i < sources.size(); ++i) loaders.emplace_back(sources[i].size(), Rng(i));
  Rng rng(2);
  std::size_t n = 0, masked = 0;
  while (n < 10000) {
    for (const auto& mb : make_batch(sources, loaders, 0, Strategy::kC2M3, cfg, layout, 256, rng)) {
      n += mb.seqs.size();
      masked += mb.masked;
    }
  }
  const double f = static_cast<double>(masked) / static_cast<double>(n);
  EXPECT_GE(f, 0.47);
  EXPECT_LE(f, 0.53);
}

TEST(MakeBatch, Cm2IsUnimodal) {
  const auto& ds = small_dataset();
  TrainConfig cfg;
  cfg.cm2_modality = "A";
  const auto layout = ds.layout(1);
  const auto sources = training_sources(ds, Strategy::kCM2, cfg);
  for (const auto& s : sources) EXPECT_EQ(s.modalities, std::vector<std::uint32_t>{kImage});
  std::vector<Loader> loaders;
  for (std::size_t i = 0; i < sources.size(); ++i) loaders.emplace_back(sources[i].size(), Rng(i));
  Rng rng(3);
  for (int k = 0; k < 20; ++k)
    for (const auto& mb : make_batch(sources, loaders, static_cast<std::size_t>(k), Strategy::kCM2, cfg, layout, 256, rng))
      for (const auto& s : mb.seqs) {
        int bos = 0;
        for (auto t : s.tokens) bos += layout.is_bos(t);
        EXPECT_EQ(bos, 1);
      }
}

TEST(Transitive, OracleGeneratorMatchesDirectPairLoss) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto cfg = small_model(layout);
  const auto p = init_params<double>(cfg, 4);
  const auto& rec = ds.subset("test").records[0];
  // Oracle: the "generated" C is the record's true C.
  const PseudoGenerator oracle = [&](const TokenSeq&, std::uint32_t target, Rng&) {
    return GenerationResult{target, rec.segment(target).tokens, false};
  };
  Rng rng(0);
  const auto ts = make_transitive_sample(layout, rec.segment(kText), rec.segment(kImage), kWave, oracle, false, rng);
  ASSERT_TRUE(ts.seq);
  const auto trans = nll_loss(forward(p, *ts.seq), std::span<const AssembledSequence>(&*ts.seq, 1));

  Rng r2(0);
  auto direct = assemble(layout, {rec.segment(kWave), rec.segment(kImage)}, false, r2, 256);
  const auto c_len = rec.segment(kWave).size() + 2;
  for (std::size_t i = 0; i <= c_len; ++i) direct.loss_mask[i] = 0;
  const auto pair = nll_loss(forward(p, direct), std::span<const AssembledSequence>(&direct, 1));
  EXPECT_EQ(trans.count, pair.count);
  EXPECT_NEAR(trans.mean, pair.mean, 1e-12);
}

TEST(Transitive, LossNeverCoversPseudoPositions) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto p = init_params<float>(small_model(layout), 5);
  const std::vector<std::size_t> max_len = {64, 16, 16};
  const auto gen = model_generator(p, layout, max_len, SamplingOptions{});
  const auto& pairs = ds.subset("pair_AB").records;
  Rng rng(9);
  int skipped = 0;
  for (int step = 0; step < 1000; ++step) {
    const auto& rec = pairs[static_cast<std::size_t>(step) % pairs.size()];
    Rng r = rng.split(static_cast<std::uint64_t>(step));
    const auto ts = make_transitive_sample(layout, rec.segment(kText), rec.segment(kImage), kWave, gen, true, r);
    if (!ts.seq) {
      ++skipped;
      continue;
    }
    const auto& s = *ts.seq;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s.loss_mask[i]) continue;
      EXPECT_EQ(s.modality[i], static_cast<std::uint32_t>(kImage)) << "loss on a pseudo position";
      EXPECT_FALSE(layout.is_bos(s.tokens[i]));
    }
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.modality[i] == kImage && !layout.is_bos(s.tokens[i])) EXPECT_EQ(s.loss_mask[i], 1);
  }
  EXPECT_LT(skipped, 100);
}

TEST(Transitive, EmptyGenerationResampledThenSkipped) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  const auto cfg = small_model(layout);
  const auto p = init_params<float>(cfg, 5);
  int calls = 0;
  const PseudoGenerator empty_once = [&](const TokenSeq&, std::uint32_t target, Rng&) {
    ++calls;
    return GenerationResult{target, calls % 2 == 1 ? std::vector<TokenId>{} : std::vector<TokenId>{1, 2}, false};
  };
  const PseudoGenerator always_empty = [](const TokenSeq&, std::uint32_t target, Rng&) {
    return GenerationResult{target, {}, false};
  };
  TrainConfig tc;
  const auto sources = training_sources(ds, Strategy::kLoReTTa, tc);
  const auto plan = transitive_plan(sources[0], kText, 3);
  ASSERT_TRUE(plan);
  Gradients<float> g(cfg);
  Rng rng(1);
  auto r = transitive_step(p, layout, sources[0], {0, 1, 2}, *plan, empty_once, false, rng, g, 1.0f);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_EQ(calls, 6);
  ASSERT_TRUE(r.loss);
  r = transitive_step(p, layout, sources[0], {0, 1, 2}, *plan, always_empty, false, rng, g, 1.0f);
  EXPECT_EQ(r.skipped, 3u);
  EXPECT_FALSE(r.loss);
}

TEST(Transitive, StopGradientMatchesFixedSequenceGradient) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  auto cfg = small_model(layout);
  cfg.d_model = 16;
  const auto p = init_params<double>(cfg, 6);
  TrainConfig tc;
  const auto sources = training_sources(ds, Strategy::kLoReTTa, tc);
  const auto plan = transitive_plan(sources[1], kText, 3);  // (B,C): generates A, observes C
  ASSERT_TRUE(plan);
  EXPECT_EQ(plan->missing, static_cast<std::uint32_t>(kImage));
  const std::vector<std::size_t> max_len = {64, 16, 16};
  const auto gen = model_generator(p, layout, max_len, SamplingOptions{});
  Gradients<double> g(cfg);
  Rng rng(2);
  const auto r = transitive_step(p, layout, sources[1], {0, 1}, *plan, gen, false, rng, g, 1.0);
  ASSERT_EQ(r.seqs.size(), 2u);
  Gradients<double> direct(cfg);
  backward(p, std::span<const AssembledSequence>(r.seqs), direct);
  EXPECT_TRUE(g.data() == direct.data());
  const auto fd = testing_support::gradient_check(p, r.seqs, 40, 1e-5, 3);
  EXPECT_LT(fd.max_rel_error, 1e-5) << fd.worst_tensor;
}

TEST(Pretrain, LorettaRequiresWarmStart) {
  PretrainOptions o;
  o.strategy = Strategy::kLoReTTa;
  o.train.schedule = Schedule{1e-7, 6e-4, 6e-5, 1, 2};
  try {
    pretrain(small_dataset(), o);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("warm-start"), std::string::npos);
  }
}

TEST(Pretrain, OverfitsSingleBatch) {
  const auto& ds = small_dataset();
  const auto layout = ds.layout(1);
  auto cfg = small_model(layout);
  auto p = init_params<float>(cfg, 1);
  TrainConfig tc;
  tc.batch_size = 4;
  const auto sources = training_sources(ds, Strategy::kGPT, tc);
  Loader loader(sources[0].size(), Rng(0));
  Rng rng(0);
  const auto mb = make_micro_batch(sources[0], 0, loader, Strategy::kGPT, tc, layout, 256, rng);
  const Schedule sched{1e-7, 3e-3, 3e-4, 50, 500};
  OptimizerState<float> st(p.data().size());
  Gradients<float> g(cfg);
  double loss = 0;
  for (int step = 0; step < 500; ++step) {
    g.set_zero();
    loss = backward(p, std::span<const AssembledSequence>(mb.seqs), g).mean;
    clip_grads<float>(g.data(), 1.0);
    adamw_step(p, g, st, lr_at_step(sched, step), AdamWConfig{});
  }
  EXPECT_LT(nll_loss(forward(p, std::span<const AssembledSequence>(mb.seqs)), std::span<const AssembledSequence>(mb.seqs)).mean, 0.1)
      << "last training loss " << loss;
}

TEST(Pretrain, ResumeReproducesTrajectory) {
  const auto& ds = small_dataset();
  const auto dir = testing_support::temp_dir("resume");
  PretrainOptions o;
  o.strategy = Strategy::kC2M3;
  o.model = small_model(ds.layout(1));
  o.train.batch_size = 2;
  o.train.schedule = Schedule{1e-7, 1e-3, 1e-4, 10, 40};
  o.train.ckpt_every = 20;
  o.train.log_every = 10;
  o.train.seed = 5;
  o.out = dir / "full";
  const auto full = pretrain(ds, o);

  PretrainOptions r;
  r.resume = dir / "full" / checkpoint_name(20);
  r.out = dir / "resumed";
  const auto resumed = pretrain(ds, r);
  ASSERT_EQ(resumed.steps.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(resumed.steps[i].loss, full.steps[20 + i].loss) << i;
  EXPECT_TRUE(resumed.checkpoint.params.data() == full.checkpoint.params.data());
  EXPECT_TRUE(read_file(dir / "full" / "final.bin") == read_file(dir / "resumed" / "final.bin"));

  // A second identical run is byte-identical.
  o.out = dir / "again";
  pretrain(ds, o);
  EXPECT_TRUE(read_file(dir / "full" / "final.bin") == read_file(dir / "again" / "final.bin"));
  fs::remove_all(dir);
}

TEST(Pretrain, LorettaWarmStartRunsTransitiveSteps) {
  const auto& ds = small_dataset();
  const auto dir = testing_support::temp_dir("loretta");
  PretrainOptions o;
  o.strategy = Strategy::kC2M3;
  o.model = small_model(ds.layout(1));
  o.train.batch_size = 2;
  o.train.schedule = Schedule{1e-7, 1e-3, 1e-4, 2, 6};
  o.out = dir / "c2m3";
  pretrain(ds, o);

  PretrainOptions l = o;
  l.strategy = Strategy::kLoReTTa;
  l.init_from = dir / "c2m3" / "final.bin";
  l.train.transitive_mix = 1.0;
  l.out = dir / "loretta";
  const auto res = pretrain(ds, l);
  for (const auto& s : res.steps) {
    EXPECT_TRUE(s.transitive);
    for (const auto& [k, v] : s.loss_by_source) EXPECT_EQ(k.rfind("transitive:", 0), 0u);
  }
  EXPECT_EQ(res.checkpoint.strategy, "loretta");
  fs::remove_all(dir);
}

}  // namespace
}  // namespace loretta
