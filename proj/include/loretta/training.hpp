#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loretta/checkpoint.hpp"
#include "loretta/datagen.hpp"
#include "loretta/errors.hpp"
#include "loretta/model.hpp"
#include "loretta/optim.hpp"
#include "loretta/rng.hpp"
#include "loretta/sequence.hpp"

namespace loretta {

enum class Strategy { kCM2, kC2M3, kLoReTTa, kGPT };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kCM2: return "cm2";
    case Strategy::kC2M3: return "c2m3";
    case Strategy::kLoReTTa: return "loretta";
    case Strategy::kGPT: return "gpt";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "cm2") return Strategy::kCM2;
  if (s == "c2m3") return Strategy::kC2M3;
  if (s == "loretta") return Strategy::kLoReTTa;
  if (s == "gpt") return Strategy::kGPT;
  throw InputError("unknown strategy '" + s + "' (expected cm2, c2m3, loretta or gpt)");
}

struct TrainConfig {
  int batch_size = 8;
  int accumulation = 2;
  AdamWConfig adamw;
  double grad_clip = 1.0;
  Schedule schedule;
  MaskPolicy mask;
  double transitive_mix = 0.5;
  std::string link_modality = "B";
  SamplingOptions sampling;
  bool transitive_commutative = false;
  std::string cm2_modality = "B";
  bool include_unimodal = false;
  std::uint64_t seed = 0;
  int ckpt_every = 1000;
  int log_every = 50;

  void validate() const {
    if (batch_size < 1 || accumulation < 1) throw InputError("train: batch_size and accumulation must be >= 1");
    if (!(transitive_mix >= 0 && transitive_mix <= 1)) throw InputError("train: transitive_mix must be in [0,1]");
    if (!(grad_clip > 0)) throw InputError("train: grad_clip must be > 0");
    if (ckpt_every < 1 || log_every < 1) throw InputError("train: ckpt_every and log_every must be >= 1");
    schedule.validate();
    mask.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"accumulation", c.accumulation},
       {"beta1", c.adamw.beta1},
       {"beta2", c.adamw.beta2},
       {"eps", c.adamw.eps},
       {"weight_decay", c.adamw.weight_decay},
       {"grad_clip", c.grad_clip},
       {"lr_start", c.schedule.lr_start},
       {"lr_peak", c.schedule.lr_peak},
       {"lr_final", c.schedule.lr_final},
       {"warmup_steps", c.schedule.warmup_steps},
       {"total_steps", c.schedule.total_steps},
       {"mask_apply_prob", c.mask.apply_prob},
       {"mask_n_spans", c.mask.n_spans},
       {"mask_span_frac_max", c.mask.span_frac_max},
       {"transitive_mix", c.transitive_mix},
       {"link_modality", c.link_modality},
       {"temperature", c.sampling.temperature},
       {"top_k", c.sampling.top_k},
       {"transitive_commutative", c.transitive_commutative},
       {"cm2_modality", c.cm2_modality},
       {"include_unimodal", c.include_unimodal},
       {"seed", c.seed},
       {"ckpt_every", c.ckpt_every},
       {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.at("batch_size").get<int>();
  c.accumulation = j.at("accumulation").get<int>();
  c.adamw.beta1 = j.at("beta1").get<double>();
  c.adamw.beta2 = j.at("beta2").get<double>();
  c.adamw.eps = j.at("eps").get<double>();
  c.adamw.weight_decay = j.at("weight_decay").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.schedule.lr_start = j.at("lr_start").get<double>();
  c.schedule.lr_peak = j.at("lr_peak").get<double>();
  c.schedule.lr_final = j.at("lr_final").get<double>();
  c.schedule.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  c.schedule.total_steps = j.at("total_steps").get<std::int64_t>();
  c.mask.apply_prob = j.at("mask_apply_prob").get<double>();
  c.mask.n_spans = j.at("mask_n_spans").get<std::uint32_t>();
  c.mask.span_frac_max = j.at("mask_span_frac_max").get<double>();
  c.transitive_mix = j.at("transitive_mix").get<double>();
  c.link_modality = j.at("link_modality").get<std::string>();
  c.sampling.temperature = j.at("temperature").get<double>();
  c.sampling.top_k = j.at("top_k").get<int>();
  c.transitive_commutative = j.at("transitive_commutative").get<bool>();
  c.cm2_modality = j.at("cm2_modality").get<std::string>();
  c.include_unimodal = j.at("include_unimodal").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.ckpt_every = j.at("ckpt_every").get<int>();
  c.log_every = j.at("log_every").get<int>();
}

// ---------------------------------------------------------------------------
// Data sources and loaders

// A stream of records from one dataset subset, restricted to `modalities`.
struct Source {
  std::string name;
  const Subset* subset = nullptr;
  std::vector<std::uint32_t> modalities;

  std::vector<TokenSeq> segments(std::size_t i) const {
    std::vector<TokenSeq> out;
    for (auto m : modalities) out.push_back(subset->records.at(i).segment(m));
    return out;
  }
  std::size_t size() const { return subset->records.size(); }
};

// Training sources for a strategy: CM2 uses every training subset holding
// its modality, projected to that modality; the pair strategies use the
// multimodal training subsets (plus unimodal ones on request).
inline std::vector<Source> training_sources(const Dataset& ds, Strategy s, const TrainConfig& cfg) {
  std::vector<Source> out;
  for (const auto& [name, sub] : ds.subsets) {
    if (!sub.training || sub.records.empty()) continue;
    if (s == Strategy::kCM2) {
      const auto m = static_cast<std::uint32_t>(
          std::find(kModalityNames.begin(), kModalityNames.end(), cfg.cm2_modality) - kModalityNames.begin());
      if (m >= kModalityNames.size()) throw InputError("train: unknown cm2_modality '" + cfg.cm2_modality + "'");
      if (std::find(sub.modalities.begin(), sub.modalities.end(), m) != sub.modalities.end())
        out.push_back({name, &sub, {m}});
    } else if (sub.modalities.size() >= 2 || cfg.include_unimodal) {
      out.push_back({name, &sub, sub.modalities});
    }
  }
  if (out.empty()) throw InputError("train: dataset has no training records for strategy " + strategy_name(s));
  return out;
}

struct LoaderState {
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;
};

// Shuffled epochs over record indices. The permutation of an epoch is a pure
// function of (base stream, epoch), so (epoch, cursor) is the whole state.
class Loader {
 public:
  Loader(std::size_t n, Rng base) : n_(n), base_(base) {
    if (n_ == 0) throw InputError("Loader: empty source");
    reshuffle();
  }

  std::size_t next() {
    if (st_.cursor == n_) {
      ++st_.epoch;
      st_.cursor = 0;
      reshuffle();
    }
    return perm_[st_.cursor++];
  }

  const LoaderState& state() const { return st_; }
  void restore(const LoaderState& s) {
    if (s.cursor > n_) throw FormatError("Loader: cursor beyond source size");
    st_ = s;
    reshuffle();
  }

 private:
  void reshuffle() {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng r = base_.split(st_.epoch);
    r.shuffle(perm_.begin(), perm_.end());
  }

  std::size_t n_;
  Rng base_;
  LoaderState st_;
  std::vector<std::size_t> perm_;
};

struct MicroBatch {
  std::size_t source = 0;
  std::vector<AssembledSequence> seqs;
  std::vector<std::size_t> records;
  std::size_t masked = 0;
};

// One micro-batch from `source`: pairs go through assemble (commutative
// unless GPT) and then the mask transform (unless GPT).
inline MicroBatch make_micro_batch(const Source& src, std::size_t source_index, Loader& loader, Strategy strategy,
                                   const TrainConfig& cfg, const TokenLayout& layout, std::size_t max_context,
                                   Rng& rng) {
  MicroBatch mb;
  mb.source = source_index;
  const bool commutative = strategy != Strategy::kGPT;
  const bool masked = strategy != Strategy::kGPT;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const auto idx = loader.next();
    const auto segs = src.segments(idx);
    auto seq = assemble(layout, std::span<const TokenSeq>(segs), commutative, rng, max_context);
    if (masked) {
      auto res = causal_mask_transform(layout, seq, cfg.mask, rng);
      if (res.applied) ++mb.masked;
      seq = std::move(res.seq);
    }
    mb.records.push_back(idx);
    mb.seqs.push_back(std::move(seq));
  }
  return mb;
}

// Accumulation cycle: micro-batch i comes from source (first + i) mod n.
inline std::vector<MicroBatch> make_batch(const std::vector<Source>& sources, std::vector<Loader>& loaders,
                                          std::size_t first, Strategy strategy, const TrainConfig& cfg,
                                          const TokenLayout& layout, std::size_t max_context, Rng& rng) {
  std::vector<MicroBatch> out;
  for (int i = 0; i < cfg.accumulation; ++i) {
    const auto s = (first + static_cast<std::size_t>(i)) % sources.size();
    out.push_back(make_micro_batch(sources[s], s, loaders[s], strategy, cfg, layout, max_context, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transitive modeling

// Produces a pseudo segment of modality `target` from a linking segment.
using PseudoGenerator = std::function<GenerationResult(const TokenSeq& link, std::uint32_t target, Rng& rng)>;

template <typename T>
PseudoGenerator model_generator(const Parameters<T>& p, const TokenLayout& layout,
                                const std::vector<std::size_t>& max_len, const SamplingOptions& opt) {
  return [&p, layout, max_len, opt](const TokenSeq& link, std::uint32_t target, Rng& rng) {
    AssembledSequence prefix;
    append_segment(prefix, layout, link);
    return generate(p, layout, prefix, target, max_len.at(target), opt, rng);
  };
}

// [BOS_m pseudo EOS_m ; BOS_obs obs EOS_obs], loss only on targets inside the
// observed segment (its content and EOS_obs). With `swap` the observed
// segment comes first and the loss still covers only observed targets.
inline AssembledSequence build_transitive_sequence(const TokenLayout& layout, const TokenSeq& pseudo,
                                                   const TokenSeq& obs, bool swap = false) {
  AssembledSequence s;
  const auto mark = [&](const TokenSeq& seg, bool loss) {
    const auto start = s.size();
    append_segment(s, layout, seg);
    s.loss_mask[start] = 0;
    for (auto i = start + 1; i < s.size(); ++i) s.loss_mask[i] = loss ? 1 : 0;
  };
  if (swap) {
    mark(obs, true);
    mark(pseudo, false);
  } else {
    mark(pseudo, false);
    mark(obs, true);
  }
  return s;
}

struct TransitivePlan {
  std::uint32_t link = 0;
  std::uint32_t obs = 0;
  std::uint32_t missing = 0;
};

// For a pair subset holding the link modality: the other member is observed
// and the modality absent from the subset is generated.
inline std::optional<TransitivePlan> transitive_plan(const Source& src, std::uint32_t link, std::uint32_t n_modalities) {
  if (src.modalities.size() != 2) return std::nullopt;
  const auto& ms = src.modalities;
  if (ms[0] != link && ms[1] != link) return std::nullopt;
  TransitivePlan p;
  p.link = link;
  p.obs = ms[0] == link ? ms[1] : ms[0];
  for (std::uint32_t m = 0; m < n_modalities; ++m)
    if (m != ms[0] && m != ms[1]) {
      p.missing = m;
      return p;
    }
  return std::nullopt;
}

struct TransitiveSample {
  std::optional<AssembledSequence> seq;  // empty when skipped
  int attempts = 0;
};

// Generates the pseudo segment (resampling once on an empty result with a
// fresh split) and builds the transitive sequence. No gradient flows through
// generation; the caller runs backward on the returned sequence only.
inline TransitiveSample make_transitive_sample(const TokenLayout& layout, const TokenSeq& link, const TokenSeq& obs,
                                               std::uint32_t missing, const PseudoGenerator& gen, bool commutative,
                                               Rng& rng) {
  TransitiveSample out;
  for (std::uint64_t attempt = 0; attempt < 2; ++attempt) {
    Rng r = rng.split(attempt);
    ++out.attempts;
    const auto g = gen(link, missing, r);
    if (g.tokens.empty()) continue;
    const bool swap = commutative && r.bernoulli(0.5);
    out.seq = build_transitive_sequence(layout, g.as_token_seq(), obs, swap);
    break;
  }
  rng.next_u64();
  return out;
}

struct TransitiveStepResult {
  std::optional<LossResult> loss;
  std::vector<AssembledSequence> seqs;
  std::size_t skipped = 0;
};

// Transitive step over records of a pair source: builds one pseudo-pair per
// record and accumulates scale * gradient of their mean loss into `grads`.
template <typename T>
TransitiveStepResult transitive_step(const Parameters<T>& p, const TokenLayout& layout, const Source& src,
                                     const std::vector<std::size_t>& records, const TransitivePlan& plan,
                                     const PseudoGenerator& gen, bool commutative, Rng& rng, Gradients<T>& grads,
                                     T scale) {
  TransitiveStepResult res;
  for (auto idx : records) {
    const auto& rec = src.subset->records.at(idx);
    Rng r = rng.split(idx);
    rng.next_u64();
    auto ts = make_transitive_sample(layout, rec.segment(plan.link), rec.segment(plan.obs), plan.missing, gen,
                                     commutative, r);
    if (ts.seq)
      res.seqs.push_back(std::move(*ts.seq));
    else
      ++res.skipped;
  }
  if (!res.seqs.empty()) res.loss = backward(p, std::span<const AssembledSequence>(res.seqs), grads, scale);
  return res;
}

// ---------------------------------------------------------------------------
// Pre-training loop

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  bool transitive = false;
  std::map<std::string, double> loss_by_source;
  std::size_t sequences = 0;
  std::size_t masked = 0;
  std::size_t skipped = 0;
};

struct PretrainOptions {
  Strategy strategy = Strategy::kC2M3;
  TrainConfig train;
  ModelConfig model;                          // vocab_total / n_modalities are filled from the dataset
  std::filesystem::path out;                  // empty: no files written
  std::optional<std::filesystem::path> resume;
  std::optional<std::filesystem::path> init_from;
  std::optional<PseudoGenerator> generator;   // overrides model-based generation
  std::function<void(const StepRecord&)> on_step;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> steps;
  std::size_t transitive_skips = 0;
};

inline std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%08lld.bin", static_cast<long long>(step));
  return buf;
}

inline ModelConfig model_for_dataset(ModelConfig m, const TokenLayout& layout) {
  m.vocab_total = static_cast<int>(layout.vocab_total());
  m.n_modalities = static_cast<int>(layout.n_modalities());
  m.validate();
  return m;
}

inline PretrainResult pretrain(const Dataset& ds, PretrainOptions opt) {
  Checkpoint ck;
  std::vector<LoaderState> restored;
  std::size_t skip_total = 0;

  if (opt.resume) {
    ck = Checkpoint::load(*opt.resume);
    opt.strategy = parse_strategy(ck.strategy);
    opt.train = ck.train.get<TrainConfig>();
    if (!ck.optimizer) throw FormatError("resume: checkpoint carries no optimizer state");
    for (const auto& [e, c] : ck.state.at("loaders").get<std::vector<std::pair<std::uint64_t, std::uint64_t>>>())
      restored.push_back({e, c});
    skip_total = ck.state.value("transitive_skips", std::size_t{0});
  }
  auto& cfg = opt.train;
  cfg.validate();
  if (opt.strategy == Strategy::kLoReTTa && !opt.init_from && !opt.resume)
    throw InputError("strategy loretta requires a warm-start checkpoint (--init-from, e.g. a C2M3 checkpoint)");

  const TokenLayout layout = ds.layout(cfg.mask.n_spans);
  if (opt.resume) {
    if (!(ck.layout == layout)) throw InputError("resume: checkpoint token layout does not match the dataset");
  } else if (opt.init_from) {
    auto warm = Checkpoint::load(*opt.init_from);
    if (!(warm.layout == layout)) throw InputError("init-from: checkpoint token layout does not match the dataset");
    ck.model = warm.model;
    ck.params = std::move(warm.params);
  } else {
    ck.model = model_for_dataset(opt.model, layout);
    ck.params = init_params<float>(ck.model, cfg.seed);
  }
  ck.layout = layout;
  ck.strategy = strategy_name(opt.strategy);
  ck.train = cfg;
  ck.tokenizer = ds.tokenizer;
  if (!ck.optimizer) ck.optimizer = OptimizerState<float>(ck.params.data().size());
  auto& params = ck.params;
  auto& ost = *ck.optimizer;

  const auto sources = training_sources(ds, opt.strategy, cfg);
  const Rng root(cfg.seed);
  std::vector<Loader> loaders;
  for (std::size_t i = 0; i < sources.size(); ++i)
    loaders.emplace_back(sources[i].size(), root.split(0x10ad).split(i));
  if (!restored.empty()) {
    if (restored.size() != loaders.size()) throw FormatError("resume: loader count mismatch");
    for (std::size_t i = 0; i < loaders.size(); ++i) loaders[i].restore(restored[i]);
  }

  std::vector<std::size_t> max_len(layout.n_modalities());
  for (std::uint32_t m = 0; m < layout.n_modalities(); ++m) max_len[m] = ds.nominal_length(m);
  const std::uint32_t link = layout.modality_index(cfg.link_modality);
  const PseudoGenerator gen = opt.generator ? *opt.generator : model_generator(params, layout, max_len, cfg.sampling);
  std::vector<std::optional<TransitivePlan>> plans;
  for (const auto& s : sources) plans.push_back(transitive_plan(s, link, layout.n_modalities()));
  if (opt.strategy == Strategy::kLoReTTa &&
      std::none_of(plans.begin(), plans.end(), [](auto& p) { return p.has_value(); }))
    throw InputError("loretta: no pair subset contains the link modality " + cfg.link_modality);

  std::ofstream metrics;
  if (!opt.out.empty()) {
    std::filesystem::create_directories(opt.out);
    metrics.open(opt.out / "metrics.jsonl", std::ios::app);
  }

  PretrainResult result;
  Gradients<float> grads(ck.model);
  const auto max_context = static_cast<std::size_t>(ck.model.max_context);
  const std::size_t n_loaders = sources.size();

  // Accumulators for the current logging interval.
  double int_loss = 0;
  std::map<std::string, std::pair<double, std::size_t>> int_by_source;
  std::size_t int_seq = 0, int_masked = 0, int_steps = 0;
  auto int_start = std::chrono::steady_clock::now();

  auto save = [&](const std::filesystem::path& path) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ls;
    for (const auto& l : loaders) ls.emplace_back(l.state().epoch, l.state().cursor);
    ck.state = {{"loaders", ls}, {"transitive_skips", skip_total}};
    ck.save(path);
  };

  for (std::int64_t step = ck.step; step < cfg.schedule.total_steps; ++step) {
    Rng rng = root.split(0x57e9).split(static_cast<std::uint64_t>(step));
    const double lr = lr_at_step(cfg.schedule, step);
    const auto first = static_cast<std::size_t>(step) * static_cast<std::size_t>(cfg.accumulation) % n_loaders;
    const bool transitive = opt.strategy == Strategy::kLoReTTa && rng.bernoulli(cfg.transitive_mix);

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.transitive = transitive;
    grads.set_zero();
    const float scale = 1.0f / static_cast<float>(cfg.accumulation);
    double loss_total = 0;
    int n_micro = 0;
    for (int i = 0; i < cfg.accumulation; ++i) {
      const auto s = (first + static_cast<std::size_t>(i)) % n_loaders;
      Rng mrng = rng.split(static_cast<std::uint64_t>(i));
      std::optional<LossResult> loss;
      std::string key = sources[s].name;
      if (transitive && plans[s]) {
        std::vector<std::size_t> recs;
        for (int b = 0; b < cfg.batch_size; ++b) recs.push_back(loaders[s].next());
        auto tr = transitive_step(params, layout, sources[s], recs, *plans[s], gen, cfg.transitive_commutative, mrng,
                                  grads, scale);
        rec.skipped += tr.skipped;
        rec.sequences += tr.seqs.size();
        loss = tr.loss;
        key = "transitive:" + key;
      } else {
        auto mb = make_micro_batch(sources[s], s, loaders[s], opt.strategy == Strategy::kLoReTTa ? Strategy::kC2M3
                                                                                                  : opt.strategy,
                                   cfg, layout, max_context, mrng);
        loss = backward(params, std::span<const AssembledSequence>(mb.seqs), grads, scale);
        rec.sequences += mb.seqs.size();
        rec.masked += mb.masked;
      }
      if (!loss) continue;
      if (!std::isfinite(loss->mean)) throw NumericalError("non-finite loss at step " + std::to_string(step));
      rec.loss_by_source[key] = loss->mean;
      loss_total += loss->mean;
      ++n_micro;
    }
    skip_total += rec.skipped;
    rec.loss = n_micro ? loss_total / n_micro : std::numeric_limits<double>::quiet_NaN();
    if (n_micro < cfg.accumulation && n_micro > 0) {
      // Skipped micro-batches contribute nothing; renormalize to their mean.
      const float fix = static_cast<float>(cfg.accumulation) / static_cast<float>(n_micro);
      for (auto& g : grads.data()) g *= fix;
    }
    if (n_micro > 0) {
      rec.grad_norm = clip_grads<float>(grads.data(), cfg.grad_clip);
      adamw_step(params, grads, ost, lr, cfg.adamw);
      for (float v : params.data())
        if (!std::isfinite(v)) throw NumericalError("non-finite parameter after step " + std::to_string(step));
    }
    ck.step = step + 1;

    if (n_micro > 0) {
      int_loss += rec.loss;
      ++int_steps;
    }
    for (const auto& [k, v] : rec.loss_by_source) {
      int_by_source[k].first += v;
      ++int_by_source[k].second;
    }
    int_seq += rec.sequences;
    int_masked += rec.masked;
    if (opt.on_step) opt.on_step(rec);
    result.steps.push_back(rec);

    if (metrics.is_open() && (ck.step % cfg.log_every == 0 || ck.step == cfg.schedule.total_steps)) {
      const auto now = std::chrono::steady_clock::now();
      nlohmann::json by = nlohmann::json::object();
      for (const auto& [k, v] : int_by_source) by[k] = v.first / static_cast<double>(v.second);
      nlohmann::json line = {
          {"step", ck.step},
          {"lr", lr},
          {"loss", int_steps ? nlohmann::json(int_loss / static_cast<double>(int_steps)) : nlohmann::json(nullptr)},
          {"loss_by_source", by},
          {"masked_fraction", int_seq ? static_cast<double>(int_masked) / static_cast<double>(int_seq) : 0.0},
          {"transitive_skip_count", skip_total},
          {"wall_ms", std::chrono::duration<double, std::milli>(now - int_start).count()}};
      metrics << line.dump() << "\n" << std::flush;
      int_loss = 0;
      int_by_source.clear();
      int_seq = int_masked = int_steps = 0;
      int_start = now;
    }
    if (!opt.out.empty() && ck.step % cfg.ckpt_every == 0 && ck.step != cfg.schedule.total_steps)
      save(opt.out / checkpoint_name(ck.step));
  }
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ls;
  for (const auto& l : loaders) ls.emplace_back(l.state().epoch, l.state().cursor);
  ck.state = {{"loaders", ls}, {"transitive_skips", skip_total}};
  if (!opt.out.empty()) {
    ck.save(opt.out / checkpoint_name(ck.step));
    ck.save(opt.out / "final.bin");
  }
  result.transitive_skips = skip_total;
  result.checkpoint = std::move(ck);
  return result;
}

}  // namespace loretta
