#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loretta/datagen.hpp"
#include "loretta/errors.hpp"
#include "loretta/model.hpp"
#include "loretta/rng.hpp"
#include "loretta/sequence.hpp"
#include "loretta/training.hpp"

namespace loretta {

// Worker count from LORETTA_LAB_THREADS, else the hardware concurrency.
inline unsigned lab_threads() {
  if (const char* env = std::getenv("LORETTA_LAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to lab_threads() workers.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(lab_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Perplexity

// Segments in the given order, no shuffle, no mask transform. Targets are
// every content token and every EOS.
inline AssembledSequence evaluation_sequence(const TokenLayout& layout, const std::vector<TokenSeq>& segments) {
  AssembledSequence s;
  for (const auto& seg : segments) append_segment(s, layout, seg);
  for (std::size_t i = 0; i < s.size(); ++i)
    s.loss_mask[i] = (layout.is_content(s.tokens[i]) || layout.is_eos(s.tokens[i])) ? 1 : 0;
  return s;
}

inline std::vector<AssembledSequence> evaluation_sequences(const TokenLayout& layout, const Subset& sub,
                                                           const std::vector<std::uint32_t>& combo) {
  if (sub.records.empty()) throw InputError("subset " + sub.name + " is empty");
  for (auto m : combo)
    if (std::find(sub.modalities.begin(), sub.modalities.end(), m) == sub.modalities.end())
      throw InputError("subset " + sub.name + " has no modality " + layout.name(m));
  std::vector<AssembledSequence> out;
  for (const auto& r : sub.records) {
    std::vector<TokenSeq> segs;
    for (auto m : combo) segs.push_back(r.segment(m));
    out.push_back(evaluation_sequence(layout, segs));
  }
  return out;
}

struct NllTotal {
  double sum = 0;
  std::size_t count = 0;
  double mean() const { return sum / static_cast<double>(count); }
};

// Sum of target NLLs given precomputed logits.
template <typename T>
NllTotal accumulate_nll(const ForwardOutput<T>& out, std::span<const AssembledSequence> seqs) {
  const auto l = nll_loss(out, seqs);
  return {l.sum, l.count};
}

// Target NLL over `seqs`, evaluated in fixed chunks and reduced in chunk
// order so the result does not depend on the worker count.
template <typename T>
NllTotal total_nll(const Parameters<T>& p, std::span<const AssembledSequence> seqs, std::size_t chunk = 16) {
  if (seqs.empty()) throw InputError("perplexity: no sequences");
  const std::size_t n_chunks = (seqs.size() + chunk - 1) / chunk;
  std::vector<NllTotal> parts(n_chunks);
  parallel_for(n_chunks, [&](std::size_t c) {
    const auto b = c * chunk;
    const auto e = std::min(seqs.size(), b + chunk);
    // Each sequence separately: the result is independent of chunking.
    for (auto i = b; i < e; ++i) {
      const auto one = seqs.subspan(i, 1);
      const auto t = accumulate_nll(forward(p, one), one);
      parts[c].sum += t.sum;
      parts[c].count += t.count;
    }
  });
  NllTotal total;
  for (const auto& t : parts) {
    total.sum += t.sum;
    total.count += t.count;
  }
  if (total.count == 0) throw InputError("perplexity: no target tokens");
  return total;
}

struct PPLReport {
  std::vector<std::string> combo;
  double mean_nll = 0;
  double ppl = 0;
  std::size_t n_tokens = 0;
};

inline PPLReport make_ppl_report(std::vector<std::string> combo, const NllTotal& t) {
  PPLReport r;
  r.combo = std::move(combo);
  r.mean_nll = t.mean();
  r.ppl = std::exp(r.mean_nll);
  r.n_tokens = t.count;
  return r;
}

template <typename T>
PPLReport perplexity(const Parameters<T>& p, const TokenLayout& layout, const Subset& sub,
                     const std::vector<std::uint32_t>& combo) {
  const auto seqs = evaluation_sequences(layout, sub, combo);
  std::vector<std::string> names;
  for (auto m : combo) names.push_back(layout.name(m));
  return make_ppl_report(names, total_nll(p, std::span<const AssembledSequence>(seqs)));
}

// ---------------------------------------------------------------------------
// Sigma membership

struct MembershipVerdict {
  double ratio = 0;
  double sigma = 3.0;
  bool same_modality = false;
  double nll_i = 0;
  double nll_j = 0;
};

inline void check_vocab(const ModelConfig& c, std::span<const AssembledSequence> seqs) {
  for (const auto& s : seqs)
    for (auto t : s.tokens)
      if (t >= static_cast<std::uint32_t>(c.vocab_total))
        throw InputError("membership: token id " + std::to_string(t) + " outside the model vocabulary");
}

// Ratio of per-token NLL on data_i to per-token NLL on data_j under model_j;
// same modality iff ratio <= sigma^2.
template <typename T>
MembershipVerdict sigma_membership(const Parameters<T>& model_j, std::span<const AssembledSequence> data_i,
                                   std::span<const AssembledSequence> data_j, double sigma = 3.0) {
  check_vocab(model_j.config(), data_i);
  check_vocab(model_j.config(), data_j);
  MembershipVerdict v;
  v.sigma = sigma;
  v.nll_i = total_nll(model_j, data_i).mean();
  v.nll_j = total_nll(model_j, data_j).mean();
  v.ratio = v.nll_i / v.nll_j;
  v.same_modality = v.ratio <= sigma * sigma;
  return v;
}

// ---------------------------------------------------------------------------
// Linear probing

struct ProbeConfig {
  int n_per_class = 20;
  int epochs = 0;  // 0: 100 for one modality, 500 for several
  int batch_size = 16;
  double lr = 0.1;
  double momentum = 0.9;
  int trials = 3;
  bool standardize = true;

  int epochs_for(std::size_t n_modalities) const { return epochs > 0 ? epochs : (n_modalities > 1 ? 500 : 100); }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"n_per_class", c.n_per_class}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
       {"lr", c.lr},                   {"momentum", c.momentum}, {"trials", c.trials},
       {"standardize", c.standardize}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c.n_per_class = j.at("n_per_class").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.trials = j.at("trials").get<int>();
  c.standardize = j.at("standardize").get<bool>();
}

struct LogisticModel {
  Eigen::MatrixXd w;  // d x C
  Eigen::RowVectorXd b;

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd s = (x * w).rowwise() + b;
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::Index arg = 0;
      s.row(i).maxCoeff(&arg);
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
  }
};

// Multinomial logistic regression by minibatch SGD with Nesterov momentum and
// a cosine learning rate decaying to 0; no weight decay.
inline LogisticModel train_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, int n_classes, int epochs,
                                    const ProbeConfig& cfg, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = x.cols();
  LogisticModel m{Eigen::MatrixXd::Zero(d, n_classes), Eigen::RowVectorXd::Zero(n_classes)};
  Eigen::MatrixXd vw = Eigen::MatrixXd::Zero(d, n_classes);
  Eigen::RowVectorXd vb = Eigen::RowVectorXd::Zero(n_classes);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const double total = static_cast<double>(per_epoch) * epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t it = 0;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += bs, ++it) {
      const auto end = std::min(n, start + bs);
      const auto k = static_cast<Eigen::Index>(end - start);
      Eigen::MatrixXd xb(k, d);
      for (Eigen::Index r = 0; r < k; ++r) xb.row(r) = x.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(r)]));
      Eigen::MatrixXd p = (xb * m.w).rowwise() + m.b;
      for (Eigen::Index r = 0; r < k; ++r) {
        p.row(r).array() -= p.row(r).maxCoeff();
        p.row(r) = p.row(r).array().exp().matrix();
        p.row(r) /= p.row(r).sum();
        p(r, y[order[start + static_cast<std::size_t>(r)]]) -= 1.0;
      }
      p /= static_cast<double>(k);
      const Eigen::MatrixXd gw = xb.transpose() * p;
      const Eigen::RowVectorXd gb = p.colwise().sum();
      const double lr = 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / total));
      vw = cfg.momentum * vw + gw;
      vb = cfg.momentum * vb + gb;
      m.w -= lr * (gw + cfg.momentum * vw);
      m.b -= lr * (gb + cfg.momentum * vb);
    }
  }
  return m;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& y) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += pred[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(y.size());
}

struct ProbeResult {
  double accuracy = 0;                // mean over trials
  std::vector<double> trial_accuracy;
  int n_train_per_class = 0;
  std::uint64_t seed = 0;
};

// Draws n_per_class training rows per class from the pool (fresh draw per
// trial), fits the probe, and reports mean test accuracy.
inline ProbeResult linear_probe(const Eigen::MatrixXd& pool_x, const std::vector<int>& pool_y,
                                const Eigen::MatrixXd& test_x, const std::vector<int>& test_y, int n_classes,
                                std::size_t n_modalities, const ProbeConfig& cfg, std::uint64_t seed) {
  if (pool_x.rows() != static_cast<Eigen::Index>(pool_y.size()) ||
      test_x.rows() != static_cast<Eigen::Index>(test_y.size()) || pool_x.cols() != test_x.cols())
    throw InputError("linear_probe: feature/label shape mismatch");
  if (test_y.empty()) throw InputError("linear_probe: empty test set");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < pool_y.size(); ++i) by_class.at(static_cast<std::size_t>(pool_y[i])).push_back(i);
  for (int c = 0; c < n_classes; ++c) {
    const auto have = by_class[static_cast<std::size_t>(c)].size();
    if (have == 0) throw InputError("linear_probe: class " + std::to_string(c) + " absent from the training pool");
    if (have < static_cast<std::size_t>(cfg.n_per_class))
      throw InputError("linear_probe: class " + std::to_string(c) + " has " + std::to_string(have) + " samples, need " +
                       std::to_string(cfg.n_per_class));
  }
  ProbeResult res;
  res.seed = seed;
  res.n_train_per_class = cfg.n_per_class;
  const Rng root(seed);
  for (int trial = 0; trial < cfg.trials; ++trial) {
    Rng rng = root.split(static_cast<std::uint64_t>(trial));
    std::vector<std::size_t> pick;
    for (auto cls : by_class) {
      rng.shuffle(cls.begin(), cls.end());
      pick.insert(pick.end(), cls.begin(), cls.begin() + cfg.n_per_class);
    }
    Eigen::MatrixXd xtr(static_cast<Eigen::Index>(pick.size()), pool_x.cols());
    std::vector<int> ytr;
    for (std::size_t i = 0; i < pick.size(); ++i) {
      xtr.row(static_cast<Eigen::Index>(i)) = pool_x.row(static_cast<Eigen::Index>(pick[i]));
      ytr.push_back(pool_y[pick[i]]);
    }
    Eigen::MatrixXd xte = test_x;
    if (cfg.standardize) {
      const Eigen::RowVectorXd mu = xtr.colwise().mean();
      Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() /
                               std::max<double>(1.0, static_cast<double>(xtr.rows() - 1)))
                                  .sqrt();
      for (Eigen::Index j = 0; j < sd.size(); ++j)
        if (!(sd(j) > 1e-12)) sd(j) = 1.0;
      xtr = (xtr.rowwise() - mu).array().rowwise() / sd.array();
      xte = (xte.rowwise() - mu).array().rowwise() / sd.array();
    }
    const auto model = train_logistic(xtr, ytr, n_classes, cfg.epochs_for(n_modalities), cfg, rng);
    res.trial_accuracy.push_back(accuracy(model.predict(xte), test_y));
  }
  double s = 0;
  for (double a : res.trial_accuracy) s += a;
  res.accuracy = s / static_cast<double>(res.trial_accuracy.size());
  return res;
}

template <typename T>
Eigen::MatrixXd subset_features(const Parameters<T>& p, const TokenLayout& layout, const Subset& sub,
                                const std::vector<std::uint32_t>& combo, std::vector<int>* labels) {
  auto seqs = evaluation_sequences(layout, sub, combo);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(seqs.size()), p.config().d_model);
  parallel_for(seqs.size(), [&](std::size_t i) {
    x.row(static_cast<Eigen::Index>(i)) = extract_features(p, layout, seqs[i]).template cast<double>().transpose();
  });
  if (labels) {
    labels->clear();
    for (const auto& r : sub.records) labels->push_back(static_cast<int>(r.label));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Cycle error

// NLL sum and target count of a sequence under some model.
using SequenceScorer = std::function<NllTotal(const AssembledSequence&)>;

template <typename T>
SequenceScorer model_scorer(const Parameters<T>& p) {
  return [&p](const AssembledSequence& s) {
    const std::span<const AssembledSequence> one(&s, 1);
    return accumulate_nll(forward(p, one), one);
  };
}

struct Interval {
  double mean = 0;
  double lo = 0;
  double hi = 0;
};

// Percentile bootstrap of the mean.
inline Interval bootstrap_mean(const std::vector<double>& x, int resamples, Rng& rng, double level = 0.95) {
  Interval iv;
  if (x.empty()) return iv;
  for (double v : x) iv.mean += v;
  iv.mean /= static_cast<double>(x.size());
  std::vector<double> means;
  for (int r = 0; r < resamples; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[rng.below(x.size())];
    means.push_back(s / static_cast<double>(x.size()));
  }
  std::sort(means.begin(), means.end());
  const auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::clamp(q * static_cast<double>(means.size() - 1), 0.0,
                                                         static_cast<double>(means.size() - 1)));
    return means[idx];
  };
  iv.lo = at((1.0 - level) / 2);
  iv.hi = at(1.0 - (1.0 - level) / 2);
  return iv;
}

struct CycleStats {
  std::vector<double> two_hop;  // per-sample per-token NLL of obs given the pseudo segment
  std::vector<double> one_hop;  // per-sample per-token NLL of obs given the link segment
  Interval two_hop_ci;
  Interval one_hop_ci;
  std::size_t failures = 0;
};

// For each record: ĉ is generated from the link segment, then the observed
// segment is scored after ĉ (two hops) and after the link itself (one hop).
inline CycleStats cycle_error(const TokenLayout& layout, const Subset& sub, std::uint32_t link, std::uint32_t obs,
                              std::uint32_t missing, std::size_t n, const PseudoGenerator& gen,
                              const SequenceScorer& score, Rng& rng, int resamples = 1000) {
  CycleStats st;
  n = std::min(n, sub.records.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = sub.records[i];
    Rng r = rng.split(i);
    auto ts = make_transitive_sample(layout, rec.segment(link), rec.segment(obs), missing, gen, false, r);
    if (!ts.seq) {
      ++st.failures;
      continue;
    }
    const auto two = score(*ts.seq);
    const auto one = score(build_transitive_sequence(layout, rec.segment(link), rec.segment(obs)));
    st.two_hop.push_back(two.mean());
    st.one_hop.push_back(one.mean());
  }
  Rng b = rng.split(0xb007);
  st.two_hop_ci = bootstrap_mean(st.two_hop, resamples, b);
  st.one_hop_ci = bootstrap_mean(st.one_hop, resamples, b);
  return st;
}

// JSON-lines report record.
inline nlohmann::json report_line(const std::string& kind, const std::vector<std::string>& combo, double value,
                                  std::size_t n_tokens, std::uint64_t seed, const std::string& ckpt) {
  return {{"kind", kind}, {"combo", combo}, {"value", value}, {"n_tokens", n_tokens}, {"seed", seed}, {"ckpt", ckpt}};
}

}  // namespace loretta
