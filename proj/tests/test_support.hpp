#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "loretta/datagen.hpp"
#include "loretta/model.hpp"
#include "loretta/rng.hpp"
#include "loretta/sequence.hpp"

namespace loretta::testing_support {

// 3 modalities, one sentinel: 28 content + 6 delimiters + MASK_0 + EOSPAN + PAD = 37.
inline TokenLayout tiny_layout() { return TokenLayout({"A", "B", "C"}, {10, 10, 8}, 1); }

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.vocab_total = static_cast<int>(tiny_layout().vocab_total());
  c.max_context = 12;
  c.n_modalities = 3;
  return c;
}

// Single-segment sequences of exactly `len` tokens (len >= 3).
inline std::vector<AssembledSequence> random_batch(const TokenLayout& layout, std::size_t n, std::size_t len,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AssembledSequence> out;
  for (std::size_t b = 0; b < n; ++b) {
    TokenSeq seg;
    seg.modality = static_cast<std::uint32_t>(rng.below(layout.n_modalities()));
    for (std::size_t i = 0; i + 2 < len; ++i)
      seg.tokens.push_back(static_cast<TokenId>(rng.below(layout.content_size(seg.modality))));
    AssembledSequence s;
    append_segment(s, layout, seg);
    out.push_back(std::move(s));
  }
  return out;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("loretta_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// One or two random segments, commutatively assembled.
inline AssembledSequence random_pair(const TokenLayout& layout, Rng& rng, std::size_t max_context) {
  std::vector<TokenSeq> segs;
  const auto n_seg = 1 + rng.below(2);
  const auto first = static_cast<std::uint32_t>(rng.below(layout.n_modalities()));
  for (std::uint64_t k = 0; k < n_seg; ++k) {
    TokenSeq seg;
    seg.modality = (first + static_cast<std::uint32_t>(k)) % layout.n_modalities();
    const auto len = 1 + rng.below(20);
    for (std::uint64_t i = 0; i < len; ++i)
      seg.tokens.push_back(static_cast<TokenId>(rng.below(layout.content_size(seg.modality))));
    segs.push_back(std::move(seg));
  }
  return assemble(layout, std::span<const TokenSeq>(segs), true, rng, max_context);
}

// Content tokens with their modality ids, as a multiset.
inline std::multiset<std::pair<std::uint32_t, std::uint32_t>> content_multiset(const TokenLayout& layout,
                                                                              const AssembledSequence& s) {
  std::multiset<std::pair<std::uint32_t, std::uint32_t>> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (layout.is_content(s.tokens[i])) out.emplace(s.tokens[i], s.modality[i]);
  return out;
}

struct AdamRef {
  double theta, m, v;
};

// Textbook AdamW on one scalar: decoupled decay, then the bias-corrected step.
inline AdamRef reference_adamw(double theta, double g, double m, double v, std::int64_t t, double lr, double b1,
                               double b2, double eps, double wd) {
  m = b1 * m + (1 - b1) * g;
  v = b2 * v + (1 - b2) * g * g;
  const double mhat = m / (1 - std::pow(b1, static_cast<double>(t)));
  const double vhat = v / (1 - std::pow(b2, static_cast<double>(t)));
  theta = theta - lr * wd * theta;
  theta = theta - lr * mhat / (std::sqrt(vhat) + eps);
  return {theta, m, v};
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

// Central finite differences of the mean NLL over `n_coords` random
// parameter coordinates, compared to backward(). Relative error uses
// max(|analytic|, |numeric|, floor) as denominator; the floor sits above the
// ~1e-10 absolute noise of central differences at h = 1e-5.
inline GradCheckResult gradient_check(const Parameters<double>& p, const std::vector<AssembledSequence>& batch,
                                      std::size_t n_coords, double h, std::uint64_t seed, double floor = 1e-4) {
  const std::span<const AssembledSequence> b(batch);
  Gradients<double> g(p.config());
  backward(p, b, g);
  auto loss_at = [&](const Parameters<double>& q) { return nll_loss(forward(q, b), b).mean; };

  GradCheckResult res;
  Rng rng(seed);
  auto q = p;
  for (std::size_t c = 0; c < n_coords; ++c) {
    const auto idx = static_cast<std::size_t>(rng.below(p.data().size()));
    const double orig = q.data()[idx];
    q.data()[idx] = orig + h;
    const double lp = loss_at(q);
    q.data()[idx] = orig - h;
    const double lm = loss_at(q);
    q.data()[idx] = orig;
    const double fd = (lp - lm) / (2 * h);
    const double an = g.data()[idx];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      for (const auto& t : p.layout().tensors())
        if (idx >= t.offset && idx < t.offset + t.size()) res.worst_tensor = t.name;
    }
    ++res.checked;
  }
  return res;
}

// Small on-disk dataset shared by the training and evaluation tests.
inline GenDataOptions small_data_options(std::uint64_t seed) {
  GenDataOptions o;
  o.seed = seed;
  o.split = SplitSpec{60, 60, 0, 20, 20, 20, 30, 40, 0};
  return o;
}

inline const Dataset& small_dataset() {
  static const Dataset ds = [] {
    const auto dir = temp_dir("small_dataset");
    Dataset d;
    gen_data(small_data_options(21), dir, &d);
    return d;
  }();
  return ds;
}

inline ModelConfig small_model(const TokenLayout& layout) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.max_context = 256;
  c.vocab_total = static_cast<int>(layout.vocab_total());
  c.n_modalities = static_cast<int>(layout.n_modalities());
  return c;
}

}  // namespace loretta::testing_support
