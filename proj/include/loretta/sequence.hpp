#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loretta/errors.hpp"
#include "loretta/rng.hpp"
#include "loretta/tokenization.hpp"

namespace loretta {

// Global token-id layout shared by every model and sequence:
//   [content of modality 0 | content of modality 1 | ... ]
//   [BOS_0 EOS_0 BOS_1 EOS_1 ...] [MASK_0 .. MASK_{S-1}] [EOSPAN] [PAD]
class TokenLayout {
 public:
  TokenLayout() = default;
  TokenLayout(std::vector<std::string> names, std::vector<std::uint32_t> content_sizes, std::uint32_t n_sentinels)
      : names_(std::move(names)), sizes_(std::move(content_sizes)), n_sentinels_(n_sentinels) {
    if (names_.size() != sizes_.size() || names_.empty())
      throw InputError("TokenLayout: need one content size per modality");
    if (n_sentinels_ < 1) throw InputError("TokenLayout: sentinel budget must be >= 1");
    for (std::size_t i = 0; i < names_.size(); ++i)
      for (std::size_t j = i + 1; j < names_.size(); ++j)
        if (names_[i] == names_[j]) throw InputError("TokenLayout: duplicate modality name " + names_[i]);
    offsets_.resize(sizes_.size());
    std::uint32_t off = 0;
    for (std::size_t m = 0; m < sizes_.size(); ++m) {
      offsets_[m] = off;
      off += sizes_[m];
    }
    n_content_ = off;
  }

  std::uint32_t n_modalities() const { return static_cast<std::uint32_t>(sizes_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::uint32_t m) const { return names_.at(m); }
  std::uint32_t content_size(std::uint32_t m) const { return sizes_.at(m); }
  std::uint32_t content_offset(std::uint32_t m) const { return offsets_.at(m); }
  std::uint32_t n_content() const { return n_content_; }
  std::uint32_t n_sentinels() const { return n_sentinels_; }

  std::uint32_t bos(std::uint32_t m) const { return n_content_ + 2 * m; }
  std::uint32_t eos(std::uint32_t m) const { return n_content_ + 2 * m + 1; }
  std::uint32_t mask(std::uint32_t k) const {
    if (k >= n_sentinels_) throw InputError("TokenLayout: sentinel index out of budget");
    return n_content_ + 2 * n_modalities() + k;
  }
  std::uint32_t eospan() const { return n_content_ + 2 * n_modalities() + n_sentinels_; }
  std::uint32_t pad() const { return eospan() + 1; }
  std::uint32_t vocab_total() const { return pad() + 1; }
  // Modality id carried by PAD positions.
  std::uint32_t pad_modality() const { return n_modalities(); }

  std::uint32_t modality_index(const std::string& name) const {
    for (std::uint32_t m = 0; m < n_modalities(); ++m)
      if (names_[m] == name) return m;
    throw InputError("unknown modality '" + name + "'");
  }

  std::uint32_t to_global(std::uint32_t m, TokenId local) const {
    if (local >= sizes_.at(m))
      throw InputError("token " + std::to_string(local) + " outside vocabulary of modality " + names_[m]);
    return offsets_[m] + local;
  }

  bool is_content(std::uint32_t id) const { return id < n_content_; }
  bool is_content_of(std::uint32_t id, std::uint32_t m) const {
    return id >= offsets_.at(m) && id < offsets_[m] + sizes_[m];
  }
  bool is_bos(std::uint32_t id) const { return id >= n_content_ && id < n_content_ + 2 * n_modalities() && (id - n_content_) % 2 == 0; }
  bool is_eos(std::uint32_t id) const { return id >= n_content_ && id < n_content_ + 2 * n_modalities() && (id - n_content_) % 2 == 1; }
  bool is_delimiter(std::uint32_t id) const { return is_bos(id) || is_eos(id); }
  bool is_mask(std::uint32_t id) const {
    const auto first = n_content_ + 2 * n_modalities();
    return id >= first && id < first + n_sentinels_;
  }
  std::uint32_t mask_index(std::uint32_t id) const { return id - (n_content_ + 2 * n_modalities()); }
  // Modality whose BOS/EOS this is.
  std::uint32_t delimiter_modality(std::uint32_t id) const { return (id - n_content_) / 2; }

  friend bool operator==(const TokenLayout& a, const TokenLayout& b) {
    return a.names_ == b.names_ && a.sizes_ == b.sizes_ && a.n_sentinels_ == b.n_sentinels_;
  }

  nlohmann::json to_json() const {
    nlohmann::json mods = nlohmann::json::array();
    for (std::uint32_t m = 0; m < n_modalities(); ++m)
      mods.push_back({{"name", names_[m]}, {"content_size", sizes_[m]}, {"offset", offsets_[m]},
                      {"bos", bos(m)}, {"eos", eos(m)}});
    return {{"modalities", mods}, {"n_sentinels", n_sentinels_}, {"mask_first", mask(0)},
            {"eospan", eospan()}, {"pad", pad()}, {"vocab_total", vocab_total()}};
  }

  static TokenLayout from_json(const nlohmann::json& j) {
    std::vector<std::string> names;
    std::vector<std::uint32_t> sizes;
    for (const auto& m : j.at("modalities")) {
      names.push_back(m.at("name").get<std::string>());
      sizes.push_back(m.at("content_size").get<std::uint32_t>());
    }
    TokenLayout out(std::move(names), std::move(sizes), j.at("n_sentinels").get<std::uint32_t>());
    if (j.contains("vocab_total") && j.at("vocab_total").get<std::uint32_t>() != out.vocab_total())
      throw FormatError("token layout: stored vocab_total disagrees with modality sizes");
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::uint32_t> sizes_;
  std::vector<std::uint32_t> offsets_;
  std::uint32_t n_content_ = 0;
  std::uint32_t n_sentinels_ = 1;
};

// Flattened training sequence. loss_mask[i] == 1 means token i is a
// prediction target (predicted from position i-1); loss_mask[0] is always 0.
struct AssembledSequence {
  std::vector<std::uint32_t> tokens;
  std::vector<std::uint32_t> modality;
  std::vector<std::uint32_t> pos;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  void push(std::uint32_t tok, std::uint32_t mod, std::uint32_t p, std::uint8_t mask) {
    tokens.push_back(tok);
    modality.push_back(mod);
    pos.push_back(p);
    loss_mask.push_back(mask);
  }

  friend bool operator==(const AssembledSequence&, const AssembledSequence&) = default;
};

struct MaskPolicy {
  double apply_prob = 0.5;
  std::uint32_t n_spans = 1;
  double span_frac_max = 0.25;

  void validate() const {
    if (!(apply_prob >= 0 && apply_prob <= 1)) throw InputError("MaskPolicy: apply_prob must be in [0,1]");
    if (n_spans < 1) throw InputError("MaskPolicy: n_spans must be >= 1");
    if (!(span_frac_max > 0 && span_frac_max <= 1)) throw InputError("MaskPolicy: span_frac_max must be in (0,1]");
  }
};

// Renders one segment as BOS_m content... EOS_m with local positions.
inline void append_segment(AssembledSequence& out, const TokenLayout& layout, const TokenSeq& seg) {
  const auto m = seg.modality;
  if (m >= layout.n_modalities()) throw InputError("segment modality out of range");
  if (seg.tokens.empty()) throw InputError("segment of modality " + layout.name(m) + " is empty");
  std::uint32_t p = 0;
  out.push(layout.bos(m), m, p++, out.empty() ? 0 : 1);
  for (TokenId t : seg.tokens) out.push(layout.to_global(m, t), m, p++, 1);
  out.push(layout.eos(m), m, p, 1);
}

// Concatenates segments with per-modality delimiters. With `commutative`
// the segment order is a uniform random permutation drawn from `rng`.
inline AssembledSequence assemble(const TokenLayout& layout, std::span<const TokenSeq> segments, bool commutative,
                                  Rng& rng, std::size_t max_context) {
  if (segments.empty() || segments.size() > layout.n_modalities())
    throw InputError("assemble: need between 1 and " + std::to_string(layout.n_modalities()) + " segments");
  std::vector<std::size_t> order(segments.size());
  std::iota(order.begin(), order.end(), 0);
  if (commutative) rng.shuffle(order.begin(), order.end());

  std::size_t total = 0;
  for (const auto& s : segments) total += s.size() + 2;
  if (total > max_context)
    throw LengthError("assemble: length " + std::to_string(total) + " exceeds context " + std::to_string(max_context) +
                      " by " + std::to_string(total - max_context));

  AssembledSequence out;
  out.tokens.reserve(total);
  for (auto i : order) append_segment(out, layout, segments[i]);
  return out;
}

inline AssembledSequence assemble(const TokenLayout& layout, std::initializer_list<TokenSeq> segments,
                                  bool commutative, Rng& rng, std::size_t max_context) {
  return assemble(layout, std::span<const TokenSeq>(segments.begin(), segments.size()), commutative, rng, max_context);
}

struct MaskResult {
  AssembledSequence seq;
  bool applied = false;
};

namespace detail {

struct Span {
  std::size_t start = 0;  // index into the sequence
  std::size_t len = 0;
};

}  // namespace detail

// Causal masked modeling: with probability apply_prob, replaces n_spans
// disjoint content spans by MASK_k in place and appends
//   MASK_0 span_0... MASK_1 span_1... EOSPAN
// at the end. Moved tokens keep their modality and position ids. Spans never
// cover delimiters. If the content cannot host the spans the input is
// returned unchanged with applied = false.
inline MaskResult causal_mask_transform(const TokenLayout& layout, const AssembledSequence& seq,
                                        const MaskPolicy& policy, Rng& rng) {
  policy.validate();
  if (policy.n_spans > layout.n_sentinels())
    throw InputError("causal_mask_transform: n_spans exceeds sentinel budget");
  MaskResult res{seq, false};
  if (!rng.bernoulli(policy.apply_prob)) return res;

  // Maximal runs of content tokens.
  std::vector<detail::Span> runs;
  std::size_t content_len = 0;
  for (std::size_t i = 0; i < seq.size();) {
    if (seq.tokens[i] == layout.pad()) throw InputError("causal_mask_transform: sequence contains PAD");
    if (!layout.is_content(seq.tokens[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < seq.size() && layout.is_content(seq.tokens[j])) ++j;
    runs.push_back({i, j - i});
    content_len += j - i;
    i = j;
  }
  if (content_len == 0) return res;

  const auto max_len = static_cast<std::size_t>(
      std::max(1.0, std::ceil(policy.span_frac_max * static_cast<double>(content_len))));
  std::vector<detail::Span> spans;
  std::vector<std::uint8_t> taken(seq.size(), 0);
  for (std::uint32_t k = 0; k < policy.n_spans; ++k) {
    const auto len = static_cast<std::size_t>(rng.range(1, static_cast<std::int64_t>(max_len)));
    // A span must sit inside one run and keep a gap to earlier spans so
    // that adjacent MASK sentinels stay distinguishable.
    std::vector<std::size_t> starts;
    for (const auto& r : runs) {
      if (r.len < len) continue;
      for (std::size_t s = r.start; s + len <= r.start + r.len; ++s) {
        bool ok = true;
        const std::size_t lo = s > 0 ? s - 1 : 0;
        for (std::size_t q = lo; q < std::min(seq.size(), s + len + 1) && ok; ++q) ok = taken[q] == 0;
        if (ok) starts.push_back(s);
      }
    }
    if (starts.empty()) return res;
    const auto s = starts[rng.below(starts.size())];
    spans.push_back({s, len});
    std::fill(taken.begin() + static_cast<std::ptrdiff_t>(s), taken.begin() + static_cast<std::ptrdiff_t>(s + len), 1);
  }
  std::sort(spans.begin(), spans.end(), [](auto& a, auto& b) { return a.start < b.start; });

  AssembledSequence out;
  out.tokens.reserve(seq.size() + 2 * spans.size() + 1);
  std::size_t next_span = 0;
  for (std::size_t i = 0; i < seq.size();) {
    if (next_span < spans.size() && spans[next_span].start == i) {
      out.push(layout.mask(static_cast<std::uint32_t>(next_span)), seq.modality[i], seq.pos[i], seq.loss_mask[i]);
      i += spans[next_span].len;
      ++next_span;
      continue;
    }
    out.push(seq.tokens[i], seq.modality[i], seq.pos[i], seq.loss_mask[i]);
    ++i;
  }
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& sp = spans[k];
    out.push(layout.mask(static_cast<std::uint32_t>(k)), seq.modality[sp.start], seq.pos[sp.start], 0);
    for (std::size_t q = sp.start; q < sp.start + sp.len; ++q)
      out.push(seq.tokens[q], seq.modality[q], seq.pos[q], seq.loss_mask[q]);
  }
  const auto& last = spans.back();
  const auto tail = last.start + last.len - 1;
  out.push(layout.eospan(), seq.modality[tail], seq.pos[tail] + 1, 0);
  res.seq = std::move(out);
  res.applied = true;
  return res;
}

// Inverse of causal_mask_transform. Sequences without EOSPAN are returned
// unchanged.
inline AssembledSequence unmask(const TokenLayout& layout, const AssembledSequence& seq) {
  const auto eospan_it = std::find(seq.tokens.begin(), seq.tokens.end(), layout.eospan());
  if (eospan_it == seq.tokens.end()) {
    for (auto t : seq.tokens)
      if (layout.is_mask(t)) throw FormatError("unmask: MASK sentinel without EOSPAN terminator");
    return seq;
  }
  const auto eospan_at = static_cast<std::size_t>(eospan_it - seq.tokens.begin());
  if (eospan_at + 1 != seq.size()) throw FormatError("unmask: tokens after EOSPAN");

  // The appendix starts at the first sentinel whose index repeats.
  std::vector<std::size_t> inplace;
  std::size_t appendix = eospan_at;
  for (std::size_t i = 0; i < eospan_at; ++i) {
    if (!layout.is_mask(seq.tokens[i])) continue;
    const auto k = layout.mask_index(seq.tokens[i]);
    if (k == inplace.size()) {
      inplace.push_back(i);
    } else if (k == 0 && !inplace.empty()) {
      appendix = i;
      break;
    } else {
      throw FormatError("unmask: sentinel MASK_" + std::to_string(k) + " out of order at " + std::to_string(i));
    }
  }
  if (inplace.empty() || appendix == eospan_at) throw FormatError("unmask: missing span appendix");

  struct Moved {
    std::size_t begin, end;  // [begin, end) in seq
  };
  std::vector<Moved> moved;
  for (std::size_t i = appendix; i < eospan_at;) {
    if (!layout.is_mask(seq.tokens[i]) || layout.mask_index(seq.tokens[i]) != moved.size())
      throw FormatError("unmask: malformed appendix at " + std::to_string(i));
    std::size_t j = i + 1;
    while (j < eospan_at && !layout.is_mask(seq.tokens[j])) ++j;
    if (j == i + 1) throw FormatError("unmask: empty span in appendix");
    moved.push_back({i + 1, j});
    i = j;
  }
  if (moved.size() != inplace.size()) throw FormatError("unmask: sentinel count mismatch");

  AssembledSequence out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < appendix; ++i) {
    if (k < inplace.size() && inplace[k] == i) {
      const auto& mv = moved[k];
      for (std::size_t q = mv.begin; q < mv.end; ++q) {
        // The first restored token takes the in-place sentinel's loss bit.
        const auto bit = q == mv.begin ? seq.loss_mask[i] : seq.loss_mask[q];
        out.push(seq.tokens[q], seq.modality[q], seq.pos[q], bit);
      }
      ++k;
      continue;
    }
    out.push(seq.tokens[i], seq.modality[i], seq.pos[i], seq.loss_mask[i]);
  }
  return out;
}

// Right-padded batch; arrays are row-major batch x L.
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint32_t> tokens;
  std::vector<std::uint32_t> modality;
  std::vector<std::uint32_t> pos;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> lengths;  // unpadded lengths

  std::size_t at(std::size_t b, std::size_t i) const { return b * length + i; }
};

inline PaddedBatch pad_batch(const TokenLayout& layout, std::span<const AssembledSequence> seqs, std::size_t L) {
  PaddedBatch out;
  out.batch = seqs.size();
  out.length = L;
  out.tokens.assign(seqs.size() * L, layout.pad());
  out.modality.assign(seqs.size() * L, layout.pad_modality());
  out.pos.assign(seqs.size() * L, 0);
  out.loss_mask.assign(seqs.size() * L, 0);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = seqs[b];
    if (s.size() > L)
      throw LengthError("pad_batch: sequence " + std::to_string(b) + " has length " + std::to_string(s.size()) +
                        " > " + std::to_string(L));
    std::copy(s.tokens.begin(), s.tokens.end(), out.tokens.begin() + static_cast<std::ptrdiff_t>(b * L));
    std::copy(s.modality.begin(), s.modality.end(), out.modality.begin() + static_cast<std::ptrdiff_t>(b * L));
    std::copy(s.pos.begin(), s.pos.end(), out.pos.begin() + static_cast<std::ptrdiff_t>(b * L));
    std::copy(s.loss_mask.begin(), s.loss_mask.end(), out.loss_mask.begin() + static_cast<std::ptrdiff_t>(b * L));
    out.lengths.push_back(s.size());
  }
  return out;
}

// Row b of a padded batch as a sequence (PAD positions included).
inline AssembledSequence padded_row(const PaddedBatch& pb, std::size_t b) {
  AssembledSequence s;
  for (std::size_t i = 0; i < pb.length; ++i)
    s.push(pb.tokens[pb.at(b, i)], pb.modality[pb.at(b, i)], pb.pos[pb.at(b, i)], pb.loss_mask[pb.at(b, i)]);
  return s;
}

}  // namespace loretta
