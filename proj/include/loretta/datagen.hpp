#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loretta/container.hpp"
#include "loretta/errors.hpp"
#include "loretta/rng.hpp"
#include "loretta/sequence.hpp"
#include "loretta/tokenization.hpp"

namespace loretta {

inline constexpr int kNumClasses = 10;
inline constexpr int kImageSide = 8;
inline constexpr int kImagePixels = kImageSide * kImageSide;
inline constexpr int kWaveLength = 256;

// Modality ids of the synthetic corpus.
enum Modality : std::uint32_t { kImage = 0, kText = 1, kWave = 2 };
inline const std::array<std::string, 3> kModalityNames = {"A", "B", "C"};

struct GeneratorParams {
  double image_noise = 0.25;      // stddev of additive pixel noise
  double image_ink_min = 0.6;     // stroke intensity ~ U(ink_min, 1)
  int image_shift = 1;            // max |dx|, |dy| jitter in pixels
  int text_min_words = 8;
  int text_max_words = 16;
  double wave_noise = 0.7;        // stddev of additive waveform noise
  double wave_amp_jitter = 0.2;   // amplitude ~ U(1 - j, 1 + j)
  double wave_base_freq = 20.0;   // cycles per 256 samples for class 0
  double wave_freq_step = 6.0;

  double frequency(int label) const { return wave_base_freq + wave_freq_step * label; }
};

inline void to_json(nlohmann::json& j, const GeneratorParams& g) {
  j = {{"image_noise", g.image_noise},         {"image_ink_min", g.image_ink_min},
       {"image_shift", g.image_shift},         {"text_min_words", g.text_min_words},
       {"text_max_words", g.text_max_words},   {"wave_noise", g.wave_noise},
       {"wave_amp_jitter", g.wave_amp_jitter}, {"wave_base_freq", g.wave_base_freq},
       {"wave_freq_step", g.wave_freq_step}};
}

inline void from_json(const nlohmann::json& j, GeneratorParams& g) {
  g.image_noise = j.at("image_noise").get<double>();
  g.image_ink_min = j.at("image_ink_min").get<double>();
  g.image_shift = j.at("image_shift").get<int>();
  g.text_min_words = j.at("text_min_words").get<int>();
  g.text_max_words = j.at("text_max_words").get<int>();
  g.wave_noise = j.at("wave_noise").get<double>();
  g.wave_amp_jitter = j.at("wave_amp_jitter").get<double>();
  g.wave_base_freq = j.at("wave_base_freq").get<double>();
  g.wave_freq_step = j.at("wave_freq_step").get<double>();
}

struct RawSample {
  std::uint64_t id = 0;
  std::uint32_t label = 0;
  std::array<double, kImagePixels> image{};
  std::vector<std::string> words;
  std::array<double, kWaveLength> wave{};
};

namespace glyphs {

// 8x8 digit bitmaps with a one-pixel empty border for jitter.
inline const std::array<std::array<const char*, kImageSide>, kNumClasses> kDigits = {{
    {"........", "..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"},
    {"........", "...##...", "..###...", "...##...", "...##...", "...##...", "..####..", "........"},
    {"........", "..####..", ".#....#.", "......#.", "....##..", "..##....", ".######.", "........"},
    {"........", ".#####..", "......#.", "..####..", "......#.", "......#.", ".#####..", "........"},
    {"........", "....##..", "...#.#..", "..#..#..", ".######.", ".....#..", ".....#..", "........"},
    {"........", ".######.", ".#......", ".#####..", "......#.", "......#.", ".#####..", "........"},
    {"........", "..####..", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"},
    {"........", ".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "........"},
    {"........", "..####..", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"},
    {"........", "..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "..####..", "........"},
}};

inline double ink(int label, int r, int c) {
  if (r < 0 || c < 0 || r >= kImageSide || c >= kImageSide) return 0.0;
  return kDigits[static_cast<std::size_t>(label)][static_cast<std::size_t>(r)][c] == '#' ? 1.0 : 0.0;
}

}  // namespace glyphs

namespace lexicon {

inline const std::array<std::array<const char*, 3>, kNumClasses> kKeywords = {{
    {"zero", "nil", "nought"},   {"one", "single", "lone"},     {"two", "pair", "double"},
    {"three", "trio", "triple"}, {"four", "quad", "quartet"},   {"five", "quint", "fist"},
    {"six", "hexad", "sextet"},  {"seven", "heptad", "week"},   {"eight", "octet", "octave"},
    {"nine", "ennead", "nonet"},
}};
inline const std::vector<const char*> kDet = {"the", "a", "this", "that", "every", "some"};
inline const std::vector<const char*> kAdj = {"small", "large", "bright", "dark",  "quiet", "loud",  "quick", "slow",
                                              "old",   "new",   "red",    "blue",  "green", "round", "sharp", "soft",
                                              "warm",  "cold",  "tall",   "short", "heavy", "light", "plain", "odd"};
inline const std::vector<const char*> kNoun = {"cat",  "dog",  "bird",  "house", "tree", "river", "stone", "car",
                                               "book", "lamp", "chair", "table", "cloud", "field", "road", "ship",
                                               "coin", "door", "box",   "card",  "hill", "lake",  "star",  "bell"};
inline const std::vector<const char*> kVerb = {"sees",  "holds", "finds", "moves", "carries", "paints", "counts", "shows",
                                               "hides", "drops", "lifts", "marks", "draws",   "names",  "picks",  "keeps"};
inline const std::vector<const char*> kPrep = {"near", "under", "over", "beside", "behind", "with", "without", "inside"};

// Slot patterns: K keyword, D determiner, A adjective, N noun, V verb, P preposition.
inline const std::vector<const char*> kPatterns = {
    "DANVKN", "KNVDAN", "DNPDKN", "DKANVN", "KANPDN", "DNVKAN", "DAKNVDN", "KNPDNV", "DNVDKN", "DKNVPN",
};

}  // namespace lexicon

namespace detail {

inline std::vector<std::string> make_sentence(int label, const GeneratorParams& g, Rng& rng) {
  using namespace lexicon;
  // Each class owns three of the slot patterns.
  const std::array<std::size_t, 3> family = {static_cast<std::size_t>(label) % kPatterns.size(),
                                             static_cast<std::size_t>(label + 3) % kPatterns.size(),
                                             static_cast<std::size_t>(label + 7) % kPatterns.size()};
  const std::string pattern = kPatterns[family[rng.below(3)]];
  const auto pick = [&](const std::vector<const char*>& v) { return std::string(v[rng.below(v.size())]); };
  const auto keyword = [&] { return std::string(kKeywords[static_cast<std::size_t>(label)][rng.below(3)]); };

  std::vector<std::string> words;
  for (char slot : pattern) {
    switch (slot) {
      case 'K': words.push_back(keyword()); break;
      case 'D': words.push_back(pick(kDet)); break;
      case 'A': words.push_back(pick(kAdj)); break;
      case 'N': words.push_back(pick(kNoun)); break;
      case 'V': words.push_back(pick(kVerb)); break;
      case 'P': words.push_back(pick(kPrep)); break;
      default: break;
    }
  }
  const auto target = static_cast<std::size_t>(rng.range(g.text_min_words, g.text_max_words));
  while (words.size() + 3 <= target) {
    words.push_back(pick(kPrep));
    words.push_back(pick(kDet));
    words.push_back(rng.bernoulli(0.2) ? keyword() : pick(kNoun));
  }
  while (words.size() < target) {
    const auto at = static_cast<std::ptrdiff_t>(rng.below(words.size() + 1));
    words.insert(words.begin() + at, pick(kAdj));
  }
  return words;
}

}  // namespace detail

// Deterministic label-linked tri-modal samples. Sample ids are
// label * n_per_class + index; every modality draws from its own split of
// the per-sample stream.
inline std::vector<RawSample> gen_tri_modal(std::uint64_t seed, int n_per_class, const GeneratorParams& g = {}) {
  if (n_per_class < 1) throw InputError("gen_tri_modal: n_per_class must be >= 1");
  const Rng root(seed);
  std::vector<RawSample> out;
  out.reserve(static_cast<std::size_t>(n_per_class) * kNumClasses);
  for (int y = 0; y < kNumClasses; ++y) {
    for (int i = 0; i < n_per_class; ++i) {
      RawSample s;
      s.id = static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(n_per_class) + static_cast<std::uint64_t>(i);
      s.label = static_cast<std::uint32_t>(y);
      const Rng srng = root.split(s.id);

      Rng ri = srng.split(kImage);
      const auto dx = static_cast<int>(ri.range(-g.image_shift, g.image_shift));
      const auto dy = static_cast<int>(ri.range(-g.image_shift, g.image_shift));
      const double ink = g.image_ink_min + (1.0 - g.image_ink_min) * ri.uniform();
      for (int r = 0; r < kImageSide; ++r)
        for (int c = 0; c < kImageSide; ++c)
          s.image[static_cast<std::size_t>(r * kImageSide + c)] =
              ink * glyphs::ink(y, r - dy, c - dx) + ri.normal(0.0, g.image_noise);

      Rng rt = srng.split(kText);
      s.words = detail::make_sentence(y, g, rt);

      Rng rw = srng.split(kWave);
      const double amp = 1.0 + g.wave_amp_jitter * (2.0 * rw.uniform() - 1.0);
      const double phase = 2.0 * std::numbers::pi * rw.uniform();
      const double f = g.frequency(y);
      for (int t = 0; t < kWaveLength; ++t)
        s.wave[static_cast<std::size_t>(t)] =
            amp * std::sin(2.0 * std::numbers::pi * f * t / kWaveLength + phase) + rw.normal(0.0, g.wave_noise);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Canonical byte encoding of raw samples (for reproducibility checks).
inline std::string raw_sample_bytes(const std::vector<RawSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    le::put(out, s.id);
    le::put(out, s.label);
    for (double v : s.image) le::put(out, std::bit_cast<std::uint64_t>(v));
    for (const auto& w : s.words) {
      out += w;
      out.push_back(' ');
    }
    out.push_back('\n');
    for (double v : s.wave) le::put(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizers for the three synthetic modalities

struct TokenizerConfig {
  int image_levels = 16;
  int wave_patch = 16;
  int wave_pca_dim = 8;
  int wave_codebook = 64;
  std::uint64_t kmeans_seed = 0;
};

inline void to_json(nlohmann::json& j, const TokenizerConfig& t) {
  j = {{"image_levels", t.image_levels}, {"wave_patch", t.wave_patch}, {"wave_pca_dim", t.wave_pca_dim},
       {"wave_codebook", t.wave_codebook}, {"kmeans_seed", t.kmeans_seed}};
}

inline void from_json(const nlohmann::json& j, TokenizerConfig& t) {
  t.image_levels = j.at("image_levels").get<int>();
  t.wave_patch = j.at("wave_patch").get<int>();
  t.wave_pca_dim = j.at("wave_pca_dim").get<int>();
  t.wave_codebook = j.at("wave_codebook").get<int>();
  t.kmeans_seed = j.at("kmeans_seed").get<std::uint64_t>();
}

struct TriModalTokenizer {
  TokenizerConfig cfg;
  Vocabulary vocab;
  ProjectionMatrix pca;
  Codebook codebook;

  std::uint32_t vocab_size(std::uint32_t m) const {
    switch (m) {
      case kImage: return static_cast<std::uint32_t>(cfg.image_levels);
      case kText: return static_cast<std::uint32_t>(vocab.size());
      case kWave: return static_cast<std::uint32_t>(codebook.k());
      default: throw InputError("unknown modality id");
    }
  }
  std::size_t nominal_length(std::uint32_t m, const GeneratorParams& g) const {
    switch (m) {
      case kImage: return kImagePixels;
      case kText: return static_cast<std::size_t>(g.text_max_words);
      case kWave: return static_cast<std::size_t>(kWaveLength / cfg.wave_patch);
      default: throw InputError("unknown modality id");
    }
  }

  static MatrixXd wave_patches(const RawSample& s, int patch) {
    MatrixXd p(kWaveLength / patch, patch);
    for (int i = 0; i < p.rows(); ++i)
      for (int j = 0; j < patch; ++j) p(i, j) = s.wave[static_cast<std::size_t>(i * patch + j)];
    return p;
  }

  TokenSeq encode(const RawSample& s, std::uint32_t m) const {
    switch (m) {
      case kImage: return bin_encode(s.image, cfg.image_levels, 0.0, 1.0, kImage);
      case kText: return encode_lookup(s.words, vocab, kText);
      case kWave: return quantize(pca.project(wave_patches(s, cfg.wave_patch)), codebook, kWave);
      default: throw InputError("unknown modality id");
    }
  }

  // Fits the vocabulary on `text_fit` and PCA + codebook on `wave_fit`.
  static TriModalTokenizer fit(const TokenizerConfig& cfg, const std::vector<const RawSample*>& text_fit,
                               const std::vector<const RawSample*>& wave_fit) {
    if (kWaveLength % cfg.wave_patch != 0) throw InputError("wave_patch must divide the waveform length");
    TriModalTokenizer t;
    t.cfg = cfg;
    std::vector<std::vector<std::string>> corpus;
    for (const auto* s : text_fit) corpus.push_back(s->words);
    t.vocab = build_lookup_vocab(corpus, Granularity::kWord);

    const int per = kWaveLength / cfg.wave_patch;
    MatrixXd patches(static_cast<Eigen::Index>(wave_fit.size()) * per, cfg.wave_patch);
    for (std::size_t i = 0; i < wave_fit.size(); ++i)
      patches.middleRows(static_cast<Eigen::Index>(i) * per, per) = wave_patches(*wave_fit[i], cfg.wave_patch);
    t.pca = fit_pca(patches, cfg.wave_pca_dim);
    t.codebook = fit_kmeans(t.pca.project(patches), cfg.wave_codebook, cfg.kmeans_seed);
    return t;
  }

  void write_into(Container& c) const {
    c.meta["tokenizer"] = {{"config", cfg}, {"vocab", vocab.symbols()}};
    auto mat = [](const std::string& name, const MatrixXd& m) {
      NamedTensor t{name, {m.rows(), m.cols()}, DType::kF64, {}};
      t.values.assign(m.data(), m.data() + m.size());
      return t;
    };
    c.tensors.push_back(mat("tokenizer.pca.mean", pca.mean.transpose()));
    c.tensors.push_back(mat("tokenizer.pca.components", pca.components));
    c.tensors.push_back(mat("tokenizer.codebook", codebook.centroids));
  }

  static TriModalTokenizer read_from(const Container& c) {
    TriModalTokenizer t;
    const auto& j = c.meta.at("tokenizer");
    t.cfg = j.at("config").get<TokenizerConfig>();
    t.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
    auto mat = [&](const std::string& name) {
      const auto& nt = c.tensor(name);
      if (nt.shape.size() != 2) throw FormatError(name + ": expected a matrix");
      MatrixXd m(nt.shape[0], nt.shape[1]);
      std::copy(nt.values.begin(), nt.values.end(), m.data());
      return m;
    };
    t.pca.mean = mat("tokenizer.pca.mean").row(0).transpose();
    t.pca.components = mat("tokenizer.pca.components");
    t.codebook.centroids = mat("tokenizer.codebook");
    return t;
  }
};

// ---------------------------------------------------------------------------
// Shards

inline constexpr char kShardMagic[4] = {'L', 'R', 'T', '1'};
inline constexpr std::uint32_t kShardVersion = 1;
// Fills the tail of records shorter than tokens_per_record.
inline constexpr std::uint32_t kShardFiller = 0xffffffffu;

struct Shard {
  std::uint32_t modality = 0;
  std::uint32_t tokens_per_record = 0;
  std::vector<std::vector<TokenId>> records;  // filler stripped
};

// Header (little-endian): magic "LRT1", version u32, token width u32 (= 4),
// record count u64, tokens-per-record u32, modality id u32; then
// record-major u32 token ids.
inline std::string serialize_shard(const Shard& s) {
  std::string out(kShardMagic, 4);
  le::put(out, kShardVersion);
  le::put(out, std::uint32_t{4});
  le::put(out, static_cast<std::uint64_t>(s.records.size()));
  le::put(out, s.tokens_per_record);
  le::put(out, s.modality);
  for (const auto& r : s.records) {
    if (r.size() > s.tokens_per_record) throw InputError("shard record longer than tokens_per_record");
    for (std::size_t i = 0; i < s.tokens_per_record; ++i) le::put(out, i < r.size() ? r[i] : kShardFiller);
  }
  return out;
}

inline Shard parse_shard(const std::string& bytes, const std::string& what = "shard") {
  constexpr std::size_t kHeader = 4 + 4 + 4 + 8 + 4 + 4;
  if (bytes.size() < kHeader) throw FormatError(what + ": truncated header");
  if (!std::equal(kShardMagic, kShardMagic + 4, bytes.begin())) throw FormatError(what + ": bad magic");
  const char* p = bytes.data() + 4;
  if (le::get<std::uint32_t>(p) != kShardVersion) throw FormatError(what + ": unsupported version");
  if (le::get<std::uint32_t>(p + 4) != 4) throw FormatError(what + ": token width must be 4");
  const auto count = le::get<std::uint64_t>(p + 8);
  Shard s;
  s.tokens_per_record = le::get<std::uint32_t>(p + 16);
  s.modality = le::get<std::uint32_t>(p + 20);
  if (s.tokens_per_record == 0) throw FormatError(what + ": zero tokens per record");
  if ((bytes.size() - kHeader) != count * s.tokens_per_record * 4) throw FormatError(what + ": body size mismatch");
  const char* body = bytes.data() + kHeader;
  s.records.resize(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    auto& rec = s.records[r];
    for (std::uint32_t i = 0; i < s.tokens_per_record; ++i) {
      const auto t = le::get<std::uint32_t>(body + 4 * (r * s.tokens_per_record + i));
      if (t == kShardFiller) break;
      rec.push_back(t);
    }
    if (rec.empty()) throw FormatError(what + ": empty record " + std::to_string(r));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Figure-1c style split

struct SplitSpec {
  int pair_ab = 300;
  int pair_bc = 300;
  int pair_ac = 0;
  int uni_a = 100;
  int uni_b = 100;
  int uni_c = 100;
  int test = 100;
  int probe = 200;  // labelled tri-modal pool for linear probing
  std::uint64_t seed = 0;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

inline void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = {{"pair_ab", s.pair_ab}, {"pair_bc", s.pair_bc}, {"pair_ac", s.pair_ac}, {"uni_a", s.uni_a},
       {"uni_b", s.uni_b},     {"uni_c", s.uni_c},     {"test", s.test},       {"probe", s.probe},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SplitSpec& s) {
  s.pair_ab = j.at("pair_ab").get<int>();
  s.pair_bc = j.at("pair_bc").get<int>();
  s.pair_ac = j.at("pair_ac").get<int>();
  s.uni_a = j.at("uni_a").get<int>();
  s.uni_b = j.at("uni_b").get<int>();
  s.uni_c = j.at("uni_c").get<int>();
  s.test = j.at("test").get<int>();
  s.probe = j.at("probe").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

struct SubsetPlan {
  std::string name;
  std::vector<std::uint32_t> modalities;
  int count = 0;
  bool training = false;
};

inline std::vector<SubsetPlan> subset_plans(const SplitSpec& s) {
  return {
      {"pair_AB", {kImage, kText}, s.pair_ab, true}, {"pair_BC", {kText, kWave}, s.pair_bc, true},
      {"pair_AC", {kImage, kWave}, s.pair_ac, true}, {"uni_A", {kImage}, s.uni_a, true},
      {"uni_B", {kText}, s.uni_b, true},             {"uni_C", {kWave}, s.uni_c, true},
      {"probe", {kImage, kText, kWave}, s.probe, false}, {"test", {kImage, kText, kWave}, s.test, false},
  };
}

// Raw samples needed per class: each record consumes one sample per modality.
inline int samples_per_class_needed(const SplitSpec& s) {
  int total = 0;
  for (const auto& p : subset_plans(s)) {
    if (p.count % kNumClasses != 0)
      throw InputError("split: subset " + p.name + " count " + std::to_string(p.count) + " is not a multiple of " +
                       std::to_string(kNumClasses) + " (stratified)");
    total += p.count / kNumClasses * static_cast<int>(p.modalities.size());
  }
  return total;
}

struct SplitRecord {
  std::uint32_t label = 0;
  std::vector<const RawSample*> parts;  // one sample per subset modality
};

struct SplitAssignment {
  std::map<std::string, std::vector<SplitRecord>> subsets;
};

// Weakly aligned records: each modality of a record comes from a distinct
// raw sample of the same label, drawn without replacement, so no sample id
// appears in two records or two subsets.
inline SplitAssignment assign_split(const std::vector<RawSample>& samples, const SplitSpec& spec) {
  const int need = samples_per_class_needed(spec);
  std::array<std::vector<const RawSample*>, kNumClasses> pool;
  for (const auto& s : samples) pool.at(s.label).push_back(&s);
  std::string deficit;
  for (int y = 0; y < kNumClasses; ++y) {
    const auto have = static_cast<int>(pool[static_cast<std::size_t>(y)].size());
    if (have < need) deficit += " class " + std::to_string(y) + ": short by " + std::to_string(need - have) + ";";
  }
  if (!deficit.empty()) throw InputError("split: insufficient samples;" + deficit);

  Rng rng(spec.seed);
  for (int y = 0; y < kNumClasses; ++y) {
    auto& p = pool[static_cast<std::size_t>(y)];
    std::sort(p.begin(), p.end(), [](auto* a, auto* b) { return a->id < b->id; });
    Rng(rng.split(static_cast<std::uint64_t>(y))).shuffle(p.begin(), p.end());
  }
  std::array<std::size_t, kNumClasses> cursor{};
  SplitAssignment out;
  for (const auto& plan : subset_plans(spec)) {
    auto& recs = out.subsets[plan.name];
    const int per_class = plan.count / kNumClasses;
    // Class-interleaved order: y0, y1, ..., y9, y0, ...
    for (int i = 0; i < per_class; ++i) {
      for (int y = 0; y < kNumClasses; ++y) {
        SplitRecord r;
        r.label = static_cast<std::uint32_t>(y);
        for (std::size_t m = 0; m < plan.modalities.size(); ++m) r.parts.push_back(pool[static_cast<std::size_t>(y)][cursor[static_cast<std::size_t>(y)]++]);
        recs.push_back(std::move(r));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets on disk

struct Record {
  std::uint32_t label = 0;
  std::vector<TokenSeq> segments;  // in subset modality order
  std::vector<std::uint64_t> sample_ids;

  const TokenSeq& segment(std::uint32_t m) const {
    for (const auto& s : segments)
      if (s.modality == m) return s;
    throw InputError("record has no segment of modality " + std::to_string(m));
  }
  bool has(std::uint32_t m) const {
    return std::any_of(segments.begin(), segments.end(), [m](const TokenSeq& s) { return s.modality == m; });
  }
};

struct Subset {
  std::string name;
  std::vector<std::uint32_t> modalities;
  std::vector<Record> records;
  bool training = false;
};

struct Dataset {
  nlohmann::json manifest;
  GeneratorParams generator;
  SplitSpec split;
  TriModalTokenizer tokenizer;
  std::map<std::string, Subset> subsets;

  TokenLayout layout(std::uint32_t n_sentinels) const {
    return TokenLayout({kModalityNames.begin(), kModalityNames.end()},
                       {tokenizer.vocab_size(kImage), tokenizer.vocab_size(kText), tokenizer.vocab_size(kWave)},
                       n_sentinels);
  }
  std::size_t nominal_length(std::uint32_t m) const { return tokenizer.nominal_length(m, generator); }

  const Subset& subset(const std::string& name) const {
    auto it = subsets.find(name);
    if (it == subsets.end()) throw InputError("dataset has no subset '" + name + "'");
    return it->second;
  }
};

struct GenDataOptions {
  std::uint64_t seed = 0;
  SplitSpec split;
  GeneratorParams generator;
  TokenizerConfig tokenizer;
};

inline std::string shard_file_name(const std::string& subset, std::uint32_t m) {
  return subset + "." + kModalityNames.at(m) + ".lrt";
}

// Generates samples, splits them, fits tokenizers on the training subsets,
// and writes shards, tokenizer artifacts, and manifest.json into `dir`.
inline Dataset split_fig1c(const std::vector<RawSample>& samples, const GenDataOptions& opt,
                           const std::filesystem::path& dir) {
  const auto assignment = assign_split(samples, opt.split);
  const auto plans = subset_plans(opt.split);

  std::vector<const RawSample*> text_fit, wave_fit;
  for (const auto& plan : plans) {
    if (!plan.training) continue;
    for (const auto& r : assignment.subsets.at(plan.name)) {
      for (std::size_t k = 0; k < plan.modalities.size(); ++k) {
        if (plan.modalities[k] == kText) text_fit.push_back(r.parts[k]);
        if (plan.modalities[k] == kWave) wave_fit.push_back(r.parts[k]);
      }
    }
  }
  if (text_fit.empty() || wave_fit.empty()) throw InputError("split: training subsets must contain B and C samples");
  TokenizerConfig tcfg = opt.tokenizer;
  tcfg.kmeans_seed = Rng(opt.seed).split(0x6b6d).next_u64();
  Dataset ds;
  ds.generator = opt.generator;
  ds.split = opt.split;
  ds.tokenizer = TriModalTokenizer::fit(tcfg, text_fit, wave_fit);

  std::filesystem::create_directories(dir);
  nlohmann::json subsets_json = nlohmann::json::object();
  for (const auto& plan : plans) {
    Subset sub{plan.name, plan.modalities, {}, plan.training};
    nlohmann::json shards = nlohmann::json::object();
    std::vector<std::uint32_t> labels;
    std::vector<std::vector<std::uint64_t>> ids;
    for (const auto& r : assignment.subsets.at(plan.name)) {
      Record rec;
      rec.label = r.label;
      for (std::size_t k = 0; k < plan.modalities.size(); ++k) {
        rec.segments.push_back(ds.tokenizer.encode(*r.parts[k], plan.modalities[k]));
        rec.sample_ids.push_back(r.parts[k]->id);
      }
      labels.push_back(rec.label);
      ids.push_back(rec.sample_ids);
      sub.records.push_back(std::move(rec));
    }
    for (std::size_t k = 0; k < plan.modalities.size(); ++k) {
      const auto m = plan.modalities[k];
      Shard sh;
      sh.modality = m;
      sh.tokens_per_record = static_cast<std::uint32_t>(ds.tokenizer.nominal_length(m, opt.generator));
      for (const auto& rec : sub.records) sh.records.push_back(rec.segments[k].tokens);
      const auto file = shard_file_name(plan.name, m);
      if (plan.count > 0) write_file(dir / file, serialize_shard(sh));
      shards[kModalityNames[m]] = plan.count > 0 ? nlohmann::json(file) : nlohmann::json(nullptr);
    }
    std::vector<std::string> mod_names;
    for (auto m : plan.modalities) mod_names.push_back(kModalityNames[m]);
    subsets_json[plan.name] = {{"modalities", mod_names}, {"count", plan.count}, {"training", plan.training},
                               {"shards", shards},        {"labels", labels},    {"sample_ids", ids}};
    ds.subsets[plan.name] = std::move(sub);
  }

  Container tok;
  ds.tokenizer.write_into(tok);
  tok.save(dir / "tokenizers.bin");

  nlohmann::json mods = nlohmann::json::array();
  const std::array<const char*, 3> kinds = {"bin", "lookup", "pca_kmeans"};
  for (std::uint32_t m = 0; m < 3; ++m)
    mods.push_back({{"name", kModalityNames[m]},
                    {"id", m},
                    {"tokenizer", kinds[m]},
                    {"vocab_size", ds.tokenizer.vocab_size(m)},
                    {"nominal_length", ds.tokenizer.nominal_length(m, opt.generator)}});
  ds.manifest = {{"format_version", 1},
                 {"seed", opt.seed},
                 {"n_classes", kNumClasses},
                 {"generator", opt.generator},
                 {"split", opt.split},
                 {"tokenizer_artifacts", "tokenizers.bin"},
                 {"modalities", mods},
                 {"subsets", subsets_json}};
  write_file(dir / "manifest.json", ds.manifest.dump(2) + "\n");
  return ds;
}

inline int gen_data(const GenDataOptions& opt, const std::filesystem::path& dir, Dataset* out = nullptr) {
  const int per_class = samples_per_class_needed(opt.split);
  const auto samples = gen_tri_modal(opt.seed, per_class, opt.generator);
  auto ds = split_fig1c(samples, opt, dir);
  if (out) *out = std::move(ds);
  return per_class;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  try {
    if (ds.manifest.at("format_version").get<int>() != 1) throw FormatError("manifest: unsupported format version");
    ds.generator = ds.manifest.at("generator").get<GeneratorParams>();
    ds.split = ds.manifest.at("split").get<SplitSpec>();
    ds.tokenizer =
        TriModalTokenizer::read_from(Container::load(dir / ds.manifest.at("tokenizer_artifacts").get<std::string>()));
    for (const auto& [name, sj] : ds.manifest.at("subsets").items()) {
      Subset sub;
      sub.name = name;
      sub.training = sj.at("training").get<bool>();
      for (const auto& mn : sj.at("modalities")) {
        const auto it = std::find(kModalityNames.begin(), kModalityNames.end(), mn.get<std::string>());
        if (it == kModalityNames.end()) throw FormatError("manifest: unknown modality " + mn.dump());
        sub.modalities.push_back(static_cast<std::uint32_t>(it - kModalityNames.begin()));
      }
      const auto labels = sj.at("labels").get<std::vector<std::uint32_t>>();
      const auto ids = sj.at("sample_ids").get<std::vector<std::vector<std::uint64_t>>>();
      const auto count = sj.at("count").get<std::size_t>();
      if (labels.size() != count || ids.size() != count) throw FormatError("manifest: subset " + name + " size mismatch");
      sub.records.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        sub.records[i].label = labels[i];
        sub.records[i].sample_ids = ids[i];
      }
      if (count > 0) {
        for (auto m : sub.modalities) {
          const auto file = sj.at("shards").at(kModalityNames[m]).get<std::string>();
          const auto sh = parse_shard(read_file(dir / file), file);
          if (sh.modality != m) throw FormatError(file + ": modality id mismatch");
          if (sh.records.size() != count) throw FormatError(file + ": record count mismatch");
          const auto nominal = ds.nominal_length(m);
          if (sh.tokens_per_record != nominal) throw FormatError(file + ": tokens-per-record mismatch");
          for (std::size_t i = 0; i < count; ++i) {
            for (auto t : sh.records[i])
              if (t >= ds.tokenizer.vocab_size(m)) throw FormatError(file + ": token id out of vocabulary");
            sub.records[i].segments.push_back({m, sh.records[i]});
          }
        }
      }
      ds.subsets[name] = std::move(sub);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  return ds;
}

}  // namespace loretta
