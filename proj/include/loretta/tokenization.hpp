#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "loretta/errors.hpp"
#include "loretta/rng.hpp"

namespace loretta {

using TokenId = std::uint32_t;
using MatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModalityId {
  std::uint32_t id = 0;
  std::string name;

  friend bool operator==(const ModalityId& a, const ModalityId& b) { return a.id == b.id; }
};

// Content tokens of one modality, in that modality's local id space.
struct TokenSeq {
  std::uint32_t modality = 0;
  std::vector<TokenId> tokens;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// ---------------------------------------------------------------------------
// Lookup vocabularies

enum class Granularity { kChar, kWord };

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second)
        throw InputError("duplicate vocabulary symbol '" + symbols_[i] + "'");
    }
  }

  std::size_t size() const { return symbols_.size(); }
  bool contains(const std::string& s) const { return index_.contains(s); }
  TokenId at(const std::string& s) const { return index_.at(s); }
  const std::string& symbol(TokenId id) const { return symbols_.at(id); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  // Appends `s` if unseen; returns its id.
  TokenId add(const std::string& s) {
    auto [it, inserted] = index_.emplace(s, static_cast<TokenId>(symbols_.size()));
    if (inserted) symbols_.push_back(s);
    return it->second;
  }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<std::string> split_chars(const std::string& text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  for (char c : text) out.emplace_back(1, c);
  return out;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

inline bool is_atomic_symbol(const std::string& s, Granularity g) {
  if (s.empty()) return false;
  if (g == Granularity::kChar) return s.size() == 1;
  return std::none_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

// Ids are assigned in first-occurrence order over the corpus.
inline Vocabulary build_lookup_vocab(const std::vector<std::vector<std::string>>& corpus, Granularity g) {
  Vocabulary v;
  for (const auto& sample : corpus) {
    for (const auto& s : sample) {
      if (!is_atomic_symbol(s, g)) throw InputError("non-atomic symbol '" + s + "' in lookup corpus");
      v.add(s);
    }
  }
  return v;
}

inline Vocabulary build_lookup_vocab(const std::vector<std::string>& corpus, Granularity g) {
  std::vector<std::vector<std::string>> split;
  split.reserve(corpus.size());
  for (const auto& text : corpus) split.push_back(g == Granularity::kChar ? split_chars(text) : split_words(text));
  return build_lookup_vocab(split, g);
}

inline TokenSeq encode_lookup(std::span<const std::string> sample, const Vocabulary& vocab, std::uint32_t modality) {
  if (sample.empty()) throw InputError("encode_lookup: empty sample");
  TokenSeq out{modality, {}};
  out.tokens.reserve(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (!vocab.contains(sample[i]))
      throw EncodingError("out-of-vocabulary symbol '" + sample[i] + "' at index " + std::to_string(i));
    out.tokens.push_back(vocab.at(sample[i]));
  }
  return out;
}

inline std::vector<std::string> decode_lookup(const TokenSeq& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (TokenId t : seq.tokens) {
    if (t >= vocab.size()) throw EncodingError("token " + std::to_string(t) + " outside vocabulary");
    out.push_back(vocab.symbol(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Value binning

inline TokenId bin_value(double v, int levels, double lo, double hi) {
  if (!std::isfinite(v)) throw EncodingError("bin_encode: non-finite value");
  v = std::clamp(v, lo, hi);
  const auto bin = static_cast<long long>(std::floor((v - lo) / (hi - lo) * levels));
  return static_cast<TokenId>(std::clamp<long long>(bin, 0, levels - 1));
}

// Out-of-range values are clamped to [lo, hi] before binning.
inline TokenSeq bin_encode(std::span<const double> values, int levels, double lo, double hi, std::uint32_t modality) {
  if (levels < 2) throw InputError("bin_encode: levels must be >= 2");
  if (!(lo < hi)) throw InputError("bin_encode: require lo < hi");
  if (values.empty()) throw InputError("bin_encode: empty input");
  TokenSeq out{modality, {}};
  out.tokens.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]))
      throw EncodingError("bin_encode: non-finite value at index " + std::to_string(i));
    out.tokens.push_back(bin_value(values[i], levels, lo, hi));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct ProjectionMatrix {
  Eigen::VectorXd mean;   // d
  MatrixXd components;    // k x d, orthonormal rows

  int k() const { return static_cast<int>(components.rows()); }
  int dim() const { return static_cast<int>(components.cols()); }

  MatrixXd project(const MatrixXd& x) const {
    if (x.cols() != dim()) throw InputError("project: dimension mismatch");
    return (x.rowwise() - mean.transpose()) * components.transpose();
  }
};

// Top-k principal axes of the sample covariance. Each component is signed
// so that its largest-magnitude entry is positive.
inline ProjectionMatrix fit_pca(const MatrixXd& samples, int k) {
  const auto n = samples.rows();
  const auto d = samples.cols();
  if (n < 2) throw InputError("fit_pca: need at least 2 samples");
  if (k < 1 || k > std::min<Eigen::Index>(n, d))
    throw InputError("fit_pca: k must be in [1, min(n, d)]");

  ProjectionMatrix pm;
  pm.mean = samples.colwise().mean().transpose();
  const MatrixXd centered = samples.rowwise() - pm.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("fit_pca: eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double top = std::max(vals(d - 1), 0.0);
  const double tol = top * 1e-10;
  int rank = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    if (vals(i) > tol && vals(i) > 0) ++rank;
  if (k > rank) {
    std::string attainable = rank == 0 ? "none" : "1.." + std::to_string(rank);
    throw InputError("fit_pca: degenerate rank " + std::to_string(rank) + " < k=" + std::to_string(k) +
                     "; attainable k: " + attainable);
  }

  pm.components.resize(k, d);
  for (int j = 0; j < k; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    pm.components.row(j) = v.transpose();
  }
  return pm;
}

// ---------------------------------------------------------------------------
// k-means codebooks

struct Codebook {
  MatrixXd centroids;  // k x d

  int k() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
};

struct KMeansOptions {
  double tolerance = 1e-6;
  int max_iterations = 25;
};

struct KMeansResult {
  Codebook codebook;
  std::vector<double> objective;  // after each assignment step
  int iterations = 0;
};

namespace detail {

inline int nearest_centroid(const MatrixXd& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x, double* dist2 = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double dd = (centroids.row(c) - x).squaredNorm();
    if (dd < best_d) {  // strict: ties go to the lowest index
      best_d = dd;
      best = static_cast<int>(c);
    }
  }
  if (dist2) *dist2 = best_d;
  return best;
}

}  // namespace detail

// k-means++ seeding followed by Lloyd iterations. An empty cluster is
// refilled with the point of the largest cluster farthest from its centroid.
inline KMeansResult fit_kmeans_traced(const MatrixXd& x, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  const auto n = x.rows();
  if (k < 1) throw InputError("fit_kmeans: k must be >= 1");
  if (n < k) throw InputError("fit_kmeans: n=" + std::to_string(n) + " < k=" + std::to_string(k));

  Rng rng(seed);
  MatrixXd c(k, x.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  c.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  for (int j = 1; j < k; ++j) {
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (x.row(i) - c.row(j - 1)).squaredNorm());
      total += d2[i];
    }
    Eigen::Index pick = 0;
    if (total > 0) {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    c.row(j) = x.row(pick);
  }

  KMeansResult res;
  std::vector<int> assign(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < opt.max_iterations; ++it) {
    double obj = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      assign[i] = detail::nearest_centroid(c, x.row(i), &dist[i]);
      obj += dist[i];
    }
    res.objective.push_back(obj);

    MatrixXd next = MatrixXd::Zero(k, x.cols());
    std::vector<Eigen::Index> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(assign[i]) += x.row(i);
      ++count[assign[i]];
    }
    for (int j = 0; j < k; ++j) {
      if (count[j] > 0) {
        next.row(j) /= static_cast<double>(count[j]);
        continue;
      }
      const auto largest = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
      Eigen::Index far = -1;
      double far_d = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (assign[i] == largest && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      next.row(j) = x.row(far);
      assign[far] = j;
      --count[largest];
      ++count[j];
      dist[far] = 0;
    }
    const double shift = (next - c).rowwise().norm().maxCoeff();
    c = std::move(next);
    res.iterations = it + 1;
    if (shift < opt.tolerance) break;
  }
  res.codebook.centroids = std::move(c);
  return res;
}

inline Codebook fit_kmeans(const MatrixXd& x, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  return fit_kmeans_traced(x, k, seed, opt).codebook;
}

// Nearest centroid per row; ties resolve to the lowest centroid index.
inline TokenSeq quantize(const MatrixXd& vectors, const Codebook& cb, std::uint32_t modality) {
  if (vectors.cols() != cb.dim())
    throw InputError("quantize: vector dim " + std::to_string(vectors.cols()) + " != codebook dim " +
                     std::to_string(cb.dim()));
  if (vectors.rows() == 0) throw InputError("quantize: empty input");
  TokenSeq out{modality, {}};
  out.tokens.reserve(static_cast<std::size_t>(vectors.rows()));
  for (Eigen::Index i = 0; i < vectors.rows(); ++i)
    out.tokens.push_back(static_cast<TokenId>(detail::nearest_centroid(cb.centroids, vectors.row(i))));
  return out;
}

}  // namespace loretta
