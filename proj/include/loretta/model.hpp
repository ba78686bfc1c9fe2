#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "loretta/errors.hpp"
#include "loretta/rng.hpp"
#include "loretta/sequence.hpp"

namespace loretta {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int max_context = 256;
  int vocab_total = 0;
  int n_modalities = 3;
  int mlp_ratio = 4;
  double norm_eps = 1e-5;

  int d_head() const { return d_model / n_heads; }
  int d_mlp() const { return mlp_ratio * d_model; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || mlp_ratio < 1)
      throw InputError("ModelConfig: layer/head/width counts must be positive");
    if (d_model % n_heads != 0) throw InputError("ModelConfig: d_model must be divisible by n_heads");
    if (vocab_total <= 0) throw InputError("ModelConfig: vocab_total must be > 0");
    if (max_context <= 0) throw InputError("ModelConfig: max_context must be > 0");
    if (n_modalities < 1) throw InputError("ModelConfig: n_modalities must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},       {"d_model", c.d_model},
       {"max_context", c.max_context}, {"vocab_total", c.vocab_total}, {"n_modalities", c.n_modalities},
       {"mlp_ratio", c.mlp_ratio},     {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.vocab_total = j.at("vocab_total").get<int>();
  c.n_modalities = j.at("n_modalities").get<int>();
  c.mlp_ratio = j.value("mlp_ratio", 4);
  c.norm_eps = j.value("norm_eps", 1e-5);
}

enum class TensorKind { kEmbedding, kPosition, kGain, kProjection, kResidualProjection };

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  TensorKind kind = TensorKind::kProjection;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  // Weight decay applies to 2-D projection matrices only.
  bool decays() const { return kind == TensorKind::kProjection || kind == TensorKind::kResidualProjection; }
};

// Flat layout of all parameters. Tensor names follow "block{i}.attn.wq".
class ParamLayout {
 public:
  struct Block {
    std::size_t ln1, wq, wk, wv, wo, ln2, up, down;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const int d = c.d_model;
    tok_emb_ = add("tok_emb", c.vocab_total, d, TensorKind::kEmbedding);
    for (int m = 0; m < c.n_modalities; ++m)
      pos_.push_back(add("pos" + std::to_string(m), c.max_context, d, TensorKind::kPosition));
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      Block b{};
      b.ln1 = add(p + "ln1.g", 1, d, TensorKind::kGain);
      b.wq = add(p + "attn.wq", d, d, TensorKind::kProjection);
      b.wk = add(p + "attn.wk", d, d, TensorKind::kProjection);
      b.wv = add(p + "attn.wv", d, d, TensorKind::kProjection);
      b.wo = add(p + "attn.wo", d, d, TensorKind::kResidualProjection);
      b.ln2 = add(p + "ln2.g", 1, d, TensorKind::kGain);
      b.up = add(p + "mlp.up", d, c.d_mlp(), TensorKind::kProjection);
      b.down = add(p + "mlp.down", c.d_mlp(), d, TensorKind::kResidualProjection);
      blocks_.push_back(b);
    }
    ln_f_ = add("ln_f.g", 1, d, TensorKind::kGain);
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }
  const TensorInfo& tok_emb() const { return tensors_[tok_emb_]; }
  const TensorInfo& pos(int m) const { return tensors_[pos_.at(static_cast<std::size_t>(m))]; }
  const Block& block(int l) const { return blocks_.at(static_cast<std::size_t>(l)); }
  const TensorInfo& at(std::size_t idx) const { return tensors_.at(idx); }
  const TensorInfo& ln_f() const { return tensors_[ln_f_]; }

  const TensorInfo& find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return t;
    throw InputError("no parameter tensor named " + name);
  }

 private:
  std::size_t add(std::string name, int rows, int cols, TensorKind kind) {
    tensors_.push_back({std::move(name), total_, rows, cols, kind});
    total_ += tensors_.back().size();
    return tensors_.size() - 1;
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
  std::size_t tok_emb_ = 0, ln_f_ = 0;
  std::vector<std::size_t> pos_;
  std::vector<Block> blocks_;
};

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVecX = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Flat storage with a fixed base alignment: Eigen picks its reduction order
// from pointer alignment, so results stay bitwise reproducible across runs.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Storage for parameters or gradients: one flat buffer with named views.
template <typename T>
class ParamBuffer {
 public:
  using Map = Eigen::Map<MatX<T>>;
  using ConstMap = Eigen::Map<const MatX<T>>;

  ParamBuffer() = default;
  explicit ParamBuffer(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg), data_(layout_.total(), T(0)) {}

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  AlignedVector<T>& data() { return data_; }
  const AlignedVector<T>& data() const { return data_; }
  std::span<T> span(const TensorInfo& t) { return {data_.data() + t.offset, t.size()}; }
  std::span<const T> span(const TensorInfo& t) const { return {data_.data() + t.offset, t.size()}; }

  Map mat(const TensorInfo& t) { return Map(data_.data() + t.offset, t.rows, t.cols); }
  ConstMap mat(const TensorInfo& t) const { return ConstMap(data_.data() + t.offset, t.rows, t.cols); }
  Map mat(std::size_t idx) { return mat(layout_.at(idx)); }
  ConstMap mat(std::size_t idx) const { return mat(layout_.at(idx)); }

  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }

  template <typename U>
  ParamBuffer<U> cast() const {
    ParamBuffer<U> out(cfg_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  AlignedVector<T> data_;
};

template <typename T>
using Parameters = ParamBuffer<T>;
template <typename T>
using Gradients = ParamBuffer<T>;

// Normal(0, 0.02^2) for embeddings and projections; residual output
// projections scaled by 1/sqrt(2 n_layers); RMSNorm gains = 1.
template <typename T>
Parameters<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters<T> p(cfg);
  Rng rng(seed);
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& t : p.layout().tensors()) {
    auto s = p.span(t);
    if (t.kind == TensorKind::kGain) {
      std::fill(s.begin(), s.end(), T(1));
      continue;
    }
    const double sd = t.kind == TensorKind::kResidualProjection ? 0.02 * resid_scale : 0.02;
    for (auto& v : s) v = static_cast<T>(rng.normal(0.0, sd));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

// y = x / sqrt(mean(x^2) + eps) * g, row-wise. Stores xhat and rstd.
template <typename T>
void rmsnorm_forward(const MatX<T>& x, const Eigen::Map<const MatX<T>>& g, T eps, MatX<T>& xhat, VecX<T>& rstd,
                     MatX<T>& y) {
  const auto n = x.rows();
  const auto d = static_cast<T>(x.cols());
  rstd.resize(n);
  xhat.resize(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    rstd(i) = T(1) / std::sqrt(x.row(i).squaredNorm() / d + eps);
    xhat.row(i) = x.row(i) * rstd(i);
  }
  y = xhat.array().rowwise() * g.row(0).array();
}

// Accumulates dg and returns dx.
template <typename T>
MatX<T> rmsnorm_backward(const MatX<T>& dy, const MatX<T>& xhat, const VecX<T>& rstd,
                         const Eigen::Map<const MatX<T>>& g, Eigen::Map<MatX<T>> dg) {
  dg.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  MatX<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const auto d = static_cast<T>(xhat.cols());
  MatX<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T c = dxhat.row(i).dot(xhat.row(i)) / d;
    dx.row(i) = rstd(i) * (dxhat.row(i) - c * xhat.row(i));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct ForwardCache {
  struct Layer {
    MatX<T> x_in, xhat1, h1, q, k, v, o, x_mid, xhat2, h2, u, z;
    VecX<T> r1, r2;
    std::vector<MatX<T>> probs;  // [seq * n_heads + head], T x T
  };
  std::vector<std::size_t> offsets;  // row offset of each sequence, size B + 1
  std::vector<Layer> layers;
  MatX<T> x_final, xhat_f;
  VecX<T> r_f;
};

template <typename T>
struct ForwardOutput {
  std::vector<std::size_t> offsets;  // row offset of each sequence, size B + 1
  MatX<T> logits;        // N x V, N = total tokens
  MatX<T> final_hidden;  // N x d_model (post final RMSNorm)

  std::size_t n_sequences() const { return offsets.size() - 1; }
};

namespace detail {

template <typename T>
void check_batch(const ModelConfig& c, std::span<const AssembledSequence> batch) {
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    if (s.empty()) throw InputError("forward: empty sequence in batch");
    if (s.size() > static_cast<std::size_t>(c.max_context))
      throw LengthError("forward: sequence " + std::to_string(b) + " longer than max context");
    if (s.modality.size() != s.size() || s.pos.size() != s.size() || s.loss_mask.size() != s.size())
      throw InputError("forward: ragged sequence arrays");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.tokens[i] >= static_cast<std::uint32_t>(c.vocab_total))
        throw InputError("forward: token id " + std::to_string(s.tokens[i]) + " >= vocab " +
                         std::to_string(c.vocab_total));
      if (s.modality[i] > static_cast<std::uint32_t>(c.n_modalities))
        throw InputError("forward: modality id out of range");
      if (s.modality[i] < static_cast<std::uint32_t>(c.n_modalities) &&
          s.pos[i] >= static_cast<std::uint32_t>(c.max_context))
        throw InputError("forward: position id out of range");
    }
  }
}

}  // namespace detail

// Runs the network over a batch of variable-length sequences packed into one
// row-major activation matrix. Attention is causal within each sequence.
// A modality id equal to n_modalities (PAD) receives no position embedding.
template <typename T>
ForwardOutput<T> forward(const Parameters<T>& p, std::span<const AssembledSequence> batch,
                         ForwardCache<T>* cache = nullptr) {
  const auto& c = p.config();
  const auto& lay = p.layout();
  detail::check_batch<T>(c, batch);
  const int d = c.d_model, nh = c.n_heads, dh = c.d_head();
  const T eps = static_cast<T>(c.norm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  ForwardCache<T> local;
  ForwardCache<T>& fc = cache ? *cache : local;
  const bool keep = cache != nullptr;
  fc.offsets.assign(1, 0);
  for (const auto& s : batch) fc.offsets.push_back(fc.offsets.back() + s.size());
  const auto n = static_cast<Eigen::Index>(fc.offsets.back());

  MatX<T> x(n, d);
  {
    const auto emb = p.mat(lay.tok_emb());
    Eigen::Index r = 0;
    for (const auto& s : batch) {
      for (std::size_t i = 0; i < s.size(); ++i, ++r) {
        x.row(r) = emb.row(s.tokens[i]);
        if (s.modality[i] < static_cast<std::uint32_t>(c.n_modalities))
          x.row(r) += p.mat(lay.pos(static_cast<int>(s.modality[i]))).row(s.pos[i]);
      }
    }
  }

  fc.layers.resize(static_cast<std::size_t>(c.n_layers));
  MatX<T> xhat, h, q, k, v, o, u, z;
  VecX<T> rstd;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& blk = lay.block(l);
    auto& L = fc.layers[static_cast<std::size_t>(l)];
    if (keep) L.x_in = x;

    rmsnorm_forward<T>(x, p.mat(blk.ln1), eps, xhat, rstd, h);
    q.noalias() = h * p.mat(blk.wq);
    k.noalias() = h * p.mat(blk.wk);
    v.noalias() = h * p.mat(blk.wv);
    o.setZero(n, d);
    if (keep) L.probs.resize(batch.size() * static_cast<std::size_t>(nh));
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(fc.offsets[s]);
      const auto len = static_cast<Eigen::Index>(batch[s].size());
      for (int hd = 0; hd < nh; ++hd) {
        MatX<T> sc = q.block(off, hd * dh, len, dh) * k.block(off, hd * dh, len, dh).transpose();
        for (Eigen::Index i = 0; i < len; ++i) {
          auto row = sc.row(i);
          const T mx = (row.head(i + 1) * scale).maxCoeff();
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            row(j) = std::exp(row(j) * scale - mx);
            sum += row(j);
          }
          row.head(i + 1) /= sum;
          row.tail(len - i - 1).setZero();
        }
        o.block(off, hd * dh, len, dh).noalias() = sc * v.block(off, hd * dh, len, dh);
        if (keep) L.probs[s * static_cast<std::size_t>(nh) + static_cast<std::size_t>(hd)] = std::move(sc);
      }
    }
    if (keep) {
      L.xhat1 = xhat;
      L.r1 = rstd;
      L.h1 = h;
      L.q = q;
      L.k = k;
      L.v = v;
      L.o = o;
    }
    x.noalias() += o * p.mat(blk.wo);
    if (keep) L.x_mid = x;

    rmsnorm_forward<T>(x, p.mat(blk.ln2), eps, xhat, rstd, h);
    u.noalias() = h * p.mat(blk.up);
    z = u.unaryExpr([](T a) { return gelu(a); });
    x.noalias() += z * p.mat(blk.down);
    if (keep) {
      L.xhat2 = xhat;
      L.r2 = rstd;
      L.h2 = h;
      L.u = std::move(u);
      L.z = z;
    }
  }

  ForwardOutput<T> out;
  out.offsets = fc.offsets;
  rmsnorm_forward<T>(x, p.mat(lay.ln_f()), eps, xhat, rstd, out.final_hidden);
  out.logits.noalias() = out.final_hidden * p.mat(lay.tok_emb()).transpose();
  if (keep) {
    fc.x_final = std::move(x);
    fc.xhat_f = std::move(xhat);
    fc.r_f = std::move(rstd);
  }
  return out;
}

template <typename T>
ForwardOutput<T> forward(const Parameters<T>& p, const AssembledSequence& seq) {
  return forward(p, std::span<const AssembledSequence>(&seq, 1));
}

struct LossResult {
  double mean = 0;
  double sum = 0;
  std::size_t count = 0;
  // Per packed row: NLL of the next token if it is a counted target, else NaN.
  std::vector<double> per_position;
};

// log-sum-exp over a logits row with max subtraction.
template <typename Row>
double log_sum_exp(const Row& row) {
  const double mx = static_cast<double>(row.maxCoeff());
  double s = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) s += std::exp(static_cast<double>(row(j)) - mx);
  return mx + std::log(s);
}

// Mean next-token NLL over positions whose target has loss_mask = 1.
template <typename T>
LossResult nll_loss(const ForwardOutput<T>& out, std::span<const AssembledSequence> batch) {
  LossResult r;
  r.per_position.assign(out.offsets.back(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    const auto off = out.offsets[s];
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      if (!seq.loss_mask[i + 1]) continue;
      const auto row = out.logits.row(static_cast<Eigen::Index>(off + i));
      const double nll = log_sum_exp(row) - static_cast<double>(row(seq.tokens[i + 1]));
      r.per_position[off + i] = nll;
      r.sum += nll;
      ++r.count;
    }
  }
  if (r.count == 0) throw InputError("nll_loss: degenerate batch with no contributing positions");
  r.mean = r.sum / static_cast<double>(r.count);
  return r;
}

// Computes the mean NLL of `batch` and accumulates scale * d(mean)/d(params)
// into `grads`. Returns the loss.
template <typename T>
LossResult backward(const Parameters<T>& p, std::span<const AssembledSequence> batch, Gradients<T>& grads,
                    T scale = T(1)) {
  const auto& c = p.config();
  const auto& lay = p.layout();
  if (grads.data().size() != p.data().size()) grads = Gradients<T>(c);
  const int nh = c.n_heads, hdim = c.d_head();
    const T att_scale = T(1) / std::sqrt(static_cast<T>(hdim));

  ForwardCache<T> fc;
  const ForwardOutput<T> out = forward(p, batch, &fc);
  LossResult loss = nll_loss(out, batch);
  const T w = scale / static_cast<T>(loss.count);

  // dlogits = (softmax - onehot) * w on counted rows.
  MatX<T> dlogits = MatX<T>::Zero(out.logits.rows(), out.logits.cols());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      if (!seq.loss_mask[i + 1]) continue;
      const auto r = static_cast<Eigen::Index>(out.offsets[s] + i);
      const auto row = out.logits.row(r);
      const T mx = row.maxCoeff();
      auto drow = dlogits.row(r);
      drow = (row.array() - mx).exp().matrix();
      drow /= drow.sum();
      drow(seq.tokens[i + 1]) -= T(1);
      drow *= w;
    }
  }

  auto d_emb = grads.mat(lay.tok_emb());
  d_emb.noalias() += dlogits.transpose() * out.final_hidden;
  MatX<T> dh_f = dlogits * p.mat(lay.tok_emb());
  MatX<T> dx = rmsnorm_backward<T>(dh_f, fc.xhat_f, fc.r_f, p.mat(lay.ln_f()), grads.mat(lay.ln_f()));

  const auto n = dx.rows();
  MatX<T> dz, du, dnorm, dq, dk, dv, dout;
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& blk = lay.block(l);
    const auto& L = fc.layers[static_cast<std::size_t>(l)];

    // MLP branch.
    grads.mat(blk.down).noalias() += L.z.transpose() * dx;
    dz.noalias() = dx * p.mat(blk.down).transpose();
    du = dz.array() * L.u.unaryExpr([](T a) { return gelu_grad(a); }).array();
    grads.mat(blk.up).noalias() += L.h2.transpose() * du;
    dnorm.noalias() = du * p.mat(blk.up).transpose();
    dx += rmsnorm_backward<T>(dnorm, L.xhat2, L.r2, p.mat(blk.ln2), grads.mat(blk.ln2));

    // Attention branch.
    grads.mat(blk.wo).noalias() += L.o.transpose() * dx;
    dout.noalias() = dx * p.mat(blk.wo).transpose();
    dq.setZero(n, c.d_model);
    dk.setZero(n, c.d_model);
    dv.setZero(n, c.d_model);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(fc.offsets[s]);
      const auto len = static_cast<Eigen::Index>(batch[s].size());
      for (int hd = 0; hd < nh; ++hd) {
        const auto& P = L.probs[s * static_cast<std::size_t>(nh) + static_cast<std::size_t>(hd)];
        const auto dO = dout.block(off, hd * hdim, len, hdim);
        MatX<T> dP = dO * L.v.block(off, hd * hdim, len, hdim).transpose();
        dv.block(off, hd * hdim, len, hdim).noalias() += P.transpose() * dO;
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        for (Eigen::Index i = 0; i < len; ++i) {
          const T dot = dP.row(i).head(i + 1).dot(P.row(i).head(i + 1));
          dP.row(i).head(i + 1) = (P.row(i).head(i + 1).array() * (dP.row(i).head(i + 1).array() - dot)).matrix();
          dP.row(i).tail(len - i - 1).setZero();
        }
        dP *= att_scale;
        dq.block(off, hd * hdim, len, hdim).noalias() += dP * L.k.block(off, hd * hdim, len, hdim);
        dk.block(off, hd * hdim, len, hdim).noalias() += dP.transpose() * L.q.block(off, hd * hdim, len, hdim);
      }
    }
    grads.mat(blk.wq).noalias() += L.h1.transpose() * dq;
    grads.mat(blk.wk).noalias() += L.h1.transpose() * dk;
    grads.mat(blk.wv).noalias() += L.h1.transpose() * dv;
    dnorm.noalias() = dq * p.mat(blk.wq).transpose();
    dnorm.noalias() += dk * p.mat(blk.wk).transpose();
    dnorm.noalias() += dv * p.mat(blk.wv).transpose();
    dx += rmsnorm_backward<T>(dnorm, L.xhat1, L.r1, p.mat(blk.ln1), grads.mat(blk.ln1));
  }

  Eigen::Index r = 0;
  for (const auto& s : batch) {
    for (std::size_t i = 0; i < s.size(); ++i, ++r) {
      d_emb.row(s.tokens[i]) += dx.row(r);
      if (s.modality[i] < static_cast<std::uint32_t>(c.n_modalities))
        grads.mat(lay.pos(static_cast<int>(s.modality[i]))).row(s.pos[i]) += dx.row(r);
    }
  }

  for (const auto& t : lay.tensors()) {
    for (T g : grads.span(t))
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in tensor " + t.name);
  }
  return loss;
}

template <typename T>
LossResult backward(const Parameters<T>& p, const AssembledSequence& seq, Gradients<T>& grads, T scale = T(1)) {
  return backward(p, std::span<const AssembledSequence>(&seq, 1), grads, scale);
}

// ---------------------------------------------------------------------------
// Incremental decoding

// Per-layer key/value cache for token-by-token decoding of one sequence.
template <typename T>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Parameters<T>& p) : p_(p) {
    const auto& c = p.config();
    keys_.assign(static_cast<std::size_t>(c.n_layers), MatX<T>(c.max_context, c.d_model));
    values_.assign(static_cast<std::size_t>(c.n_layers), MatX<T>(c.max_context, c.d_model));
  }

  std::size_t length() const { return len_; }
  const RowVecX<T>& hidden() const { return hidden_; }
  const RowVecX<T>& logits() const { return logits_; }

  // Feeds one token; afterwards logits() holds the next-token logits.
  void step(std::uint32_t token, std::uint32_t modality, std::uint32_t pos) {
    const auto& c = p_.config();
    const auto& lay = p_.layout();
    if (len_ >= static_cast<std::size_t>(c.max_context)) throw LengthError("decoder: context exhausted");
    if (token >= static_cast<std::uint32_t>(c.vocab_total)) throw InputError("decoder: token out of range");
    if (modality < static_cast<std::uint32_t>(c.n_modalities) && pos >= static_cast<std::uint32_t>(c.max_context))
      throw InputError("decoder: position out of range");
    const int dh = c.d_head();
    const T eps = static_cast<T>(c.norm_eps);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto t = static_cast<Eigen::Index>(len_);

    RowVecX<T> x = p_.mat(lay.tok_emb()).row(token);
    if (modality < static_cast<std::uint32_t>(c.n_modalities))
      x += p_.mat(lay.pos(static_cast<int>(modality))).row(pos);
    for (int l = 0; l < c.n_layers; ++l) {
      const auto& blk = lay.block(l);
      auto& K = keys_[static_cast<std::size_t>(l)];
      auto& V = values_[static_cast<std::size_t>(l)];
      RowVecX<T> h = norm(x, p_.mat(blk.ln1), eps);
      const RowVecX<T> q = h * p_.mat(blk.wq);
      K.row(t) = h * p_.mat(blk.wk);
      V.row(t) = h * p_.mat(blk.wv);
      RowVecX<T> o(c.d_model);
      for (int hd = 0; hd < c.n_heads; ++hd) {
        VecX<T> sc = K.block(0, hd * dh, t + 1, dh) * q.segment(hd * dh, dh).transpose() * scale;
        sc = (sc.array() - sc.maxCoeff()).exp().matrix();
        sc /= sc.sum();
        o.segment(hd * dh, dh) = sc.transpose() * V.block(0, hd * dh, t + 1, dh);
      }
      x += o * p_.mat(blk.wo);
      h = norm(x, p_.mat(blk.ln2), eps);
      RowVecX<T> u = h * p_.mat(blk.up);
      u = u.unaryExpr([](T a) { return gelu(a); });
      x += u * p_.mat(blk.down);
    }
    hidden_ = norm(x, p_.mat(lay.ln_f()), eps);
    logits_ = hidden_ * p_.mat(lay.tok_emb()).transpose();
    ++len_;
  }

 private:
  static RowVecX<T> norm(const RowVecX<T>& x, const Eigen::Map<const MatX<T>>& g, T eps) {
    const T r = T(1) / std::sqrt(x.squaredNorm() / static_cast<T>(x.size()) + eps);
    return (x * r).cwiseProduct(g.row(0));
  }

  const Parameters<T>& p_;
  std::vector<MatX<T>> keys_, values_;
  std::size_t len_ = 0;
  RowVecX<T> hidden_, logits_;
};

struct SamplingOptions {
  double temperature = 1.0;  // <= 0 selects greedy decoding
  int top_k = 0;             // 0 disables top-k filtering
};

struct GenerationResult {
  std::uint32_t modality = 0;
  std::vector<TokenId> tokens;  // local content ids, may be empty
  bool hit_cap = false;

  TokenSeq as_token_seq() const { return {modality, tokens}; }
};

namespace detail {

// Picks one id from `allowed` given logits, honoring temperature/top-k.
// Ties resolve toward the earlier entry of `allowed`.
template <typename Row>
std::uint32_t sample_restricted(const Row& logits, const std::vector<std::uint32_t>& allowed,
                                const SamplingOptions& opt, Rng& rng) {
  if (opt.temperature <= 0) {
    std::uint32_t best = allowed.front();
    for (auto id : allowed)
      if (logits(id) > logits(best)) best = id;
    return best;
  }
  std::vector<std::pair<double, std::uint32_t>> cand;
  cand.reserve(allowed.size());
  for (auto id : allowed) cand.emplace_back(static_cast<double>(logits(id)) / opt.temperature, id);
  if (opt.top_k > 0 && static_cast<std::size_t>(opt.top_k) < cand.size()) {
    std::stable_sort(cand.begin(), cand.end(), [](auto& a, auto& b) { return a.first > b.first; });
    cand.resize(static_cast<std::size_t>(opt.top_k));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto& cnd : cand) mx = std::max(mx, cnd.first);
  if (std::isinf(mx) && mx > 0) {
    for (auto& cnd : cand)
      if (cnd.first == mx) return cnd.second;
  }
  double total = 0;
  for (auto& cnd : cand) total += (cnd.first = std::exp(cnd.first - mx));
  double r = rng.uniform() * total;
  for (auto& cnd : cand) {
    r -= cnd.first;
    if (r < 0) return cnd.second;
  }
  return cand.back().second;
}

}  // namespace detail

// Ancestral sampling of a `target` segment after `prefix`. Sampling is
// restricted to the target's content ids and EOS_target; reaching `max_len`
// content tokens truncates and closes the segment.
template <typename T>
GenerationResult generate(const Parameters<T>& p, const TokenLayout& layout, const AssembledSequence& prefix,
                          std::uint32_t target, std::size_t max_len, const SamplingOptions& opt, Rng& rng) {
  if (prefix.empty()) throw InputError("generate: empty prefix");
  if (target >= layout.n_modalities()) throw InputError("generate: target modality out of range");
  if (!layout.is_eos(prefix.tokens.back())) throw InputError("generate: prefix must end with an EOS token");
  if (prefix.size() + max_len + 2 > static_cast<std::size_t>(p.config().max_context))
    throw LengthError("generate: prefix plus max_len exceeds context");

  IncrementalDecoder<T> dec(p);
  for (std::size_t i = 0; i < prefix.size(); ++i) dec.step(prefix.tokens[i], prefix.modality[i], prefix.pos[i]);

  std::vector<std::uint32_t> allowed;
  const auto off = layout.content_offset(target);
  for (std::uint32_t t = 0; t < layout.content_size(target); ++t) allowed.push_back(off + t);
  allowed.push_back(layout.eos(target));

  GenerationResult res;
  res.modality = target;
  std::uint32_t pos = 0;
  dec.step(layout.bos(target), target, pos++);
  while (true) {
    const auto id = detail::sample_restricted(dec.logits(), allowed, opt, rng);
    if (id == layout.eos(target)) break;
    res.tokens.push_back(id - off);
    if (res.tokens.size() >= max_len) {
      res.hit_cap = true;
      break;
    }
    dec.step(id, target, pos++);
  }
  return res;
}

// Mean of the final hidden states over non-PAD positions.
template <typename T>
VecX<T> features_from_hidden(const ForwardOutput<T>& out, std::size_t s, const AssembledSequence& seq,
                             std::uint32_t pad_token) {
  VecX<T> f = VecX<T>::Zero(out.final_hidden.cols());
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.tokens[i] == pad_token) continue;
    f += out.final_hidden.row(static_cast<Eigen::Index>(out.offsets[s] + i)).transpose();
    ++cnt;
  }
  if (cnt == 0) throw InputError("extract_features: sequence has no non-PAD positions");
  return f / static_cast<T>(cnt);
}

template <typename T>
VecX<T> extract_features(const Parameters<T>& p, const TokenLayout& layout, const AssembledSequence& seq) {
  const auto out = forward(p, seq);
  return features_from_hidden(out, 0, seq, layout.pad());
}

template <typename T>
MatX<T> extract_features(const Parameters<T>& p, const TokenLayout& layout, std::span<const AssembledSequence> seqs) {
  MatX<T> feats(static_cast<Eigen::Index>(seqs.size()), p.config().d_model);
  const auto out = forward(p, seqs);
  for (std::size_t s = 0; s < seqs.size(); ++s)
    feats.row(static_cast<Eigen::Index>(s)) = features_from_hidden(out, s, seqs[s], layout.pad()).transpose();
  return feats;
}

}  // namespace loretta
