#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pia/rng.hpp"
#include "pia/tensor.hpp"

namespace pia {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden = 32;
  std::size_t layers = 8;
  std::size_t heads = 4;
  std::size_t mlp_multiple = 4;
  std::size_t max_seq_len = 128;
  std::string positional = "learned_absolute";

  std::size_t mlp_hidden() const { return hidden * mlp_multiple; }
  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    detail::require(vocab_size >= 2, "config: vocab_size must be at least 2");
    detail::require(layers >= 1, "config: layers must be at least 1");
    detail::require(heads >= 1 && hidden % heads == 0,
                    "config: hidden must be divisible by heads");
    detail::require(max_seq_len >= 1, "config: max_seq_len must be at least 1");
    detail::require(positional == "learned_absolute",
                    "config: unknown positional scheme");
  }
};

struct TokenSequence {
  std::vector<std::int32_t> ids;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<std::int32_t> v) : ids(std::move(v)) {}

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

enum class Param { attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2 };

inline const char* param_name(Param p) {
  switch (p) {
    case Param::attn_norm: return "attn_norm";
    case Param::wq: return "wq";
    case Param::wk: return "wk";
    case Param::wv: return "wv";
    case Param::wo: return "wo";
    case Param::mlp_norm: return "mlp_norm";
    case Param::w1: return "w1";
    case Param::w2: return "w2";
  }
  return "?";
}

inline std::optional<Param> param_from_name(const std::string& s) {
  for (Param p : {Param::attn_norm, Param::wq, Param::wk, Param::wv, Param::wo,
                  Param::mlp_norm, Param::w1, Param::w2}) {
    if (s == param_name(p)) return p;
  }
  return std::nullopt;
}

struct LayerWeights {
  Tensor attn_norm;  // {h}
  Tensor wq, wk, wv, wo;  // {h, h}
  Tensor mlp_norm;   // {h}
  Tensor w1;         // {h, m}
  Tensor w2;         // {m, h}

  const Tensor& get(Param p) const {
    switch (p) {
      case Param::attn_norm: return attn_norm;
      case Param::wq: return wq;
      case Param::wk: return wk;
      case Param::wv: return wv;
      case Param::wo: return wo;
      case Param::mlp_norm: return mlp_norm;
      case Param::w1: return w1;
      case Param::w2: return w2;
    }
    throw std::invalid_argument("unknown layer parameter");
  }

  Tensor& get(Param p) { return const_cast<Tensor&>(std::as_const(*this).get(p)); }
};

struct ModelWeights {
  ModelConfig config;
  Tensor embedding;   // {V, h}
  Tensor positional;  // {max_seq_len, h}
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // {h}
};

// Inclusive 1-based layer range; hi < lo means the empty range.
struct LayerRange {
  std::size_t lo = 1;
  std::size_t hi = 0;

  bool empty() const { return hi < lo; }
  std::size_t count() const { return empty() ? 0 : hi - lo + 1; }
  static LayerRange first(std::size_t n) { return LayerRange{1, n}; }
};

namespace detail {

inline bool rows_equal(const Tensor& m, std::size_t a, std::size_t b) {
  for (std::size_t j = 0; j < m.cols(); ++j) {
    if (m(a, j) != m(b, j)) return false;
  }
  return true;
}

inline void require_distinct_rows(const Tensor& m, const char* what) {
  for (std::size_t a = 0; a < m.rows(); ++a) {
    for (std::size_t b = a + 1; b < m.rows(); ++b) {
      if (rows_equal(m, a, b)) {
        throw std::runtime_error(std::string(what) + ": duplicate rows " +
                                 std::to_string(a) + " and " + std::to_string(b));
      }
    }
  }
}

}  // namespace detail

// Seeded Gaussian initialization. sigma_embed controls embedding and
// positional tables; attention/MLP matrices use a variance-preserving
// 1/sqrt(fan_in) scale so depth produces non-trivial mixing. Norm gains
// start at one. Embedding rows are re-sampled until pairwise distinct.
inline ModelWeights random_init(const ModelConfig& cfg, std::uint64_t seed,
                                double sigma_embed = 0.02) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0x6d6f64656cull));
  ModelWeights w;
  w.config = cfg;

  auto gaussian = [&rng](std::vector<std::size_t> shape, double sigma) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, sigma);
    return t;
  };

  w.embedding = gaussian({cfg.vocab_size, cfg.hidden}, sigma_embed);
  for (std::size_t a = 1; a < cfg.vocab_size; ++a) {
    for (std::size_t b = 0; b < a;) {
      if (detail::rows_equal(w.embedding, a, b)) {
        for (std::size_t j = 0; j < cfg.hidden; ++j) {
          w.embedding(a, j) = rng.normal(0.0, sigma_embed);
        }
        b = 0;  // re-sampled row must be rechecked against all earlier rows
      } else {
        ++b;
      }
    }
  }
  w.positional = gaussian({cfg.max_seq_len, cfg.hidden}, sigma_embed);

  const double attn_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  const double proj_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden()));
  w.layers.resize(cfg.layers);
  for (LayerWeights& l : w.layers) {
    l.attn_norm = Tensor::full({cfg.hidden}, 1.0);
    l.wq = gaussian({cfg.hidden, cfg.hidden}, attn_sigma);
    l.wk = gaussian({cfg.hidden, cfg.hidden}, attn_sigma);
    l.wv = gaussian({cfg.hidden, cfg.hidden}, attn_sigma);
    l.wo = gaussian({cfg.hidden, cfg.hidden}, attn_sigma);
    l.mlp_norm = Tensor::full({cfg.hidden}, 1.0);
    l.w1 = gaussian({cfg.hidden, cfg.mlp_hidden()}, attn_sigma);
    l.w2 = gaussian({cfg.mlp_hidden(), cfg.hidden}, proj_sigma);
  }
  w.final_norm = Tensor::full({cfg.hidden}, 1.0);
  return w;
}

inline void validate_tokens(const ModelWeights& w, const TokenSequence& x) {
  detail::require(!x.ids.empty(), "token sequence must be non-empty");
  detail::require(x.size() <= w.config.max_seq_len,
                  "token sequence exceeds max_seq_len");
  for (std::int32_t id : x.ids) {
    detail::require(id >= 0 && static_cast<std::size_t>(id) < w.config.vocab_size,
                    "token id out of range");
  }
}

// Embedding-layer output: token embedding row plus the learned positional row.
inline Tensor embed(const ModelWeights& w, const TokenSequence& x) {
  validate_tokens(w, x);
  Tensor out = ops::embedding_lookup(w.embedding, x.ids);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < w.config.hidden; ++j) {
      out(i, j) += w.positional(i, j);
    }
  }
  return out;
}

// Rows 0..s-1 of the positional table.
inline Tensor positional_rows(const ModelWeights& w, std::size_t s) {
  detail::require(s <= w.config.max_seq_len, "sequence exceeds max_seq_len");
  return ops::slice_rows(w.positional, 0, s);
}

constexpr double kAttentionMask = -1e9;

inline Tensor causal_mask(std::size_t s) {
  Tensor m({s, s});
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = i + 1; j < s; ++j) m(i, j) = kAttentionMask;
  }
  return m;
}

// ---------------------------------------------------------------------------
// One transformer-layer implementation, shared by the plain evaluation path
// and the autograd path via a context type. Weight access goes through a
// provider callable so adapter estimates can be spliced in as graph leaves.
// ---------------------------------------------------------------------------

struct EvalCtx {
  using Value = Tensor;
  const Tensor& peek(const Value& v) const { return v; }
  Value constant(const Tensor& t) const { return t; }
  Value add(const Value& a, const Value& b) const { return ops::add(a, b); }
  Value scale(const Value& a, double c) const { return ops::scale(a, c); }
  Value matmul(const Value& a, const Value& b) const { return ops::matmul(a, b); }
  Value transpose(const Value& a) const { return ops::transpose(a); }
  Value softmax_rows(const Value& a) const { return ops::softmax(a, 1); }
  Value rmsnorm(const Value& a, const Value& g) const { return ops::rmsnorm(a, g); }
  Value gelu(const Value& a) const { return ops::gelu(a); }
  Value slice_cols(const Value& a, std::size_t b, std::size_t n) const {
    return ops::slice_cols(a, b, n);
  }
  Value concat_cols(const std::vector<Value>& parts) const {
    return ops::concat_cols(parts);
  }
};

struct GraphCtx {
  Tape& tape;
  using Value = Var;
  const Tensor& peek(Value v) const { return tape.value(v); }
  Value constant(const Tensor& t) const { return tape.constant(t); }
  Value add(Value a, Value b) const { return tape.add(a, b); }
  Value scale(Value a, double c) const { return tape.scale(a, c); }
  Value matmul(Value a, Value b) const { return tape.matmul(a, b); }
  Value transpose(Value a) const { return tape.transpose(a); }
  Value softmax_rows(Value a) const { return tape.softmax(a, 1); }
  Value rmsnorm(Value a, Value g) const { return tape.rmsnorm(a, g); }
  Value gelu(Value a) const { return tape.gelu(a); }
  Value slice_cols(Value a, std::size_t b, std::size_t n) const {
    return tape.slice_cols(a, b, n);
  }
  Value concat_cols(const std::vector<Value>& parts) const {
    return tape.concat_cols(parts);
  }
};

// Provider that exposes fixed model weights to either context.
inline auto const_weights(const ModelWeights& w) {
  return [&w](auto& ctx, std::size_t layer, Param p) -> decltype(auto) {
    if constexpr (std::is_same_v<std::decay_t<decltype(ctx)>, EvalCtx>) {
      return w.layers[layer - 1].get(p);
    } else {
      return ctx.constant(w.layers[layer - 1].get(p));
    }
  };
}

// Applies transformer layers range.lo..range.hi (pre-norm, causal
// self-attention, GELU MLP) to a post-embedding activation.
template <class Ctx, class WeightFn>
typename Ctx::Value run_layers(Ctx& ctx, const ModelConfig& cfg,
                               typename Ctx::Value x, WeightFn&& weights,
                               LayerRange range) {
  if (range.empty()) return x;
  detail::require(range.lo >= 1 && range.hi <= cfg.layers,
                  "layer range outside [1, layers]");
  const std::size_t s = ctx.peek(x).rows();
  detail::require(ctx.peek(x).cols() == cfg.hidden,
                  "activation width does not match hidden size");
  const std::size_t dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto mask = ctx.constant(causal_mask(s));

  for (std::size_t layer = range.lo; layer <= range.hi; ++layer) {
    decltype(auto) gn = weights(ctx, layer, Param::attn_norm);
    const auto a = ctx.rmsnorm(x, gn);
    decltype(auto) wq = weights(ctx, layer, Param::wq);
    decltype(auto) wk = weights(ctx, layer, Param::wk);
    decltype(auto) wv = weights(ctx, layer, Param::wv);
    const auto q = ctx.matmul(a, wq);
    const auto k = ctx.matmul(a, wk);
    const auto v = ctx.matmul(a, wv);

    std::vector<typename Ctx::Value> heads;
    heads.reserve(cfg.heads);
    for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
      const auto qh = ctx.slice_cols(q, hh * dh, dh);
      const auto kh = ctx.slice_cols(k, hh * dh, dh);
      const auto vh = ctx.slice_cols(v, hh * dh, dh);
      auto scores = ctx.scale(ctx.matmul(qh, ctx.transpose(kh)), att_scale);
      scores = ctx.add(scores, mask);
      heads.push_back(ctx.matmul(ctx.softmax_rows(scores), vh));
    }
    decltype(auto) wo = weights(ctx, layer, Param::wo);
    x = ctx.add(x, ctx.matmul(ctx.concat_cols(heads), wo));

    decltype(auto) mn = weights(ctx, layer, Param::mlp_norm);
    const auto m = ctx.rmsnorm(x, mn);
    decltype(auto) w1 = weights(ctx, layer, Param::w1);
    decltype(auto) w2 = weights(ctx, layer, Param::w2);
    x = ctx.add(x, ctx.matmul(ctx.gelu(ctx.matmul(m, w1)), w2));
  }
  return x;
}

inline Tensor forward_layers(const ModelWeights& w, const Tensor& v, LayerRange range) {
  EvalCtx ctx;
  return run_layers(ctx, w.config, v, const_weights(w), range);
}

inline Var forward_layers(Tape& tape, const ModelWeights& w, Var v, LayerRange range) {
  GraphCtx ctx{tape};
  return run_layers(ctx, w.config, v, const_weights(w), range);
}

// Per-dimension min/max over the token embedding rows.
inline std::pair<Tensor, Tensor> embedding_bounds(const ModelWeights& w) {
  const std::size_t h = w.config.hidden;
  Tensor lo({h});
  Tensor hi({h});
  for (std::size_t j = 0; j < h; ++j) {
    double mn = w.embedding(0, j);
    double mx = mn;
    for (std::size_t t = 1; t < w.config.vocab_size; ++t) {
      mn = std::min(mn, w.embedding(t, j));
      mx = std::max(mx, w.embedding(t, j));
    }
    lo[j] = mn;
    hi[j] = mx;
  }
  return {lo, hi};
}

// Token ids ordered by ascending L2 distance between `point` (in token
// embedding space, no positional term) and the embedding rows; distance ties
// break toward the smaller id. K larger than the vocabulary clamps.
inline std::vector<std::int32_t> nearest_tokens(const ModelWeights& w,
                                                const Tensor& point, std::size_t k) {
  detail::require(k >= 1, "nearest_tokens: K must be at least 1");
  detail::require(point.numel() == w.config.hidden,
                  "nearest_tokens: query size must equal hidden size");
  const std::size_t vocab = w.config.vocab_size;
  std::vector<std::pair<double, std::int32_t>> scored(vocab);
  for (std::size_t t = 0; t < vocab; ++t) {
    double d = 0.0;
    for (std::size_t j = 0; j < w.config.hidden; ++j) {
      const double diff = point.data[j] - w.embedding(t, j);
      d += diff * diff;
    }
    scored[t] = {d, static_cast<std::int32_t>(t)};
  }
  std::sort(scored.begin(), scored.end());
  const std::size_t take = std::min(k, vocab);
  std::vector<std::int32_t> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = scored[i].second;
  return out;
}

// ---------------------------------------------------------------------------
// LoRA adapters: per wrapped matrix W ({in, out}) a pair b ({in, r}),
// a ({r, out}) with effective weight W + (alpha / r) * b * a.
// ---------------------------------------------------------------------------

struct LoraEntry {
  std::size_t layer = 1;  // 1-based
  Param target = Param::wq;
  Tensor a;  // {r, out}
  Tensor b;  // {in, r}
};

struct LoraAdapterSet {
  std::size_t rank = 0;
  double alpha = 1.0;
  std::vector<LoraEntry> entries;

  double scaling() const { return rank == 0 ? 0.0 : alpha / static_cast<double>(rank); }
};

inline bool lora_wrappable(Param p) {
  return p == Param::wq || p == Param::wk || p == Param::wv || p == Param::wo ||
         p == Param::w1 || p == Param::w2;
}

inline void validate_adapters(const ModelConfig& cfg, const LoraAdapterSet& set) {
  detail::require(set.rank >= 1, "adapter set: rank must be at least 1");
  for (const LoraEntry& e : set.entries) {
    detail::require(e.layer >= 1 && e.layer <= cfg.layers, "adapter layer out of range");
    detail::require(lora_wrappable(e.target), "adapter target must be a weight matrix");
    detail::require(e.a.ndim() == 2 && e.b.ndim() == 2, "adapter factors must be matrices");
    detail::require(e.a.rows() == set.rank && e.b.cols() == set.rank,
                    "adapter factor rank mismatch");
  }
}

inline ModelWeights merge_adapters(const ModelWeights& base, const LoraAdapterSet& set) {
  validate_adapters(base.config, set);
  ModelWeights out = base;
  for (const LoraEntry& e : set.entries) {
    Tensor& w = out.layers[e.layer - 1].get(e.target);
    detail::require(e.b.rows() == w.rows() && e.a.cols() == w.cols(),
                    "adapter shape does not match wrapped matrix");
    const Tensor delta = ops::scale(ops::matmul(e.b, e.a), set.scaling());
    w = ops::add(w, delta);
  }
  return out;
}

// Random non-zero adapters for simulating a parameter-efficiently fine-tuned
// model. `strength` is the ratio between the update's entry scale and the
// base matrix scale (1/sqrt(fan_in)).
inline LoraAdapterSet random_lora(const ModelConfig& cfg, std::size_t rank,
                                  const std::vector<Param>& targets,
                                  double strength, std::uint64_t seed) {
  cfg.validate();
  detail::require(rank >= 1, "random_lora: rank must be at least 1");
  Rng rng(Rng::mix(seed, 0x6c6f7261ull));
  LoraAdapterSet set;
  set.rank = rank;
  set.alpha = static_cast<double>(rank);
  auto dims = [&cfg](Param p) -> std::pair<std::size_t, std::size_t> {
    switch (p) {
      case Param::w1: return {cfg.hidden, cfg.mlp_hidden()};
      case Param::w2: return {cfg.mlp_hidden(), cfg.hidden};
      default: return {cfg.hidden, cfg.hidden};
    }
  };
  for (std::size_t layer = 1; layer <= cfg.layers; ++layer) {
    for (Param p : targets) {
      detail::require(lora_wrappable(p), "random_lora: bad target");
      const auto [in, out] = dims(p);
      const double base_scale = 1.0 / std::sqrt(static_cast<double>(in));
      const double factor_sigma =
          std::sqrt(strength * base_scale / std::sqrt(static_cast<double>(rank)));
      LoraEntry e;
      e.layer = layer;
      e.target = p;
      e.a = Tensor({rank, out});
      e.b = Tensor({in, rank});
      for (double& v : e.a.data) v = rng.normal(0.0, factor_sigma);
      for (double& v : e.b.data) v = rng.normal(0.0, factor_sigma);
      set.entries.push_back(std::move(e));
    }
  }
  return set;
}

}  // namespace pia
