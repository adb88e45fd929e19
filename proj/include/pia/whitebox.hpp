#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pia/model.hpp"
#include "pia/oracle.hpp"
#include "pia/rng.hpp"
#include "pia/tensor.hpp"

namespace pia {

struct AttackConfig {
  double lambda = 0.1;                   // constraint coefficient
  double beta = 0.1;                     // optimization learning rate
  std::size_t iterations = 2000;         // N
  std::size_t embed_candidates = 10;     // K = |S_e|
  std::size_t semantic_candidates = 10;  // Y = |S_s|
  double temperature = 1.0;              // softmax-relaxation baseline, T <= 1
  bool bos_known = true;   // leading BOS token is known to the attacker
  std::int32_t bos_token = 0;
  std::uint64_t seed = 0;
  std::optional<Tensor> init;  // explicit start point; default is uniform in [L, R]

  void validate() const {
    detail::require(lambda >= 0.0, "attack: lambda must be non-negative");
    detail::require(beta > 0.0, "attack: beta must be positive");
    detail::require(iterations >= 1, "attack: need at least one iteration");
    detail::require(embed_candidates + semantic_candidates >= 1,
                    "attack: K + Y must be at least 1");
    detail::require(temperature > 0.0, "attack: temperature must be positive");
  }
};

struct OptimizedEmbedding {
  Tensor vhat;  // {|x|, h}, token-embedding space
  double final_loss = 0.0;
  std::vector<double> loss_trace;
  bool diverged = false;
  bool tail_nonincreasing = true;  // soft check over the last 10% of iterations
};

namespace detail {

// Per-row nearest embedding rows of the current iterate; the constraint's
// argmin token is held fixed for the step.
inline Tensor nearest_embedding_rows(const ModelWeights& w, const Tensor& v) {
  const std::size_t h = w.config.hidden;
  Tensor out(v.shape);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double best = 0.0;
    std::size_t best_t = 0;
    for (std::size_t t = 0; t < w.config.vocab_size; ++t) {
      double d = 0.0;
      for (std::size_t j = 0; j < h; ++j) {
        const double diff = v(i, j) - w.embedding(t, j);
        d += diff * diff;
      }
      if (t == 0 || d < best) {
        best = d;
        best_t = t;
      }
    }
    for (std::size_t j = 0; j < h; ++j) out(i, j) = w.embedding(best_t, j);
  }
  return out;
}

inline void clamp_to_bounds(Tensor& v, const Tensor& lo, const Tensor& hi) {
  for (std::size_t i = 0; i < v.rows(); ++i) {
    for (std::size_t j = 0; j < v.cols(); ++j) {
      v(i, j) = std::min(std::max(v(i, j), lo[j]), hi[j]);
    }
  }
}

inline bool tail_nonincreasing(const std::vector<double>& trace) {
  if (trace.size() < 2) return true;
  const std::size_t tail = std::max<std::size_t>(2, trace.size() / 10);
  for (std::size_t i = trace.size() - tail; i + 1 < trace.size(); ++i) {
    const double tol = 1e-12 * std::max(1.0, std::abs(trace[i]));
    if (trace[i + 1] > trace[i] + tol) return false;
  }
  return true;
}

// Gradient descent on the activation-matching objective, optionally with the
// vocabulary-proximity penalty and per-dimension clamping. Returns the best
// iterate seen. A non-finite loss triggers halving-on-NaN backtracking.
inline OptimizedEmbedding optimize_embedding(const ModelWeights& w, const Tensor& a,
                                             LayerRange range, const AttackConfig& cfg,
                                             double lambda, bool clamp) {
  cfg.validate();
  require(a.ndim() == 2 && a.cols() == w.config.hidden,
          "optimize: activation width must equal hidden size");
  require(range.empty() || range.hi <= w.config.layers,
          "optimize: layer range exceeds model depth");
  const std::size_t s = a.rows();
  const std::size_t h = w.config.hidden;
  const auto [lo, hi] = embedding_bounds(w);

  Tensor v({s, h});
  if (cfg.init) {
    require(cfg.init->shape == v.shape, "optimize: init shape mismatch");
    v = *cfg.init;
  } else {
    Rng rng(Rng::mix(cfg.seed, 0x76686174ull));
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < h; ++j) v(i, j) = rng.uniform(lo[j], hi[j]);
    }
  }

  if (clamp) clamp_to_bounds(v, lo, hi);
  const Tensor pos = positional_rows(w, s);

  OptimizedEmbedding result;
  result.final_loss = std::numeric_limits<double>::infinity();

  // N updates; the trace holds the N+1 objective evaluations around them.
  Tensor prev_v = v;
  Tensor prev_grad;
  double step_scale = 1.0;
  std::size_t halvings = 0;
  std::size_t steps_done = 0;
  while (true) {
    Tape tape;
    const Var u = tape.leaf(v);
    Var input = u;
    if (!range.empty()) input = tape.add(u, tape.constant(pos));
    const Var act = forward_layers(tape, w, input, range);
    Var loss_var = tape.l2_norm_sq(tape.sub(act, tape.constant(a)));
    if (lambda > 0.0) {
      const Var pen =
          tape.l2_norm_sq(tape.sub(u, tape.constant(nearest_embedding_rows(w, v))));
      loss_var = tape.add(loss_var, tape.scale(pen, lambda));
    }
    const double loss = tape.value(loss_var)[0];

    if (!std::isfinite(loss)) {
      // the previous step was too large: halve it and retry from prev_v
      if (prev_grad.empty() || ++halvings > 60) {
        result.diverged = true;
        break;
      }
      step_scale *= 0.5;
      v = prev_v;
      for (std::size_t i = 0; i < v.numel(); ++i) {
        v.data[i] -= cfg.beta * step_scale * prev_grad.data[i];
      }
      if (clamp) clamp_to_bounds(v, lo, hi);
      continue;
    }

    result.loss_trace.push_back(loss);
    if (loss < result.final_loss) {
      result.final_loss = loss;
      result.vhat = v;
    }
    if (steps_done == cfg.iterations) break;

    tape.backward(loss_var);
    prev_grad = tape.grad(u);
    prev_v = v;
    step_scale = 1.0;
    halvings = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) {
      v.data[i] -= cfg.beta * prev_grad.data[i];
    }
    if (clamp) clamp_to_bounds(v, lo, hi);
    ++steps_done;
  }

  if (result.vhat.empty()) result.vhat = v;  // diverged before any finite loss
  result.tail_nonincreasing = tail_nonincreasing(result.loss_trace);
  return result;
}

}  // namespace detail

inline OptimizedEmbedding constrained_optimize(const ModelWeights& w, const Tensor& a,
                                               LayerRange range, const AttackConfig& cfg) {
  return detail::optimize_embedding(w, a, range, cfg, cfg.lambda, /*clamp=*/true);
}

inline OptimizedEmbedding naive_optimize(const ModelWeights& w, const Tensor& a,
                                         LayerRange range, const AttackConfig& cfg) {
  return detail::optimize_embedding(w, a, range, cfg, /*lambda=*/0.0, /*clamp=*/false);
}

// Nearest-embedding-row rounding of each optimized position.
inline TokenSequence naive_discretize(const ModelWeights& w, const Tensor& vhat) {
  detail::require(vhat.ndim() == 2 && vhat.cols() == w.config.hidden,
                  "naive_discretize: bad embedding shape");
  TokenSequence out;
  out.ids.reserve(vhat.rows());
  for (std::size_t i = 0; i < vhat.rows(); ++i) {
    out.ids.push_back(nearest_tokens(w, vhat.row(i), 1)[0]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Greedy per-position discretization guided by the recorded activation.
// ---------------------------------------------------------------------------

struct PositionDiagnostics {
  std::size_t position = 0;                 // 0-based
  std::vector<std::int32_t> embed_set;      // S_e
  std::vector<std::int32_t> semantic_set;   // S_s
  std::vector<std::int32_t> candidates;     // evaluated union, ascending ids
  std::vector<double> distances;            // ||F(E(prefix+t))_j - A_j||^2
  std::int32_t chosen = -1;
  std::int32_t truth = -1;  // -1 when unknown
  bool truth_in_embed = false;
  bool truth_in_semantic = false;
  bool truth_in_union = false;
  bool chosen_is_truth = false;
};

struct DiscretizeResult {
  TokenSequence tokens;
  std::vector<PositionDiagnostics> positions;
};

namespace detail {

template <class CandidateFn>
DiscretizeResult greedy_calibrate(const ModelWeights& w, const Tensor& a,
                                  LayerRange range, CandidateFn&& candidates_at,
                                  const TokenSequence* truth) {
  require(a.ndim() == 2 && a.cols() == w.config.hidden,
          "discretize: activation width must equal hidden size");
  const std::size_t s = a.rows();
  require(s <= w.config.max_seq_len, "discretize: activation longer than max_seq_len");
  if (truth) require(truth->size() == s, "discretize: truth length mismatch");

  DiscretizeResult result;
  result.tokens.ids.reserve(s);
  for (std::size_t j = 0; j < s; ++j) {
    PositionDiagnostics diag;
    diag.position = j;
    candidates_at(j, result.tokens, diag);

    std::set<std::int32_t> uni(diag.embed_set.begin(), diag.embed_set.end());
    uni.insert(diag.semantic_set.begin(), diag.semantic_set.end());
    if (uni.empty()) {
      // No candidate source covers this position (K = 0 before any prefix
      // exists); fall back to full-vocabulary calibration.
      for (std::size_t t = 0; t < w.config.vocab_size; ++t) {
        uni.insert(static_cast<std::int32_t>(t));
      }
    }
    diag.candidates.assign(uni.begin(), uni.end());
    diag.distances.reserve(diag.candidates.size());

    TokenSequence attempt = result.tokens;
    attempt.ids.push_back(0);
    std::int32_t best_token = -1;
    double best_dist = 0.0;
    for (std::int32_t t : diag.candidates) {
      attempt.ids.back() = t;
      const Tensor act = forward_layers(w, embed(w, attempt), range);
      double d = 0.0;
      for (std::size_t c = 0; c < w.config.hidden; ++c) {
        const double diff = act(j, c) - a(j, c);
        d += diff * diff;
      }
      diag.distances.push_back(d);
      if (best_token < 0 || d < best_dist) {  // ascending ids: ties keep smaller id
        best_dist = d;
        best_token = t;
      }
    }
    diag.chosen = best_token;
    if (truth) {
      diag.truth = truth->ids[j];
      auto contains = [&](const std::vector<std::int32_t>& v) {
        return std::find(v.begin(), v.end(), diag.truth) != v.end();
      };
      diag.truth_in_embed = contains(diag.embed_set);
      diag.truth_in_semantic = contains(diag.semantic_set);
      diag.truth_in_union = contains(diag.candidates);
      diag.chosen_is_truth = diag.chosen == diag.truth;
    }
    result.tokens.ids.push_back(best_token);
    result.positions.push_back(std::move(diag));
  }
  return result;
}

}  // namespace detail

// Candidate sets from the optimized embedding (S_e, nearest-K rows) plus the
// oracle's next-token predictions (S_s); ties and evaluation order are id
// ascending, so results are independent of candidate evaluation schedule.
inline DiscretizeResult adaptive_discretize(const ModelWeights& w, const Tensor& a,
                                            LayerRange range, const Tensor& vhat,
                                            const OracleLM* oracle,
                                            const AttackConfig& cfg,
                                            const TokenSequence* truth = nullptr) {
  cfg.validate();
  detail::require(vhat.ndim() == 2 && vhat.rows() == a.rows() &&
                      vhat.cols() == w.config.hidden,
                  "adaptive_discretize: optimized embedding shape mismatch");
  auto candidates_at = [&](std::size_t j, const TokenSequence& prefix,
                           PositionDiagnostics& diag) {
    if (j == 0 && cfg.bos_known) {
      diag.embed_set = {cfg.bos_token};
      return;
    }
    if (cfg.embed_candidates >= 1) {
      diag.embed_set = nearest_tokens(w, vhat.row(j), cfg.embed_candidates);
    }
    if (oracle && cfg.semantic_candidates >= 1 && j > 0) {
      diag.semantic_set = semantic_candidates(*oracle, prefix, cfg.semantic_candidates);
    }
  };
  return detail::greedy_calibrate(w, a, range, candidates_at, truth);
}

// Full-vocabulary activation calibration at every position. Exact on
// undefended activations; tractable only at small |V| * |x|.
inline DiscretizeResult exhaustive_discretize(const ModelWeights& w, const Tensor& a,
                                              LayerRange range,
                                              const TokenSequence* truth = nullptr) {
  auto candidates_at = [&](std::size_t, const TokenSequence&, PositionDiagnostics& diag) {
    diag.embed_set.resize(w.config.vocab_size);
    for (std::size_t t = 0; t < w.config.vocab_size; ++t) {
      diag.embed_set[t] = static_cast<std::int32_t>(t);
    }
  };
  return detail::greedy_calibrate(w, a, range, candidates_at, truth);
}

// ---------------------------------------------------------------------------
// Softmax-relaxation baseline: optimize position scores z with
// vhat_i = E^T softmax(z_i / T), then read tokens off argmax z.
// ---------------------------------------------------------------------------

struct RelaxResult {
  Tensor z;     // {|x|, V}
  Tensor vhat;  // {|x|, h}
  TokenSequence tokens;
  double final_loss = 0.0;
  std::vector<double> loss_trace;
  bool diverged = false;
};

inline RelaxResult softmax_relax_optimize(const ModelWeights& w, const Tensor& a,
                                          LayerRange range, double temperature,
                                          std::size_t steps, double beta,
                                          std::uint64_t seed,
                                          const std::optional<Tensor>& z_init = {}) {
  detail::require(temperature > 0.0, "relax: temperature must be positive");
  detail::require(steps >= 1, "relax: need at least one step");
  const std::size_t s = a.rows();
  const std::size_t vocab = w.config.vocab_size;

  Tensor z({s, vocab});
  if (z_init) {
    detail::require(z_init->shape == z.shape, "relax: init shape mismatch");
    z = *z_init;
  } else {
    Rng rng(Rng::mix(seed, 0x72656c6178ull));
    for (double& x : z.data) x = rng.normal(0.0, 1.0);
  }

  const Tensor pos = positional_rows(w, s);
  RelaxResult result;
  result.final_loss = std::numeric_limits<double>::infinity();

  auto build = [&](Tape& tape, const Tensor& zv, Var& z_var, Var& vhat_var) {
    z_var = tape.leaf(zv);
    const Var sm = tape.softmax(tape.scale(z_var, 1.0 / temperature), 1);
    vhat_var = tape.matmul(sm, tape.constant(w.embedding));
    Var input = vhat_var;
    if (!range.empty()) input = tape.add(vhat_var, tape.constant(pos));
    const Var act = forward_layers(tape, w, input, range);
    return tape.l2_norm_sq(tape.sub(act, tape.constant(a)));
  };

  Tensor prev_z = z;
  Tensor prev_grad;
  double step_scale = 1.0;
  std::size_t halvings = 0;
  std::size_t steps_done = 0;
  while (true) {
    Tape tape;
    Var z_var, vhat_var;
    const Var loss_var = build(tape, z, z_var, vhat_var);
    const double loss = tape.value(loss_var)[0];
    if (!std::isfinite(loss)) {
      if (prev_grad.empty() || ++halvings > 60) {
        result.diverged = true;
        break;
      }
      step_scale *= 0.5;
      z = prev_z;
      for (std::size_t i = 0; i < z.numel(); ++i) {
        z.data[i] -= beta * step_scale * prev_grad.data[i];
      }
      continue;
    }
    result.loss_trace.push_back(loss);
    if (loss < result.final_loss) {
      result.final_loss = loss;
      result.z = z;
      result.vhat = tape.value(vhat_var);
    }
    if (steps_done == steps) break;
    tape.backward(loss_var);
    prev_grad = tape.grad(z_var);
    prev_z = z;
    step_scale = 1.0;
    halvings = 0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      z.data[i] -= beta * prev_grad.data[i];
    }
    ++steps_done;
  }

  if (result.z.empty()) {
    result.z = z;
    Tape tape;
    Var z_var, vhat_var;
    build(tape, z, z_var, vhat_var);
    result.vhat = tape.value(vhat_var);
  }
  result.tokens.ids.reserve(s);
  for (std::size_t i = 0; i < s; ++i) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < vocab; ++t) {
      if (result.z(i, t) > result.z(i, best)) best = t;  // ties keep smaller id
    }
    result.tokens.ids.push_back(static_cast<std::int32_t>(best));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient-vanishing probe for the softmax relaxation: per sequence row,
// check ||dL/dz_i||_1 <= 4 sigma ||dL/dvhat_i||_2 with sigma estimated from
// the embedding entries, and collect both gradient magnitude distributions.
// ---------------------------------------------------------------------------

struct VanishingProbeReport {
  std::size_t trials = 0;
  std::size_t rows = 0;
  std::size_t violations = 0;
  double violation_rate = 0.0;
  double sigma = 0.0;
  double median_abs_dz = 0.0;
  double median_abs_dv = 0.0;
  std::vector<double> hist_edges;  // log10 |g| bin edges
  std::vector<std::size_t> hist_dz;
  std::vector<std::size_t> hist_dv;
};

inline VanishingProbeReport gradient_vanishing_probe(const ModelWeights& w,
                                                     std::size_t trials,
                                                     std::size_t seq_len,
                                                     double temperature,
                                                     std::uint64_t seed) {
  detail::require(trials >= 1, "probe: need at least one trial");
  detail::require(seq_len >= 1 && seq_len <= w.config.max_seq_len,
                  "probe: bad sequence length");

  VanishingProbeReport report;
  report.trials = trials;
  double ss = 0.0;
  for (double v : w.embedding.data) ss += v * v;
  report.sigma = std::sqrt(ss / static_cast<double>(w.embedding.numel()));

  const LayerRange range = LayerRange::first(w.config.layers);
  const Tensor pos = positional_rows(w, seq_len);
  std::vector<double> abs_dz;
  std::vector<double> abs_dv;

  Rng rng(Rng::mix(seed, 0x70726f6265ull));
  for (std::size_t trial = 0; trial < trials; ++trial) {
    TokenSequence x;
    for (std::size_t i = 0; i < seq_len; ++i) {
      x.ids.push_back(static_cast<std::int32_t>(rng.index(w.config.vocab_size)));
    }
    const Tensor a = forward_layers(w, embed(w, x), range);

    Tensor z({seq_len, w.config.vocab_size});
    for (double& v : z.data) v = rng.normal(0.0, 1.0);

    Tape tape;
    const Var z_var = tape.leaf(z);
    const Var sm = tape.softmax(tape.scale(z_var, 1.0 / temperature), 1);
    const Var vhat = tape.matmul(sm, tape.constant(w.embedding));
    const Var act = forward_layers(tape, w, tape.add(vhat, tape.constant(pos)), range);
    const Var loss = tape.l2_norm_sq(tape.sub(act, tape.constant(a)));
    tape.backward(loss);
    const Tensor dz = tape.grad(z_var);
    const Tensor dv = tape.grad(vhat);

    for (std::size_t i = 0; i < seq_len; ++i) {
      double l1 = 0.0;
      for (std::size_t t = 0; t < w.config.vocab_size; ++t) {
        l1 += std::abs(dz(i, t));
        abs_dz.push_back(std::abs(dz(i, t)));
      }
      double l2 = 0.0;
      for (std::size_t j = 0; j < w.config.hidden; ++j) {
        l2 += dv(i, j) * dv(i, j);
        abs_dv.push_back(std::abs(dv(i, j)));
      }
      report.rows += 1;
      if (l1 > 4.0 * report.sigma * std::sqrt(l2)) report.violations += 1;
    }
  }
  report.violation_rate =
      static_cast<double>(report.violations) / static_cast<double>(report.rows);

  auto median = [](std::vector<double>& v) {
    if (v.empty()) return 0.0;
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  // histogram over log10 |g| in [-12, 2), 28 bins
  report.hist_edges.clear();
  for (int b = 0; b <= 28; ++b) report.hist_edges.push_back(-12.0 + 0.5 * b);
  report.hist_dz.assign(28, 0);
  report.hist_dv.assign(28, 0);
  auto fill = [&report](const std::vector<double>& vals, std::vector<std::size_t>& hist) {
    for (double v : vals) {
      const double lg = std::log10(std::max(v, 1e-300));
      int b = static_cast<int>(std::floor((lg + 12.0) / 0.5));
      b = std::min(std::max(b, 0), 27);
      hist[static_cast<std::size_t>(b)] += 1;
    }
  };
  fill(abs_dz, report.hist_dz);
  fill(abs_dv, report.hist_dv);
  report.median_abs_dz = median(abs_dz);
  report.median_abs_dv = median(abs_dv);
  return report;
}

}  // namespace pia
