#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pia/model.hpp"
#include "pia/oracle.hpp"
#include "pia/tensor.hpp"
#include "pia/whitebox.hpp"

namespace pia {

// ---------------------------------------------------------------------------
// Safeguarded gradient descent over a set of parameter tensors. A step is
// accepted only if the rebuilt loss is finite and not larger; otherwise the
// step is halved. Non-finite losses that survive max_halvings abort.
// ---------------------------------------------------------------------------

struct DescentOutcome {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t accepted_steps = 0;
};

template <class BuildLoss>
DescentOutcome safeguarded_descent(std::vector<Tensor>& params, BuildLoss&& build,
                                   double lr, std::size_t steps,
                                   std::size_t max_halvings = 5) {
  detail::require(lr > 0.0, "descent: learning rate must be positive");

  auto eval_only = [&build](const std::vector<Tensor>& p) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(p.size());
    for (const Tensor& t : p) leaves.push_back(tape.constant(t));
    return tape.value(build(tape, leaves))[0];
  };

  DescentOutcome out;
  out.initial_loss = eval_only(params);
  if (!std::isfinite(out.initial_loss)) {
    throw std::runtime_error("descent: loss non-finite at the starting point");
  }
  double current = out.initial_loss;

  for (std::size_t step = 0; step < steps; ++step) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& t : params) leaves.push_back(tape.leaf(t));
    const Var loss_var = build(tape, leaves);
    tape.backward(loss_var);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Var v : leaves) grads.push_back(tape.grad(v));

    double trial_lr = lr;
    bool accepted = false;
    double trial_loss = 0.0;
    for (std::size_t attempt = 0; attempt <= max_halvings; ++attempt) {
      std::vector<Tensor> cand = params;
      for (std::size_t i = 0; i < cand.size(); ++i) {
        for (std::size_t n = 0; n < cand[i].numel(); ++n) {
          cand[i].data[n] -= trial_lr * grads[i].data[n];
        }
      }
      trial_loss = eval_only(cand);
      if (std::isfinite(trial_loss) && trial_loss <= current) {
        params = std::move(cand);
        current = trial_loss;
        accepted = true;
        break;
      }
      trial_lr *= 0.5;
    }
    if (!accepted) {
      if (!std::isfinite(trial_loss)) {
        throw std::runtime_error("descent: loss stayed non-finite after halvings");
      }
      break;  // no descent direction at this scale; stationary enough
    }
    out.accepted_steps += 1;
  }
  out.final_loss = current;
  return out;
}

// ---------------------------------------------------------------------------
// Adapter estimation: which matrices of the preceding layers are wrapped and
// at what rank. The attacker knows the structure but not the weights.
// ---------------------------------------------------------------------------

struct LoraStructure {
  std::size_t rank = 1;
  std::vector<Param> targets = {Param::wq, Param::wv};
};

// Fresh adapter estimates for layers 1..boundary: Gaussian a-factors and zero
// b-factors, so the initial update is exactly zero but gradients can flow.
inline LoraAdapterSet init_adapter_estimates(const ModelConfig& cfg,
                                             const LoraStructure& st,
                                             std::size_t boundary, double sigma,
                                             std::uint64_t seed) {
  detail::require(st.rank >= 1, "greybox: rank must be at least 1");
  detail::require(boundary >= 1 && boundary <= cfg.layers, "greybox: bad boundary");
  Rng rng(Rng::mix(seed, 0x67726579ull));
  LoraAdapterSet set;
  set.rank = st.rank;
  set.alpha = static_cast<double>(st.rank);  // scaling folded into the estimate
  for (std::size_t layer = 1; layer <= boundary; ++layer) {
    for (Param p : st.targets) {
      detail::require(lora_wrappable(p), "greybox: bad adapter target");
      std::size_t in = cfg.hidden;
      std::size_t out = cfg.hidden;
      if (p == Param::w1) out = cfg.mlp_hidden();
      if (p == Param::w2) in = cfg.mlp_hidden();
      LoraEntry e;
      e.layer = layer;
      e.target = p;
      e.a = Tensor({st.rank, out});
      for (double& v : e.a.data) v = rng.normal(0.0, sigma);
      e.b = Tensor::zeros({in, st.rank});
      set.entries.push_back(std::move(e));
    }
  }
  return set;
}

struct AdapterStepOutcome {
  LoraAdapterSet adapters;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t accepted_steps = 0;
};

// With x-hat fixed, descend on all adapter factors jointly to reduce the
// distance between the adapted forward pass and the recorded activation.
inline AdapterStepOutcome adapter_step(const ModelWeights& base,
                                       const TokenSequence& xhat, const Tensor& a,
                                       LayerRange range, LoraAdapterSet adapters,
                                       double lr, std::size_t steps) {
  validate_adapters(base.config, adapters);
  for (const LoraEntry& e : adapters.entries) {
    detail::require(range.empty() || e.layer <= range.hi,
                    "greybox: adapter beyond the attacked boundary");
  }
  const Tensor emb = embed(base, xhat);
  const double scaling = adapters.scaling();

  std::vector<Tensor> params;
  params.reserve(adapters.entries.size() * 2);
  for (const LoraEntry& e : adapters.entries) {
    params.push_back(e.a);
    params.push_back(e.b);
  }

  auto build = [&](Tape& tape, const std::vector<Var>& leaves) {
    GraphCtx ctx{tape};
    auto weights = [&](GraphCtx& c, std::size_t layer, Param p) -> Var {
      for (std::size_t i = 0; i < adapters.entries.size(); ++i) {
        const LoraEntry& e = adapters.entries[i];
        if (e.layer == layer && e.target == p) {
          const Var delta = c.tape.matmul(leaves[2 * i + 1], leaves[2 * i]);
          return c.tape.add(c.constant(base.layers[layer - 1].get(p)),
                            c.tape.scale(delta, scaling));
        }
      }
      return c.constant(base.layers[layer - 1].get(p));
    };
    const Var act = run_layers(ctx, base.config, tape.constant(emb), weights, range);
    return tape.l2_norm_sq(tape.sub(act, tape.constant(a)));
  };

  const DescentOutcome d = safeguarded_descent(params, build, lr, steps);

  AdapterStepOutcome out;
  out.adapters = std::move(adapters);
  for (std::size_t i = 0; i < out.adapters.entries.size(); ++i) {
    out.adapters.entries[i].a = params[2 * i];
    out.adapters.entries[i].b = params[2 * i + 1];
  }
  out.initial_loss = d.initial_loss;
  out.final_loss = d.final_loss;
  out.accepted_steps = d.accepted_steps;
  return out;
}

// ---------------------------------------------------------------------------
// Alternating inversion: per round, run the white-box pipeline against the
// current adapter estimates, then refit the adapters to the recovered tokens.
// ---------------------------------------------------------------------------

struct GreyboxConfig {
  std::size_t rounds = 5;
  double adapter_lr = 1e-3;
  std::size_t adapter_steps = 50;
  double adapter_init_sigma = 0.01;
  AttackConfig whitebox;
  std::uint64_t seed = 0;
};

struct GreyboxState {
  TokenSequence tokens;
  LoraAdapterSet adapters;
  std::size_t rounds_done = 0;
  std::vector<double> loss_history;  // activation loss after each adapter phase
  std::vector<PositionDiagnostics> last_diagnostics;
};

inline GreyboxState alternating_invert(const ModelWeights& base, const Tensor& a,
                                       LayerRange range, const LoraStructure& st,
                                       const GreyboxConfig& cfg,
                                       const OracleLM* oracle = nullptr) {
  detail::require(cfg.rounds >= 1, "greybox: need at least one round");
  detail::require(!range.empty(), "greybox: empty layer range");
  cfg.whitebox.validate();

  GreyboxState state;
  state.adapters = init_adapter_estimates(base.config, st, range.hi,
                                          cfg.adapter_init_sigma, cfg.seed);

  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    const ModelWeights merged = merge_adapters(base, state.adapters);
    const OptimizedEmbedding opt = constrained_optimize(merged, a, range, cfg.whitebox);
    DiscretizeResult disc =
        adaptive_discretize(merged, a, range, opt.vhat, oracle, cfg.whitebox);
    state.tokens = std::move(disc.tokens);
    state.last_diagnostics = std::move(disc.positions);

    AdapterStepOutcome step = adapter_step(base, state.tokens, a, range,
                                           std::move(state.adapters), cfg.adapter_lr,
                                           cfg.adapter_steps);
    state.adapters = std::move(step.adapters);
    state.loss_history.push_back(step.final_loss);
    state.rounds_done = round + 1;
  }
  return state;
}

}  // namespace pia
