#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pia/model.hpp"
#include "pia/rng.hpp"
#include "pia/serialize.hpp"
#include "pia/tensor.hpp"

namespace pia {

// ---------------------------------------------------------------------------
// Layer partition across participants. Participant 1 also owns the embedding
// layer; the attacker sits at position a in [2, n] and records the activation
// received from position a-1.
// ---------------------------------------------------------------------------

struct PartitionPlan {
  std::size_t participants = 0;
  std::vector<LayerRange> ranges;  // one per participant, contiguous, covering [1, d]
  std::size_t attacker_pos = 0;    // 0 = unset

  // Number of layers the attacker must invert: end of participant a-1's range.
  std::size_t attacker_boundary() const {
    detail::require(attacker_pos >= 2 && attacker_pos <= participants,
                    "plan: attacker position must be in [2, participants]");
    return ranges[attacker_pos - 2].hi;
  }
};

// Leading participants take ceil(d/n) layers each (capped so that everyone
// keeps at least one), the last takes the remainder.
inline PartitionPlan plan_partition(std::size_t layers, std::size_t participants) {
  detail::require(participants >= 1, "plan: need at least one participant");
  detail::require(participants <= layers, "plan: more participants than layers");
  const std::size_t chunk = (layers + participants - 1) / participants;
  PartitionPlan plan;
  plan.participants = participants;
  std::size_t next = 1;
  for (std::size_t i = 0; i < participants; ++i) {
    const std::size_t left = participants - i - 1;
    const std::size_t remaining = layers - next + 1;
    const std::size_t take = std::min(chunk, remaining - left);
    plan.ranges.push_back(LayerRange{next, next + take - 1});
    next += take;
  }
  plan.attacker_pos = participants >= 2 ? participants : 0;
  return plan;
}

// ---------------------------------------------------------------------------
// Defenses applied to an activation before transmission.
// ---------------------------------------------------------------------------

struct DefenseConfig {
  enum class Mode { none, gaussian, quantize };
  Mode mode = Mode::none;
  double sigma = 0.0;   // gaussian
  int bits = 8;         // quantize: 4 or 8
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(sigma >= 0.0, "defense: sigma must be non-negative");
    if (mode == Mode::quantize) {
      detail::require(bits == 4 || bits == 8, "defense: bits must be 4 or 8");
    }
  }

  static const char* mode_name(Mode m) {
    switch (m) {
      case Mode::none: return "none";
      case Mode::gaussian: return "gaussian";
      case Mode::quantize: return "quantize";
    }
    return "?";
  }
};

inline nlohmann::json defense_to_json(const DefenseConfig& d) {
  return nlohmann::json{{"mode", DefenseConfig::mode_name(d.mode)},
                        {"sigma", d.sigma},
                        {"bits", d.bits},
                        {"seed", d.seed}};
}

inline DefenseConfig defense_from_json(const nlohmann::json& j) {
  DefenseConfig d;
  const std::string mode = j.value("mode", std::string("none"));
  if (mode == "none") {
    d.mode = DefenseConfig::Mode::none;
  } else if (mode == "gaussian") {
    d.mode = DefenseConfig::Mode::gaussian;
  } else if (mode == "quantize") {
    d.mode = DefenseConfig::Mode::quantize;
  } else {
    throw std::runtime_error("defense: unknown mode " + mode);
  }
  d.sigma = j.value("sigma", 0.0);
  d.bits = j.value("bits", 8);
  d.seed = j.value("seed", std::uint64_t{0});
  d.validate();
  return d;
}

// Elementwise A + N(0, sigma^2) with a seeded generator; sigma = 0 is identity.
inline Tensor apply_gaussian(const Tensor& a, double sigma, std::uint64_t seed) {
  detail::require(sigma >= 0.0, "apply_gaussian: sigma must be non-negative");
  if (sigma == 0.0) return a;
  Rng rng(Rng::mix(seed, 0x6e6f697365ull));
  Tensor out = a;
  for (double& v : out.data) v += rng.normal(0.0, sigma);
  return out;
}

struct QuantizedTensor {
  std::vector<std::int8_t> codes;
  std::vector<std::size_t> shape;
  double scale = 0.0;
  int bits = 8;
};

// Symmetric per-tensor uniform quantization with round-to-nearest-even.
// scale = max|A| / (2^(bits-1) - 1); an all-zero tensor round-trips exactly.
inline QuantizedTensor quantize(const Tensor& a, int bits) {
  detail::require(bits == 4 || bits == 8, "quantize: bits must be 4 or 8");
  detail::require(a.all_finite(), "quantize: input must be finite");
  const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
  double amax = 0.0;
  for (double v : a.data) amax = std::max(amax, std::abs(v));
  QuantizedTensor q;
  q.shape = a.shape;
  q.bits = bits;
  q.scale = amax == 0.0 ? 0.0 : amax / qmax;
  q.codes.resize(a.numel(), 0);
  if (q.scale == 0.0) return q;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double c = std::nearbyint(a.data[i] / q.scale);  // FE_TONEAREST: half-to-even
    c = std::min(std::max(c, -qmax), qmax);
    q.codes[i] = static_cast<std::int8_t>(c);
  }
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out.data[i] = static_cast<double>(q.codes[i]) * q.scale;
  }
  return out;
}

inline Tensor apply_defense(const Tensor& a, const DefenseConfig& d, std::uint64_t seed) {
  d.validate();
  switch (d.mode) {
    case DefenseConfig::Mode::none:
      return a;
    case DefenseConfig::Mode::gaussian:
      return apply_gaussian(a, d.sigma, seed);
    case DefenseConfig::Mode::quantize:
      return dequantize(quantize(a, d.bits));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Collaborative inference simulation.
// ---------------------------------------------------------------------------

// The activation a participant received over the wire, as recorded by an
// honest-but-curious observer at that position.
struct ActivationRecord {
  Tensor activation;        // {|x|, h}
  std::size_t boundary = 0; // layers already applied (= layers to invert)
  DefenseConfig defense;    // defense the sender applied to this tensor
  std::string prompt_id;

  std::size_t prompt_length() const { return activation.rows(); }
};

// Runs one prefill pass over the partitioned model. Participant i computes
// its layer range on the (possibly defended) activation received from i-1,
// applies its own defense, and transmits. Returned records are what each
// receiving participant 2..n saw, verbatim.
inline std::vector<ActivationRecord> run_inference(
    const ModelWeights& w, const TokenSequence& x, const PartitionPlan& plan,
    const std::vector<DefenseConfig>& defense_per_participant,
    const std::string& prompt_id = "") {
  detail::require(plan.participants >= 1 && plan.ranges.size() == plan.participants,
                  "run_inference: invalid plan");
  detail::require(defense_per_participant.size() == plan.participants,
                  "run_inference: need one defense config per participant");
  detail::require(plan.ranges.front().lo == 1 &&
                      plan.ranges.back().hi == w.config.layers,
                  "run_inference: plan does not cover the model");

  std::vector<ActivationRecord> records;
  Tensor act = embed(w, x);
  for (std::size_t i = 0; i < plan.participants; ++i) {
    act = forward_layers(w, act, plan.ranges[i]);
    if (i + 1 == plan.participants) break;  // last participant transmits nothing
    const DefenseConfig& d = defense_per_participant[i];
    const std::uint64_t seed = Rng::mix(d.seed, i + 1);
    act = apply_defense(act, d, seed);
    ActivationRecord rec;
    rec.activation = act;
    rec.boundary = plan.ranges[i].hi;
    rec.defense = d;
    rec.prompt_id = prompt_id;
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<DefenseConfig> uniform_defense(const DefenseConfig& d, std::size_t n) {
  return std::vector<DefenseConfig>(n, d);
}

// Record received by the attacker at plan.attacker_pos.
inline const ActivationRecord& attacker_record(const std::vector<ActivationRecord>& records,
                                               const PartitionPlan& plan) {
  const std::size_t idx = plan.attacker_pos - 2;
  detail::require(idx < records.size(), "attacker_record: no record for position");
  return records[idx];
}

// ---------------------------------------------------------------------------
// Record (de)serialization: tensor container + JSON sidecar.
// ---------------------------------------------------------------------------

inline void save_record(const ActivationRecord& rec, const std::string& bin_path,
                        const std::string& json_path) {
  Container c;
  c.tensors.push_back({"activation", rec.activation});
  write_container(bin_path, c);
  nlohmann::json sidecar{{"boundary", rec.boundary},
                         {"defense", defense_to_json(rec.defense)},
                         {"prompt_id", rec.prompt_id}};
  std::ofstream os(json_path);
  if (!os) throw std::runtime_error("record: cannot write " + json_path);
  os << sidecar.dump(2) << "\n";
}

inline ActivationRecord load_record(const std::string& bin_path,
                                    const std::string& json_path) {
  ActivationRecord rec;
  rec.activation = read_container(bin_path).get("activation");
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("record: cannot read " + json_path);
  const auto j = nlohmann::json::parse(is);
  rec.boundary = j.at("boundary").get<std::size_t>();
  rec.defense = defense_from_json(j.at("defense"));
  rec.prompt_id = j.value("prompt_id", std::string());
  return rec;
}

}  // namespace pia
