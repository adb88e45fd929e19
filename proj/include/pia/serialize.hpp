#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pia/model.hpp"
#include "pia/tensor.hpp"

namespace pia {

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian");

// ---------------------------------------------------------------------------
// Binary tensor container: magic "PLK1", u32 version, a JSON config blob, a
// named tensor table, then the raw float64 payload. Weights and recorded
// activations share this format.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::string config_json = "{}";
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const {
    for (const NamedTensor& t : tensors) {
      if (t.name == name) return t.tensor;
    }
    throw std::runtime_error("container: missing tensor '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const NamedTensor& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

namespace detail {

constexpr char kMagic[4] = {'P', 'L', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(std::string("container: truncated ") + what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read_pod<std::uint64_t>(is, what);
  if (n > (1ull << 32)) throw std::runtime_error("container: implausible string size");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error(std::string("container: truncated ") + what);
  return s;
}

}  // namespace detail

inline void write_container(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("container: cannot open for write: " + path);
  os.write(detail::kMagic, 4);
  detail::write_pod<std::uint32_t>(os, detail::kVersion);
  detail::write_string(os, c.config_json);
  detail::write_pod<std::uint64_t>(os, c.tensors.size());
  std::uint64_t offset = 0;
  for (const NamedTensor& t : c.tensors) {
    detail::write_string(os, t.name);
    detail::write_pod<std::uint64_t>(os, t.tensor.ndim());
    for (std::size_t d : t.tensor.shape) detail::write_pod<std::uint64_t>(os, d);
    detail::write_pod<std::uint64_t>(os, offset);
    offset += t.tensor.numel() * sizeof(double);
  }
  detail::write_pod<std::uint64_t>(os, offset);
  for (const NamedTensor& t : c.tensors) {
    os.write(reinterpret_cast<const char*>(t.tensor.data.data()),
             static_cast<std::streamsize>(t.tensor.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("container: write failed: " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("container: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kMagic, 4) != 0) {
    throw std::runtime_error("container: bad magic in " + path);
  }
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != detail::kVersion) {
    throw std::runtime_error("container: unsupported version " + std::to_string(version));
  }
  Container c;
  c.config_json = detail::read_string(is, "config");
  const auto count = detail::read_pod<std::uint64_t>(is, "tensor count");
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = detail::read_string(is, "tensor name");
    const auto ndim = detail::read_pod<std::uint64_t>(is, "tensor rank");
    for (std::uint64_t d = 0; d < ndim; ++d) {
      e.shape.push_back(detail::read_pod<std::uint64_t>(is, "tensor shape"));
    }
    e.offset = detail::read_pod<std::uint64_t>(is, "tensor offset");
    entries.push_back(std::move(e));
  }
  const auto payload = detail::read_pod<std::uint64_t>(is, "payload size");
  std::vector<char> raw(payload);
  is.read(raw.data(), static_cast<std::streamsize>(payload));
  if (!is) throw std::runtime_error("container: truncated payload in " + path);
  for (Entry& e : entries) {
    Tensor t(e.shape);
    const std::uint64_t bytes = t.numel() * sizeof(double);
    if (e.offset + bytes > payload) {
      throw std::runtime_error("container: tensor '" + e.name + "' exceeds payload");
    }
    std::memcpy(t.data.data(), raw.data() + e.offset, bytes);
    if (!t.all_finite()) {
      throw std::runtime_error("container: tensor '" + e.name + "' has non-finite values");
    }
    c.tensors.push_back({std::move(e.name), std::move(t)});
  }
  return c;
}

// ---------------------------------------------------------------------------
// ModelConfig <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"vocab_size", cfg.vocab_size},
                        {"hidden", cfg.hidden},
                        {"layers", cfg.layers},
                        {"heads", cfg.heads},
                        {"mlp_multiple", cfg.mlp_multiple},
                        {"max_seq_len", cfg.max_seq_len},
                        {"positional", cfg.positional}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.layers = j.at("layers").get<std::size_t>();
  cfg.heads = j.at("heads").get<std::size_t>();
  cfg.mlp_multiple = j.at("mlp_multiple").get<std::size_t>();
  cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  cfg.positional = j.value("positional", std::string("learned_absolute"));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Model weights and adapter sets
// ---------------------------------------------------------------------------

inline void save_weights(const ModelWeights& w, const std::string& path) {
  Container c;
  c.config_json = config_to_json(w.config).dump();
  c.tensors.push_back({"embedding", w.embedding});
  c.tensors.push_back({"positional", w.positional});
  c.tensors.push_back({"final_norm", w.final_norm});
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    for (Param p : {Param::attn_norm, Param::wq, Param::wk, Param::wv, Param::wo,
                    Param::mlp_norm, Param::w1, Param::w2}) {
      c.tensors.push_back(
          {"layers." + std::to_string(i) + "." + param_name(p), w.layers[i].get(p)});
    }
  }
  write_container(path, c);
}

inline ModelWeights load_weights(const std::string& path) {
  const Container c = read_container(path);
  ModelWeights w;
  w.config = config_from_json(nlohmann::json::parse(c.config_json));
  auto expect = [&c](const std::string& name, std::vector<std::size_t> shape) {
    const Tensor& t = c.get(name);
    if (t.shape != shape) {
      throw std::runtime_error("weights: tensor '" + name + "' has unexpected shape");
    }
    return t;
  };
  const std::size_t h = w.config.hidden;
  w.embedding = expect("embedding", {w.config.vocab_size, h});
  w.positional = expect("positional", {w.config.max_seq_len, h});
  w.final_norm = expect("final_norm", {h});
  w.layers.resize(w.config.layers);
  for (std::size_t i = 0; i < w.config.layers; ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    w.layers[i].attn_norm = expect(base + "attn_norm", {h});
    w.layers[i].wq = expect(base + "wq", {h, h});
    w.layers[i].wk = expect(base + "wk", {h, h});
    w.layers[i].wv = expect(base + "wv", {h, h});
    w.layers[i].wo = expect(base + "wo", {h, h});
    w.layers[i].mlp_norm = expect(base + "mlp_norm", {h});
    w.layers[i].w1 = expect(base + "w1", {h, w.config.mlp_hidden()});
    w.layers[i].w2 = expect(base + "w2", {w.config.mlp_hidden(), h});
  }
  detail::require_distinct_rows(w.embedding, "weights: embedding");
  return w;
}

inline void save_adapters(const LoraAdapterSet& set, const std::string& path) {
  Container c;
  c.config_json = nlohmann::json{{"rank", set.rank}, {"alpha", set.alpha}}.dump();
  for (const LoraEntry& e : set.entries) {
    const std::string base =
        "lora." + std::to_string(e.layer) + "." + param_name(e.target) + ".";
    c.tensors.push_back({base + "a", e.a});
    c.tensors.push_back({base + "b", e.b});
  }
  write_container(path, c);
}

inline LoraAdapterSet load_adapters(const std::string& path) {
  const Container c = read_container(path);
  const auto j = nlohmann::json::parse(c.config_json);
  LoraAdapterSet set;
  set.rank = j.at("rank").get<std::size_t>();
  set.alpha = j.at("alpha").get<double>();
  for (const NamedTensor& t : c.tensors) {
    // names: lora.<layer>.<param>.a / .b
    if (t.name.rfind("lora.", 0) != 0 || t.name.size() < 8) continue;
    if (t.name.back() != 'a') continue;
    const std::string stem = t.name.substr(5, t.name.size() - 7);
    const auto dot = stem.find('.');
    if (dot == std::string::npos) {
      throw std::runtime_error("adapters: malformed tensor name " + t.name);
    }
    LoraEntry e;
    e.layer = static_cast<std::size_t>(std::stoul(stem.substr(0, dot)));
    const auto p = param_from_name(stem.substr(dot + 1));
    if (!p) throw std::runtime_error("adapters: unknown target in " + t.name);
    e.target = *p;
    e.a = t.tensor;
    e.b = c.get(t.name.substr(0, t.name.size() - 1) + "b");
    set.entries.push_back(std::move(e));
  }
  return set;
}

}  // namespace pia
