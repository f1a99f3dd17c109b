#pragma once
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "svfreg/errors.hpp"
#include "svfreg/io.hpp"
#include "svfreg/rng.hpp"
#include "svfreg/tape.hpp"
#include "svfreg/tensor.hpp"

namespace svfreg {

// One 3x3x3 convolution layer; parameters live under name+"_w" and name+"_b".
struct LayerDesc {
  std::string name;
  int cin = 0, cout = 0;
  int stride = 1, dilation = 1;
  bool zero_init = false;  // field-emitting layers and posterior heads start at zero
  bool activated = true;   // leaky relu after the conv
  double slope = 0.2;
};

struct NetConfig {
  int stages = 3;
  std::vector<int> channels = {8, 16, 16};  // feature channels per level, finest first
  int hidden = 16;
  double slope = 0.2;
  int ss_steps = 7;

  void validate() const {
    if (stages < 1 || stages > 4) throw shape_error("net config: stages must be in [1,4]");
    if (int(channels.size()) != stages) throw shape_error("net config: one channel count per level");
    for (int c : channels)
      if (c < 1) throw shape_error("net config: channels must be positive");
    if (hidden < 1) throw shape_error("net config: hidden width must be positive");
  }

  // Level k halves the resolution k+1 times; stage j runs at level stages-1-j.
  // Encoder trunk + two posterior heads per level, then a three-layer matching
  // net and a three-layer dilated regularization net per stage.
  std::vector<LayerDesc> layers() const {
    validate();
    std::vector<LayerDesc> out;
    auto add = [&](std::string name, int cin, int cout, int stride, int dilation, bool zero,
                   bool act) {
      out.push_back(LayerDesc{std::move(name), cin, cout, stride, dilation, zero, act, slope});
    };
    for (int k = 0; k < stages; ++k) {
      const int cin = k == 0 ? 1 : channels[std::size_t(k - 1)];
      const int ck = channels[std::size_t(k)];
      add("wF" + std::to_string(k) + "_trunk", cin, hidden, 2, 1, false, true);
      add("wF" + std::to_string(k) + "_mu", hidden, ck, 1, 1, true, false);
      add("wF" + std::to_string(k) + "_lv", hidden, ck, 1, 1, true, false);
    }
    for (int j = 0; j < stages; ++j) {
      const int cl = channels[std::size_t(stages - 1 - j)];
      const std::string m = "wM" + std::to_string(j);
      add(m + "_c0", 2 * cl + 4, hidden, 1, 1, false, true);
      add(m + "_c1", hidden, hidden, 1, 1, false, true);
      add(m + "_c2", hidden, 3, 1, 1, true, false);
    }
    for (int j = 0; j < stages; ++j) {
      const std::string r = "wR" + std::to_string(j);
      add(r + "_c0", 3, hidden, 1, 1, false, true);
      add(r + "_c1", hidden, hidden, 1, 2, false, true);
      add(r + "_c2", hidden, 3, 1, 4, true, false);
    }
    return out;
  }
};

template <class T>
struct ParamSet {
  std::vector<std::pair<std::string, Tensor<T>>> entries;  // deterministic order

  void add(std::string name, Tensor<T> t) {
    if (has(name)) throw shape_error("param set: duplicate name " + name);
    entries.emplace_back(std::move(name), std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return true;
    return false;
  }
  const Tensor<T>& at(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    throw shape_error("param set: missing " + name);
  }
  Tensor<T>& at(const std::string& name) {
    for (auto& [n, t] : entries)
      if (n == name) return t;
    throw shape_error("param set: missing " + name);
  }
  std::size_t coord_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries) n += t.size();
    return n;
  }
};

// Uniform +-1/sqrt(fan_in) weights, zero biases; posterior heads and
// field-emitting layers start at zero so the cascade is the identity and the
// KL term vanishes.  randomize_heads draws those too (gradient checking needs
// information to flow through every layer).
template <class T>
ParamSet<T> init_params(const NetConfig& cfg, std::uint64_t seed, bool randomize_heads = false) {
  ParamSet<T> ps;
  std::uint64_t index = 0;
  for (const LayerDesc& ld : cfg.layers()) {
    Tensor<T> w(ld.cout * ld.cin, {3, 3, 3});
    if (!ld.zero_init || randomize_heads) {
      Rng rng(seed_mix(seed, index));
      const double bound = 1.0 / std::sqrt(double(ld.cin) * 27.0);
      for (auto& v : w.v) v = T(rng.uniform(-bound, bound));
    }
    ps.add(ld.name + "_w", std::move(w));
    ps.add(ld.name + "_b", Tensor<T>(ld.cout, {1, 1, 1}));
    ++index;
  }
  return ps;
}

template <class T>
std::vector<double> flatten(const ParamSet<T>& ps) {
  std::vector<double> out;
  out.reserve(ps.coord_count());
  for (const auto& [name, t] : ps.entries)
    for (const T& v : t.v) out.push_back(double(v));
  return out;
}

template <class T>
void unflatten(const std::vector<double>& flat, ParamSet<T>* ps) {
  if (flat.size() != ps->coord_count()) throw shape_error("unflatten: length mismatch");
  std::size_t at = 0;
  for (auto& [name, t] : ps->entries)
    for (T& v : t.v) v = T(flat[at++]);
}

// Checkpoint form: weights carry shape {cout, cin, 3, 3, 3}, biases {cout}.
template <class T>
std::vector<NamedTensor> params_to_named(const ParamSet<T>& ps, const NetConfig& cfg) {
  std::vector<NamedTensor> out;
  for (const LayerDesc& ld : cfg.layers()) {
    NamedTensor w;
    w.name = ld.name + "_w";
    w.shape = {ld.cout, ld.cin, 3, 3, 3};
    const Tensor<T>& wt = ps.at(w.name);
    w.values.assign(wt.v.begin(), wt.v.end());
    out.push_back(std::move(w));
    NamedTensor b;
    b.name = ld.name + "_b";
    b.shape = {ld.cout};
    const Tensor<T>& bt = ps.at(b.name);
    b.values.assign(bt.v.begin(), bt.v.end());
    out.push_back(std::move(b));
  }
  return out;
}

template <class T>
ParamSet<T> params_from_named(const std::vector<NamedTensor>& tensors, const NetConfig& cfg) {
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const NamedTensor& t : tensors)
      if (t.name == name) return t;
    throw io_error(io_error::kind::bad_header_value, "checkpoint missing tensor " + name);
  };
  ParamSet<T> ps;
  for (const LayerDesc& ld : cfg.layers()) {
    const NamedTensor& w = find(ld.name + "_w");
    if (w.shape != std::vector<int>{ld.cout, ld.cin, 3, 3, 3})
      throw io_error(io_error::kind::bad_header_value, "checkpoint shape mismatch for " + w.name);
    Tensor<T> wt(ld.cout * ld.cin, {3, 3, 3});
    if (w.values.size() != wt.size())
      throw io_error(io_error::kind::length_mismatch, "checkpoint payload for " + w.name);
    for (std::size_t i = 0; i < wt.size(); ++i) wt.v[i] = T(w.values[i]);
    ps.add(w.name, std::move(wt));
    const NamedTensor& b = find(ld.name + "_b");
    if (b.shape != std::vector<int>{ld.cout} || b.values.size() != std::size_t(ld.cout))
      throw io_error(io_error::kind::bad_header_value, "checkpoint shape mismatch for " + b.name);
    Tensor<T> bt(ld.cout, {1, 1, 1});
    for (std::size_t i = 0; i < bt.size(); ++i) bt.v[i] = T(b.values[i]);
    ps.add(b.name, std::move(bt));
  }
  return ps;
}

// Parameter leaves bound onto a tape, same order as the set.
template <class T>
struct BoundParams {
  std::vector<std::pair<std::string, typename Tape<T>::Id>> ids;

  typename Tape<T>::Id at(const std::string& name) const {
    for (const auto& [n, id] : ids)
      if (n == name) return id;
    throw shape_error("bound params: missing " + name);
  }
};

template <class T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamSet<T>& ps, bool requires_grad = true) {
  BoundParams<T> bp;
  for (const auto& [name, t] : ps.entries) bp.ids.emplace_back(name, tape.leaf(t, requires_grad));
  return bp;
}

template <class T>
typename Tape<T>::Id conv_layer(Tape<T>& tape, const BoundParams<T>& bp, const LayerDesc& ld,
                                typename Tape<T>::Id input) {
  auto out = tape.conv3d(input, bp.at(ld.name + "_w"), bp.at(ld.name + "_b"), ld.stride,
                         ld.dilation);
  return ld.activated ? tape.leaky_relu(out, ld.slope) : out;
}

}  // namespace svfreg
