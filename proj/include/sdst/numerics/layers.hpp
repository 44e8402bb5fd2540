#pragma once

// Parameter containers and small learnable building blocks.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdst/numerics/ops.hpp"

namespace sdst {

/// Ordered, named collection of trainable parameters. Modules hold handles to the
/// same nodes, so updating a value here updates the module.
template <typename S>
class ParamSet {
 public:
  Var<S> add(const std::string& name, Matrix<S> init) {
    if (index_.count(name)) throw Error("duplicate-parameter: " + name);
    Var<S> v = parameter<S>(std::move(init));
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<S>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Var<S> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown-parameter: " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Index count() const {
    Index n = 0;
    for (const auto& [name, v] : entries_) n += v.value().size();
    return n;
  }

  /// Counts grouped by the first `depth` dot-separated components of the names.
  std::map<std::string, Index> breakdown(int depth = 1) const {
    std::map<std::string, Index> out;
    for (const auto& [name, v] : entries_) {
      std::size_t pos = std::string::npos;
      std::size_t from = 0;
      for (int d = 0; d < depth; ++d) {
        pos = name.find('.', from);
        if (pos == std::string::npos) break;
        from = pos + 1;
      }
      out[name.substr(0, pos)] += v.value().size();
    }
    return out;
  }

  void zero_grad() const {
    for (const auto& [name, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<S>>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

template <typename S>
Matrix<S> zeros(Index rows, Index cols) {
  return Matrix<S>::Zero(rows, cols);
}

template <typename S>
Matrix<S> ones(Index rows, Index cols) {
  return Matrix<S>::Ones(rows, cols);
}

template <typename S>
Matrix<S> normal(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

template <typename S>
Matrix<S> uniform(Index rows, Index cols, double bound, Rng& rng) {
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  return m;
}

/// Glorot uniform for an (in x out) weight.
template <typename S>
Matrix<S> xavier(Index in, Index out, Rng& rng) {
  return uniform<S>(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

/// He uniform (ReLU gain) for an (in x out) weight.
template <typename S>
Matrix<S> kaiming(Index in, Index out, Rng& rng) {
  return uniform<S>(in, out, std::sqrt(6.0 / static_cast<double>(in)), rng);
}

}  // namespace init

enum class Init { Xavier, Kaiming, Zero };

template <typename S>
struct Linear {
  Var<S> weight;  // in x out
  Var<S> bias;    // 1 x out

  Linear() = default;
  Linear(ParamSet<S>& params, const std::string& name, Index in, Index out, Init scheme,
         Rng& rng, bool with_bias = true) {
    Matrix<S> w;
    switch (scheme) {
      case Init::Xavier: w = init::xavier<S>(in, out, rng); break;
      case Init::Kaiming: w = init::kaiming<S>(in, out, rng); break;
      case Init::Zero: w = init::zeros<S>(in, out); break;
    }
    weight = params.add(name + ".weight", std::move(w));
    if (with_bias) bias = params.add(name + ".bias", init::zeros<S>(1, out));
  }

  Var<S> operator()(const Var<S>& x) const { return linear(x, weight, bias); }
  Index in() const { return weight.rows(); }
  Index out() const { return weight.cols(); }
};

template <typename S>
struct LayerNorm {
  Var<S> gain;
  Var<S> bias;

  LayerNorm() = default;
  LayerNorm(ParamSet<S>& params, const std::string& name, Index width) {
    gain = params.add(name + ".gain", init::ones<S>(1, width));
    bias = params.add(name + ".bias", init::zeros<S>(1, width));
  }

  Var<S> operator()(const Var<S>& x) const { return layer_norm(x, gain, bias); }
};

/// Stack of linear layers with ReLU between them (none after the last).
template <typename S>
struct Mlp {
  std::vector<Linear<S>> layers;

  Mlp() = default;
  /// dims = {in, hidden..., out}; `zero_last` zero-initializes the final layer.
  Mlp(ParamSet<S>& params, const std::string& name, const std::vector<Index>& dims, Rng& rng,
      bool zero_last = false) {
    if (dims.size() < 2) throw Error("mlp-needs-two-dims");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = i + 2 == dims.size();
      const Init scheme = last && zero_last ? Init::Zero : (last ? Init::Xavier : Init::Kaiming);
      layers.emplace_back(params, name + "." + std::to_string(i), dims[i], dims[i + 1], scheme,
                          rng);
    }
  }

  Var<S> operator()(Var<S> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

/// Multi-head attention with learned input and output projections.
template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamSet<S>& params, const std::string& name, Index width, Index num_heads,
                     Rng& rng)
      : heads(num_heads) {
    if (num_heads <= 0 || width % num_heads != 0) throw Error("heads-must-divide-width");
    q = Linear<S>(params, name + ".q", width, width, Init::Xavier, rng);
    k = Linear<S>(params, name + ".k", width, width, Init::Xavier, rng);
    v = Linear<S>(params, name + ".v", width, width, Init::Xavier, rng);
    o = Linear<S>(params, name + ".o", width, width, Init::Xavier, rng);
  }

  Var<S> operator()(const Var<S>& query, const Var<S>& key, const Var<S>& value,
                    Index groups) const {
    return o(attention(q(query), k(key), v(value), heads, groups));
  }
};

/// Position-wise feed-forward block: width -> ratio*width -> width.
template <typename S>
struct FeedForward {
  Linear<S> up, down;

  FeedForward() = default;
  FeedForward(ParamSet<S>& params, const std::string& name, Index width, Index ratio, Rng& rng) {
    up = Linear<S>(params, name + ".up", width, ratio * width, Init::Kaiming, rng);
    down = Linear<S>(params, name + ".down", ratio * width, width, Init::Kaiming, rng);
  }

  Var<S> operator()(const Var<S>& x) const { return down(relu(up(x))); }
};

/// Sinusoidal embedding of arbitrary (possibly fractional) positions: n x width,
/// interleaving sin/cos over geometrically spaced frequencies.
template <typename S>
Matrix<S> sinusoidal_embedding(const std::vector<double>& positions, Index width) {
  Matrix<S> out(static_cast<Index>(positions.size()), width);
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (Index c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) /
                                                static_cast<double>(width));
      const double angle = positions[r] * freq;
      out(static_cast<Index>(r), c) = static_cast<S>(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return out;
}

/// Frame positional encoding for `groups` stacked sequences of length `frames`.
template <typename S>
Matrix<S> positional_encoding(Index frames, Index width, Index groups = 1) {
  std::vector<double> pos;
  pos.reserve(static_cast<std::size_t>(frames * groups));
  for (Index g = 0; g < groups; ++g)
    for (Index t = 0; t < frames; ++t) pos.push_back(static_cast<double>(t));
  return sinusoidal_embedding<S>(pos, width);
}

}  // namespace sdst
