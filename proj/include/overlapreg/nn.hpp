#pragma once

// Parameter storage, per-point MLPs, Adam, and the binary checkpoint format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diff.hpp"
#include "random.hpp"

namespace overlapreg::nn {

using diff::Index;
using diff::Matrix;
using diff::Tape;
using diff::Var;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Ordered, named parameter table. Order is insertion order and defines the
/// checkpoint layout.
class ParameterStore {
public:
  std::size_t add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, init, Matrix::Zero(init.rows(), init.cols())});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
    return it->second;
  }
  const Parameter& get(const std::string& name) const { return params_[index_of(name)]; }
  Parameter& get(const std::string& name) { return params_[index_of(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  bool operator==(const ParameterStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name != o.params_[i].name || params_[i].value.rows() != o.params_[i].value.rows() ||
          params_[i].value.cols() != o.params_[i].value.cols() || params_[i].value != o.params_[i].value)
        return false;
    return true;
  }

private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Leaf variables for every parameter on one tape.
class Binding {
public:
  /// trainable = false binds constants, so no backward rules are recorded.
  Binding(Tape& tape, const ParameterStore& store, bool trainable = true) {
    vars_.reserve(store.size());
    for (const auto& p : store) vars_.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  }
  const Var& operator[](std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }

  /// Adds the leaf gradients from the last backward pass into store grads.
  void accumulate_into(ParameterStore& store, double weight = 1.0) const {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      const Matrix& g = vars_[i].grad();
      if (g.size() != 0) store[i].grad += weight * g;
    }
  }

private:
  std::vector<Var> vars_;
};

/// Per-point MLP: a chain of Linear layers with ReLU after every layer except,
/// optionally, the last.
struct Mlp {
  std::string prefix;
  std::vector<Index> dims;  ///< input dim followed by each layer width
  bool relu_last = true;
  std::vector<std::size_t> weight_ids, bias_ids;

  Mlp() = default;

  /// Registers `<prefix>.<k>.weight` (in x out) and `<prefix>.<k>.bias` (1 x out).
  /// Weights are Kaiming-uniform with bound sqrt(6 / fan_in); biases are zero.
  Mlp(ParameterStore& store, std::string name, Index in, const std::vector<Index>& widths, bool relu_on_last, std::uint64_t seed)
      : prefix(std::move(name)), relu_last(relu_on_last) {
    if (in < 1 || widths.empty()) throw std::invalid_argument("Mlp '" + prefix + "': needs a positive input width and at least one layer");
    dims.push_back(in);
    for (auto w : widths) {
      if (w < 1) throw std::invalid_argument("Mlp '" + prefix + "': layer widths must be positive");
      dims.push_back(w);
    }
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
      Rng rng = make_rng(derive_seed(seed, {k}));
      const double bound = std::sqrt(6.0 / static_cast<double>(dims[k]));
      Matrix w(dims[k], dims[k + 1]);
      for (Index i = 0; i < w.rows(); ++i)
        for (Index j = 0; j < w.cols(); ++j) w(i, j) = uniform(rng, -bound, bound);
      weight_ids.push_back(store.add(prefix + "." + std::to_string(k) + ".weight", std::move(w)));
      bias_ids.push_back(store.add(prefix + "." + std::to_string(k) + ".bias", Matrix::Zero(1, dims[k + 1])));
    }
  }

  std::size_t layers() const { return weight_ids.size(); }
  Index in_dim() const { return dims.front(); }
  Index out_dim() const { return dims.back(); }

  /// Applies layers [first, last).
  Var forward_range(const Binding& b, Var x, std::size_t first, std::size_t last) const {
    if (x.cols() != in_dim() && first == 0)
      throw std::invalid_argument("Mlp '" + prefix + "': input has " + std::to_string(x.cols()) + " channels, expected " + std::to_string(in_dim()));
    for (std::size_t k = first; k < last; ++k) {
      x = diff::add_bias(diff::matmul(x, b[weight_ids[k]]), b[bias_ids[k]]);
      if (k + 1 < layers() || relu_last) x = diff::relu(x);
    }
    return x;
  }

  Var forward(const Binding& b, const Var& x) const { return forward_range(b, x, 0, layers()); }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Matrix> m, v;

  static AdamState zeros_like(const ParameterStore& store) {
    AdamState s;
    for (const auto& p : store) {
      s.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      s.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
  }

  bool operator==(const AdamState& o) const { return step == o.step && m == o.m && v == o.v; }
};

/// One bias-corrected Adam update using the store's grads.
inline void adam_step(ParameterStore& store, AdamState& state, double lr, const AdamConfig& cfg = {}) {
  if (state.m.size() != store.size() || state.v.size() != store.size())
    throw std::invalid_argument("adam_step: optimizer state does not match parameter count");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() || state.m[i].rows() != p.value.rows() ||
        state.m[i].cols() != p.value.cols())
      throw std::invalid_argument("adam_step: shape mismatch for '" + p.name + "'");
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * p.grad;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    const auto denom = (state.v[i].array().sqrt() / sqrt_bc2) + cfg.eps;
    p.value.array() -= step_size * state.m[i].array() / denom;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'O', 'M', 'R', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_json;  ///< model (and optionally training) configuration
  ParameterStore params;
  AdamState optimizer;
};

namespace detail {
inline void put_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_string(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
inline void put_payload(std::ostream& o, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) put_u64(o, std::bit_cast<std::uint64_t>(m.data()[i]));
}
inline void get_payload(std::istream& in, Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(get_u64(in));
}
}  // namespace detail

inline void write_checkpoint(std::ostream& o, const Checkpoint& ck) {
  o.write(kCheckpointMagic, 4);
  detail::put_u32(o, kCheckpointVersion);
  detail::put_string(o, ck.config_json);
  detail::put_u32(o, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    detail::put_string(o, p.name);
    detail::put_u32(o, static_cast<std::uint32_t>(p.value.rows()));
    detail::put_u32(o, static_cast<std::uint32_t>(p.value.cols()));
    detail::put_payload(o, p.value);
  }
  const bool has_opt = ck.optimizer.m.size() == ck.params.size();
  detail::put_u64(o, ck.optimizer.step);
  detail::put_u32(o, has_opt ? 1u : 0u);
  if (has_opt)
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      detail::put_payload(o, ck.optimizer.m[i]);
      detail::put_payload(o, ck.optimizer.v[i]);
    }
  if (!o) throw std::runtime_error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
    throw std::runtime_error("checkpoint: bad magic (expected OMRG)");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_json = detail::get_string(in);
  const std::uint32_t count = detail::get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::get_string(in);
    const std::uint32_t r = detail::get_u32(in), c = detail::get_u32(in);
    Matrix m(r, c);
    detail::get_payload(in, m);
    ck.params.add(name, std::move(m));
  }
  const std::uint64_t step = detail::get_u64(in);
  if (detail::get_u32(in)) {
    ck.optimizer = AdamState::zeros_like(ck.params);
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      detail::get_payload(in, ck.optimizer.m[i]);
      detail::get_payload(in, ck.optimizer.v[i]);
    }
  }
  ck.optimizer.step = step;
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path.string());
  write_checkpoint(f, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return read_checkpoint(f);
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
inline void assign_compatible(ParameterStore& dst, const ParameterStore& src) {
  if (dst.size() != src.size())
    throw std::runtime_error("checkpoint: expected " + std::to_string(dst.size()) + " parameters, found " + std::to_string(src.size()));
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& e = dst[i];
    const auto& f = src[i];
    if (e.name != f.name || e.value.rows() != f.value.rows() || e.value.cols() != f.value.cols())
      throw std::runtime_error("checkpoint: parameter " + std::to_string(i) + " expected '" + e.name + "' " + diff::shape_str(e.value) + ", found '" +
                               f.name + "' " + diff::shape_str(f.value));
    dst[i].value = f.value;
  }
}

}  // namespace overlapreg::nn
