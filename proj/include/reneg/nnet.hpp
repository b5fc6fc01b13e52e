#pragma once

// Small fully-connected network with exact backpropagation, used both as the
// policy network (observation -> steer) and as the feedback network
// (observation + steer -> predicted feedback).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "reneg/errors.hpp"

namespace reneg::nn {

enum class NetKind { pnet, fnet };
enum class Activation { tanh, identity };

inline const char* to_string(NetKind k) { return k == NetKind::pnet ? "pnet" : "fnet"; }
inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

/// Per-sample loss evaluated at the network output, with its derivative.
struct LossValue {
  double value = 0.0;
  double grad = 0.0;  // d value / d output
};

/// Activations of one forward pass, kept for backpropagation.
struct Tape {
  std::vector<std::vector<double>> act;  // act[0] = input, act.back() = output
};

class Mlp {
 public:
  Mlp() = default;

  Mlp(NetKind kind, std::vector<std::size_t> sizes, std::vector<Activation> activations, bool bias_free = false)
      : kind_(kind), sizes_(std::move(sizes)), activations_(std::move(activations)), bias_free_(bias_free) {
    if (sizes_.size() < 2) throw ShapeMismatch("a network needs at least an input and an output layer");
    if (activations_.size() != sizes_.size() - 1) {
      throw ShapeMismatch("one activation per layer is required");
    }
    for (std::size_t s : sizes_) {
      if (s == 0) throw ShapeMismatch("layer sizes must be positive");
    }
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(n);
      n += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
    }
    params_.assign(n, 0.0);
  }

  NetKind kind() const noexcept { return kind_; }
  const std::vector<std::size_t>& sizes() const noexcept { return sizes_; }
  const std::vector<Activation>& activations() const noexcept { return activations_; }
  bool bias_free() const noexcept { return bias_free_; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t layers() const { return sizes_.size() - 1; }

  std::span<const double> params() const noexcept { return params_; }
  std::span<double> params() noexcept { return params_; }
  std::size_t num_params() const noexcept { return params_.size(); }

  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + sizes_[layer] * sizes_[layer + 1];
  }
  bool is_bias(std::size_t index) const {
    for (std::size_t l = 0; l < layers(); ++l) {
      const std::size_t b = bias_offset(l);
      if (index >= b && index < b + sizes_[l + 1]) return true;
    }
    return false;
  }

  double forward(std::span<const double> input) const {
    Tape tape;
    return forward(input, tape);
  }

  double forward(std::span<const double> input, Tape& tape) const {
    if (input.size() != input_size()) {
      throw ShapeMismatch("input has " + std::to_string(input.size()) + " entries, network expects " +
                          std::to_string(input_size()));
    }
    if (output_size() != 1) throw ShapeMismatch("scalar forward needs a single output");
    tape.act.resize(sizes_.size());
    tape.act[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < layers(); ++l) {
      const std::size_t in = sizes_[l];
      const std::size_t out = sizes_[l + 1];
      const double* w = params_.data() + weight_offset(l);
      const double* b = params_.data() + bias_offset(l);
      const std::vector<double>& x = tape.act[l];
      std::vector<double>& y = tape.act[l + 1];
      y.resize(out);
      for (std::size_t j = 0; j < out; ++j) {
        const double* row = w + j * in;
        double z = b[j];
        for (std::size_t i = 0; i < in; ++i) z += row[i] * x[i];
        y[j] = activations_[l] == Activation::tanh ? std::tanh(z) : z;
      }
    }
    return tape.act.back()[0];
  }

  /// Accumulates dloss_dy * d(output)/d(params) into `grad`. When
  /// `input_grad` is non-empty it receives d(output)/d(input) * dloss_dy.
  void backward(const Tape& tape, double dloss_dy, std::span<double> grad,
                std::span<double> input_grad = {}) const {
    if (grad.size() != params_.size()) throw ShapeMismatch("gradient buffer has the wrong size");
    std::vector<double> delta{dloss_dy};
    std::vector<double> prev;
    for (std::size_t l = layers(); l-- > 0;) {
      const std::size_t in = sizes_[l];
      const std::size_t out = sizes_[l + 1];
      const std::vector<double>& y = tape.act[l + 1];
      const std::vector<double>& x = tape.act[l];
      if (activations_[l] == Activation::tanh) {
        for (std::size_t j = 0; j < out; ++j) delta[j] *= 1.0 - y[j] * y[j];
      }
      const double* w = params_.data() + weight_offset(l);
      double* gw = grad.data() + weight_offset(l);
      double* gb = grad.data() + bias_offset(l);
      const bool need_prev = l > 0 || !input_grad.empty();
      if (need_prev) prev.assign(in, 0.0);
      for (std::size_t j = 0; j < out; ++j) {
        const double d = delta[j];
        double* grow = gw + j * in;
        const double* wrow = w + j * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += d * x[i];
        if (!bias_free_) gb[j] += d;
        if (need_prev) {
          for (std::size_t i = 0; i < in; ++i) prev[i] += wrow[i] * d;
        }
      }
      if (l == 0) {
        if (!input_grad.empty()) {
          if (input_grad.size() != in) throw ShapeMismatch("input gradient buffer has the wrong size");
          for (std::size_t i = 0; i < in; ++i) input_grad[i] = prev[i];
        }
        break;
      }
      delta.swap(prev);
    }
  }

  /// d(output)/d(input) * dloss_dy without touching parameter gradients.
  void backward_input(const Tape& tape, double dloss_dy, std::span<double> input_grad) const {
    if (input_grad.size() != input_size()) throw ShapeMismatch("input gradient buffer has the wrong size");
    std::vector<double> delta{dloss_dy};
    std::vector<double> prev;
    for (std::size_t l = layers(); l-- > 0;) {
      const std::size_t in = sizes_[l];
      const std::size_t out = sizes_[l + 1];
      const std::vector<double>& y = tape.act[l + 1];
      if (activations_[l] == Activation::tanh) {
        for (std::size_t j = 0; j < out; ++j) delta[j] *= 1.0 - y[j] * y[j];
      }
      const double* w = params_.data() + weight_offset(l);
      prev.assign(in, 0.0);
      for (std::size_t j = 0; j < out; ++j) {
        const double* wrow = w + j * in;
        for (std::size_t i = 0; i < in; ++i) prev[i] += wrow[i] * delta[j];
      }
      delta.swap(prev);
    }
    std::copy(delta.begin(), delta.end(), input_grad.begin());
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    return a.kind_ == b.kind_ && a.sizes_ == b.sizes_ && a.activations_ == b.activations_ &&
           a.bias_free_ == b.bias_free_ && a.params_ == b.params_;
  }

 private:
  NetKind kind_ = NetKind::pnet;
  std::vector<std::size_t> sizes_;
  std::vector<Activation> activations_;
  bool bias_free_ = false;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Hidden widths of the policy / feedback head.
inline std::vector<std::size_t> default_hidden() { return {100, 300, 20}; }

inline std::vector<std::size_t> layer_sizes(std::size_t input, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> sizes{input};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return sizes;
}

/// Glorot-uniform weights, zero biases, tanh everywhere (hidden and head).
inline Mlp init(NetKind kind, const std::vector<std::size_t>& sizes, std::uint64_t seed, bool bias_free = false,
                std::vector<Activation> activations = {}) {
  if (activations.empty() && sizes.size() >= 2) activations.assign(sizes.size() - 1, Activation::tanh);
  Mlp net(kind, sizes, std::move(activations), bias_free);
  std::mt19937_64 rng(seed);
  auto p = net.params();
  for (std::size_t l = 0; l < net.layers(); ++l) {
    const double fan_in = static_cast<double>(sizes[l]);
    const double fan_out = static_cast<double>(sizes[l + 1]);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    const std::size_t off = net.weight_offset(l);
    for (std::size_t k = 0; k < sizes[l] * sizes[l + 1]; ++k) p[off + k] = dist(rng);
  }
  return net;
}

inline Mlp init_pnet(std::size_t obs_size, std::uint64_t seed, const std::vector<std::size_t>& hidden = default_hidden(),
                     bool bias_free = false) {
  return init(NetKind::pnet, layer_sizes(obs_size, hidden), seed, bias_free);
}

/// The steer input is concatenated to the observation at the first layer.
inline Mlp init_fnet(std::size_t obs_size, std::uint64_t seed,
                     const std::vector<std::size_t>& hidden = default_hidden()) {
  return init(NetKind::fnet, layer_sizes(obs_size + 1, hidden), seed);
}

// -- batch gradients -------------------------------------------------------------

using LossFn = std::function<LossValue(double output)>;

struct BatchItem {
  std::vector<double> input;
  LossFn loss;
};

struct GradResult {
  double loss = 0.0;  // mean over the batch
  std::vector<double> grad;
};

/// Exact gradient of the mean per-sample loss. Samples whose loss derivative
/// is exactly zero contribute nothing and are not backpropagated.
inline GradResult grad(const Mlp& net, std::span<const BatchItem> batch) {
  GradResult out;
  out.grad.assign(net.num_params(), 0.0);
  if (batch.empty()) return out;
  Tape tape;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const double y = net.forward(batch[k].input, tape);
    const LossValue lv = batch[k].loss(y);
    if (!std::isfinite(lv.value) || !std::isfinite(lv.grad)) {
      throw NonFiniteLoss("non-finite loss at batch item " + std::to_string(k));
    }
    out.loss += lv.value;
    if (lv.grad != 0.0) net.backward(tape, lv.grad, out.grad);
  }
  const double n = static_cast<double>(batch.size());
  out.loss /= n;
  for (double& g : out.grad) g /= n;
  for (double g : out.grad) {
    if (!std::isfinite(g)) throw NonFiniteLoss("non-finite gradient");
  }
  return out;
}

inline double mean_loss(const Mlp& net, std::span<const BatchItem> batch) {
  double total = 0.0;
  Tape tape;
  for (const auto& item : batch) total += item.loss(net.forward(item.input, tape)).value;
  return batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
}

/// Largest |analytic - central difference| / (|analytic| + |central| + 1e-12)
/// over all parameters.
inline double finite_diff_check(const Mlp& net, std::span<const BatchItem> batch, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  const GradResult analytic = grad(net, batch);
  Mlp probe = net;
  double worst = 0.0;
  for (std::size_t i = 0; i < net.num_params(); ++i) {
    if (net.bias_free() && net.is_bias(i)) continue;
    const double p0 = probe.params()[i];
    probe.params()[i] = p0 + h;
    const double up = mean_loss(probe, batch);
    probe.params()[i] = p0 - h;
    const double down = mean_loss(probe, batch);
    probe.params()[i] = p0;
    const double central = (up - down) / (2.0 * h);
    const double a = analytic.grad[i];
    worst = std::max(worst, std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12));
  }
  return worst;
}

// -- params files ------------------------------------------------------------------
//
//   reneg-params 1
//   kind pnet|fnet
//   sizes <n0> <n1> ... <nL>
//   activations <tanh|identity> x L
//   bias_free 0|1
//   count <N>
//   <N lines, one parameter each, %.17g>

inline constexpr int kParamsVersion = 1;

inline std::string serialize(const Mlp& net) {
  std::string out = "reneg-params " + std::to_string(kParamsVersion) + "\n";
  out += std::string("kind ") + to_string(net.kind()) + "\n";
  out += "sizes";
  for (auto s : net.sizes()) out += " " + std::to_string(s);
  out += "\nactivations";
  for (auto a : net.activations()) out += std::string(" ") + to_string(a);
  out += "\nbias_free " + std::string(net.bias_free() ? "1" : "0") + "\n";
  out += "count " + std::to_string(net.num_params()) + "\n";
  char buf[40];
  for (double p : net.params()) {
    std::snprintf(buf, sizeof buf, "%.17g\n", p);
    out += buf;
  }
  return out;
}

inline Mlp parse_params(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&](const char* what) -> std::istringstream {
    if (!std::getline(in, line)) throw FormatError(line_no + 1, std::string("truncated file: expected ") + what);
    ++line_no;
    return std::istringstream(line);
  };
  auto expect_key = [&](std::istringstream& ls, const std::string& key) {
    std::string k;
    if (!(ls >> k) || k != key) throw FormatError(line_no, "expected '" + key + "'");
  };

  {
    auto ls = next_line("header");
    expect_key(ls, "reneg-params");
    int version = 0;
    if (!(ls >> version)) throw FormatError(line_no, "missing version");
    if (version != kParamsVersion) throw VersionError("unsupported params version " + std::to_string(version));
  }
  NetKind kind;
  {
    auto ls = next_line("kind");
    expect_key(ls, "kind");
    std::string k;
    ls >> k;
    if (k == "pnet") kind = NetKind::pnet;
    else if (k == "fnet") kind = NetKind::fnet;
    else throw FormatError(line_no, "unknown network kind '" + k + "'");
  }
  std::vector<std::size_t> sizes;
  {
    auto ls = next_line("sizes");
    expect_key(ls, "sizes");
    std::size_t s;
    while (ls >> s) sizes.push_back(s);
    if (sizes.size() < 2) throw FormatError(line_no, "need at least two layer sizes");
  }
  std::vector<Activation> acts;
  {
    auto ls = next_line("activations");
    expect_key(ls, "activations");
    std::string a;
    while (ls >> a) {
      if (a == "tanh") acts.push_back(Activation::tanh);
      else if (a == "identity") acts.push_back(Activation::identity);
      else throw FormatError(line_no, "unknown activation '" + a + "'");
    }
    if (acts.size() != sizes.size() - 1) throw FormatError(line_no, "activation count does not match layers");
  }
  bool bias_free = false;
  {
    auto ls = next_line("bias_free");
    expect_key(ls, "bias_free");
    int b = 0;
    if (!(ls >> b)) throw FormatError(line_no, "bad bias_free flag");
    bias_free = b != 0;
  }
  Mlp net(kind, sizes, acts, bias_free);
  {
    auto ls = next_line("count");
    expect_key(ls, "count");
    std::size_t n = 0;
    if (!(ls >> n) || n != net.num_params()) throw FormatError(line_no, "parameter count does not match sizes");
  }
  auto p = net.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    next_line("parameter");
    char* end = nullptr;
    p[i] = std::strtod(line.c_str(), &end);
    if (end == line.c_str()) throw FormatError(line_no, "bad parameter value '" + line + "'");
  }
  return net;
}

inline void save(const Mlp& net, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << serialize(net);
}

inline Mlp load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_params(in);
}

}  // namespace reneg::nn
