#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vintk/layers.hpp"
#include "vintk/tensor.hpp"

namespace vintk {

/// An executable network: ordered layers over a fixed input signature,
/// ending in a [1,1,classes] feature map.
class NetworkSpec {
 public:
  NetworkSpec(FeatureShape input, std::size_t classes, std::vector<LayerPtr> layers,
              Parameterization param = Parameterization::Standard)
      : input_(input), classes_(classes), param_(param), stack_(std::move(layers)) {
    if (stack_.layers().empty()) throw ShapeError("network has no layers");
    if (!(stack_.layers().front()->input_shape() == input_)) {
      throw ShapeError("first layer expects " + stack_.layers().front()->input_shape().str() +
                       " but network input is " + input_.str());
    }
    const auto out = stack_.layers().back()->output_shape();
    if (!(out == FeatureShape{1, 1, classes_})) {
      throw ShapeError("network output " + out.str() + " is not 1x1x" + std::to_string(classes_));
    }
    for (const auto& l : stack_.layers())
      for (const auto& s : l->param_specs()) layout_.add(l->name() + "." + s.name, s.shape);
    if (layout_.total() == 0) throw ShapeError("network has no parameters");
  }

  FeatureShape input_shape() const { return input_; }
  std::size_t classes() const { return classes_; }
  Parameterization parameterization() const { return param_; }
  const std::vector<LayerPtr>& layers() const { return stack_.layers(); }
  const LayerStack& stack() const { return stack_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t param_count() const { return layout_.total(); }

  std::uint64_t macs() const {
    std::uint64_t m = 0;
    for (const auto& l : stack_.layers()) m += l->macs();
    return m;
  }

  std::size_t weighted_depth() const {
    std::size_t d = 0;
    for (const auto& l : stack_.layers()) d += l->weighted_depth();
    return d;
  }

 private:
  FeatureShape input_;
  std::size_t classes_;
  Parameterization param_;
  LayerStack stack_;
  ParamLayout layout_;
};

/// Which scalar of the output is differentiated.
struct OutputReduction {
  enum class Kind { SumOfLogits, SingleLogit };
  Kind kind = Kind::SumOfLogits;
  std::size_t logit = 0;

  static OutputReduction sum_of_logits() { return {}; }
  static OutputReduction single_logit(std::size_t k) { return {Kind::SingleLogit, k}; }
};

/// Seeded initialization. Gaussian weights use std 1/sqrt(fan_in) under the
/// standard parameterization and unit std under the NTK parameterization.
inline ParamVector init_params(const NetworkSpec& net, std::uint64_t seed) {
  ParamVector p;
  p.layout = net.layout();
  p.values.resize(p.layout.total());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t k = 0;
  for (const auto& l : net.layers()) {
    for (const auto& s : l->param_specs()) {
      const std::size_t n = Tensor::count(s.shape);
      const double std_dev = net.parameterization() == Parameterization::Ntk
                                 ? 1.0
                                 : 1.0 / std::sqrt(static_cast<double>(s.fan_in));
      for (std::size_t i = 0; i < n; ++i, ++k) {
        switch (s.init) {
          case Init::Gaussian: p.values[k] = std_dev * normal(rng); break;
          case Init::Zeros: p.values[k] = 0.0; break;
          case Init::Ones: p.values[k] = 1.0; break;
        }
      }
    }
  }
  return p;
}

inline ParamVector zero_params(const NetworkSpec& net) {
  ParamVector p;
  p.layout = net.layout();
  p.values.assign(p.layout.total(), 0.0);
  return p;
}

namespace detail {

/// Accepts [N,H,W,C], [H,W,C], or a flat [d] when the input signature is
/// 1x1xd. Returns the batched view and whether the caller passed one sample.
inline std::pair<Tensor, bool> as_batch(const NetworkSpec& net, const Tensor& input) {
  const auto s = net.input_shape();
  if (input.rank() == 4) {
    if (input.dim(1) != s.h || input.dim(2) != s.w || input.dim(3) != s.c)
      throw ShapeError("input " + shape_string(input.shape()) + " does not match signature " +
                       s.str());
    return {input, false};
  }
  if (input.rank() == 3 && input.dim(0) == s.h && input.dim(1) == s.w && input.dim(2) == s.c)
    return {input.reshaped({1, s.h, s.w, s.c}), true};
  if (input.rank() == 1 && s.h == 1 && s.w == 1 && input.dim(0) == s.c)
    return {input.reshaped({1, 1, 1, s.c}), true};
  throw ShapeError("input " + shape_string(input.shape()) + " does not match signature " + s.str());
}

inline void check_params(const NetworkSpec& net, const ParamVector& params) {
  if (!(params.layout == net.layout()))
    throw ShapeError("parameter layout does not match the network");
}

}  // namespace detail

/// Activations of one forward pass, kept for a following backward pass.
struct ForwardTrace {
  Tensor input;  // always [N,H,W,C]
  Scratch scratch;

  /// Network output as [N, classes].
  Tensor logits() const {
    const auto& out = scratch.activations.back();
    return out.reshaped({out.dim(0), out.dim(3)});
  }
};

inline ForwardTrace forward_trace(const NetworkSpec& net, const ParamVector& params,
                                  const Tensor& input) {
  detail::check_params(net, params);
  ForwardTrace t;
  t.input = detail::as_batch(net, input).first;
  net.stack().forward(t.input, params.values, t.scratch);
  return t;
}

/// Gradient of sum_{n,k} grad_logits[n,k] * f_k(x_n) with respect to the
/// parameters.
inline GradVector backward(const NetworkSpec& net, const ParamVector& params,
                           const ForwardTrace& trace, const Tensor& grad_logits) {
  const auto& out = trace.scratch.activations.back();
  if (grad_logits.size() != out.size())
    throw ShapeError("logit gradient " + shape_string(grad_logits.shape()) +
                     " does not match output " + shape_string(out.shape()));
  GradVector g;
  g.values.assign(params.size(), 0.0);
  net.stack().backward(trace.input, grad_logits.reshaped(out.shape()), params.values,
                       trace.scratch, g.values, nullptr);
  return g;
}

/// Network output: [n_L] for a single sample, [N, n_L] for a batch.
inline Tensor forward(const NetworkSpec& net, const ParamVector& params, const Tensor& input) {
  const bool single = detail::as_batch(net, input).second;
  Tensor logits = forward_trace(net, params, input).logits();
  return single ? logits.reshaped({logits.dim(1)}) : logits;
}

namespace detail {

inline Tensor reduction_weights(const NetworkSpec& net, std::size_t batch, OutputReduction r) {
  Tensor w({batch, net.classes()});
  for (std::size_t n = 0; n < batch; ++n) {
    if (r.kind == OutputReduction::Kind::SumOfLogits) {
      for (std::size_t k = 0; k < net.classes(); ++k) w[n * net.classes() + k] = 1.0;
    } else {
      if (r.logit >= net.classes()) throw ShapeError("logit index out of range");
      w[n * net.classes() + r.logit] = 1.0;
    }
  }
  return w;
}

inline double reduce(const Tensor& logits, std::size_t classes, OutputReduction r) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (r.kind == OutputReduction::Kind::SumOfLogits || i % classes == r.logit) s += logits[i];
  return s;
}

}  // namespace detail

/// Gradient of the reduced scalar output. For a batch input, the reduced
/// outputs of all samples are summed.
inline GradVector param_gradient(const NetworkSpec& net, const ParamVector& params,
                                 const Tensor& input,
                                 OutputReduction reduction = OutputReduction::sum_of_logits()) {
  auto trace = forward_trace(net, params, input);
  return backward(net, params, trace,
                  detail::reduction_weights(net, trace.input.dim(0), reduction));
}

/// Central-difference gradient of an arbitrary scalar function.
template <class Fn, class Vec>
Vec central_difference(Fn&& f, Vec x, double h) {
  if (!(h > 0.0)) throw Error("finite-difference step must be positive");
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(std::as_const(x));
    x[i] = orig - h;
    const double dn = f(std::as_const(x));
    x[i] = orig;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Central differences of the reduced output, one parameter at a time.
/// Uses only forward passes; serves as the oracle for param_gradient.
inline GradVector finite_diff_gradient(const NetworkSpec& net, const ParamVector& params,
                                       const Tensor& input, OutputReduction reduction, double h) {
  ParamVector p = params;
  auto f = [&](const Buffer& theta) {
    p.values = theta;
    return detail::reduce(forward_trace(net, p, input).logits(), net.classes(), reduction);
  };
  return GradVector{central_difference(f, params.values, h)};
}

}  // namespace vintk
