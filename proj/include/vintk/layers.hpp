#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vintk/tensor.hpp"

namespace vintk {

/// Spatial extent and channel count of one sample's feature map.
struct FeatureShape {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c = 1;

  std::size_t tokens() const { return h * w; }
  std::size_t numel() const { return h * w * c; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
  std::string str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }
};

/// Standard: weights ~ N(0, 1/fan_in), used as-is.
/// Ntk: weights ~ N(0, 1), multiplied by 1/sqrt(fan_in) in the forward pass.
enum class Parameterization { Standard, Ntk };

enum class Init { Gaussian, Zeros, Ones };

/// Declares one parameter block of a layer.
struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in = 1;
  Init init = Init::Gaussian;
};

/// Per-call workspace a layer fills during forward and reads in backward.
struct Scratch {
  std::vector<Tensor> buffers;
  std::vector<Scratch> children;
  std::vector<Tensor> activations;
};

/// One node of a statically composed network. Layers are immutable after
/// construction; every per-call buffer lives in Scratch, so a single Layer
/// may be used from many threads at once.
///
/// Tensors flowing between layers have shape [N, H, W, C].
class Layer {
 public:
  Layer(std::string name, FeatureShape in) : name_(std::move(name)), in_(in) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  FeatureShape input_shape() const { return in_; }
  virtual FeatureShape output_shape() const { return in_; }
  virtual std::string kind() const = 0;

  virtual std::vector<ParamSpec> param_specs() const { return {}; }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& s : param_specs()) n += Tensor::count(s.shape);
    return n;
  }

  /// Multiply-accumulates for one sample.
  virtual std::uint64_t macs() const = 0;

  /// Number of parameterized layers on the longest path (used as a depth
  /// proxy by the arc-cosine metric).
  virtual std::size_t weighted_depth() const { return param_specs().empty() ? 0 : 1; }

  virtual void forward(const Tensor& in, std::span<const double> params, Tensor& out,
                       Scratch& scratch) const = 0;

  /// Accumulates into `grad_params` (same span layout as `params`). Writes
  /// the input gradient when `grad_in` is non-null.
  virtual void backward(const Tensor& in, const Tensor& out, const Tensor& grad_out,
                        std::span<const double> params, const Scratch& scratch,
                        std::span<double> grad_params, Tensor* grad_in) const = 0;

 protected:
  static std::size_t batch_of(const Tensor& t) { return t.dim(0); }
  static Tensor make_like(std::size_t n, FeatureShape s, double fill = 0.0) {
    return Tensor({n, s.h, s.w, s.c}, fill);
  }
  void check_input(const Tensor& in) const {
    if (in.rank() != 4 || in.dim(1) != in_.h || in.dim(2) != in_.w || in.dim(3) != in_.c) {
      throw ShapeError("layer '" + name_ + "' expects [N," + std::to_string(in_.h) + "," +
                       std::to_string(in_.w) + "," + std::to_string(in_.c) + "], got " +
                       shape_string(in.shape()));
    }
  }

 private:
  std::string name_;
  FeatureShape in_;
};

using LayerPtr = std::shared_ptr<const Layer>;

namespace detail {

inline double weight_scale(Parameterization p, std::size_t fan_in) {
  return p == Parameterization::Ntk ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 1.0;
}

// y = scale * x W + b, with x [R, in], W [in, out].
inline void linear_forward(const Eigen::Ref<const RowMatrix>& x, std::span<const double> w, std::span<const double> b,
                           double scale, MatMap y) {
  ConstMatMap wm(w.data(), x.cols(), y.cols());
  y.noalias() = scale * (x * wm);
  if (!b.empty()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(b.data(), y.cols());
    y.rowwise() += bv;
  }
}

inline void linear_backward(const Eigen::Ref<const RowMatrix>& x, const Eigen::Ref<const RowMatrix>& gy, std::span<const double> w,
                            double scale, std::span<double> gw, std::span<double> gb,
                            MatMap* gx) {
  MatMap gwm(gw.data(), x.cols(), gy.cols());
  gwm.noalias() += scale * (x.transpose() * gy);
  if (!gb.empty()) {
    Eigen::Map<Eigen::RowVectorXd> gbv(gb.data(), gy.cols());
    gbv += gy.colwise().sum();
  }
  if (gx) {
    ConstMatMap wm(w.data(), x.cols(), gy.cols());
    gx->noalias() = scale * (gy * wm.transpose());
  }
}

// GELU in its sigmoid form, x * sigmoid(1.702 x).
constexpr double kGeluK = 1.702;

/// Writes sigmoid(1.702 x) into `gate` and x * gate into `y`.
inline void gelu_forward(std::span<const double> x, std::span<double> gate, std::span<double> y) {
  using Arr = Eigen::Map<const Eigen::ArrayXd>;
  using MArr = Eigen::Map<Eigen::ArrayXd>;
  const auto n = static_cast<Eigen::Index>(x.size());
  Arr xa(x.data(), n);
  MArr ga(gate.data(), n);
  ga = 1.0 / (1.0 + (-kGeluK * xa).exp());
  MArr(y.data(), n) = xa * ga;
}

/// d/dx [x * sigmoid(k x)] = s + k x s (1 - s), given s = sigmoid(k x).
inline void gelu_backward(std::span<const double> x, std::span<const double> gate,
                          std::span<double> g) {
  using Arr = Eigen::Map<const Eigen::ArrayXd>;
  const auto n = static_cast<Eigen::Index>(x.size());
  Arr xa(x.data(), n), sa(gate.data(), n);
  Eigen::Map<Eigen::ArrayXd> ga(g.data(), n);
  ga *= sa + kGeluK * xa * sa * (1.0 - sa);
}

inline double gelu(double x) { return x / (1.0 + std::exp(-kGeluK * x)); }

}  // namespace detail

/// Per-token affine map over channels: [N,H,W,in] -> [N,H,W,out].
/// Doubles as the pointwise (1x1) convolution and the classifier head.
class Linear final : public Layer {
 public:
  Linear(std::string name, FeatureShape in, std::size_t out, bool bias = true,
         Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), out_(out), bias_(bias),
        scale_(detail::weight_scale(p, in.c)) {}

  std::string kind() const override { return "linear"; }
  FeatureShape output_shape() const override { return {input_shape().h, input_shape().w, out_}; }
  std::vector<ParamSpec> param_specs() const override {
    std::vector<ParamSpec> s{{"weight", {input_shape().c, out_}, input_shape().c, Init::Gaussian}};
    if (bias_) s.push_back({"bias", {out_}, 1, Init::Zeros});
    return s;
  }
  std::uint64_t macs() const override { return input_shape().tokens() * input_shape().c * out_; }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out, Scratch&) const override {
    check_input(in);
    const std::size_t cin = input_shape().c;
    out = make_like(batch_of(in), output_shape());
    detail::linear_forward(in.as_matrix(cin), p.first(cin * out_),
                           bias_ ? p.subspan(cin * out_, out_) : std::span<const double>{}, scale_,
                           out.as_matrix(out_));
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch&, std::span<double> gp, Tensor* gin) const override {
    const std::size_t cin = input_shape().c;
    MatMap* gx = nullptr;
    std::optional<MatMap> gxm;
    if (gin) {
      *gin = make_like(batch_of(in), input_shape());
      gxm.emplace(gin->as_matrix(cin));
      gx = &*gxm;
    }
    detail::linear_backward(in.as_matrix(cin), gout.as_matrix(out_), p.first(cin * out_), scale_,
                            gp.first(cin * out_),
                            bias_ ? gp.subspan(cin * out_, out_) : std::span<double>{}, gx);
  }

 private:
  std::size_t out_;
  bool bias_;
  double scale_;
};

/// Non-overlapping k x k, stride-k convolution. Serves as the patch embedding
/// and as the 2x2 downsampling module between stages.
class PatchConv final : public Layer {
 public:
  PatchConv(std::string name, FeatureShape in, std::size_t kernel, std::size_t out,
            Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), k_(kernel), out_(out),
        scale_(detail::weight_scale(p, kernel * kernel * in.c)) {
    if (k_ == 0 || in.h % k_ != 0 || in.w % k_ != 0) {
      throw ShapeError("patch conv '" + this->name() + "': kernel " + std::to_string(k_) +
                       " does not tile " + in.str());
    }
  }

  std::size_t kernel() const { return k_; }
  std::string kind() const override { return "patch_conv"; }
  FeatureShape output_shape() const override {
    return {input_shape().h / k_, input_shape().w / k_, out_};
  }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t fan = k_ * k_ * input_shape().c;
    return {{"weight", {fan, out_}, fan, Init::Gaussian}, {"bias", {out_}, 1, Init::Zeros}};
  }
  std::uint64_t macs() const override {
    return output_shape().tokens() * k_ * k_ * input_shape().c * out_;
  }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    const std::size_t fan = k_ * k_ * input_shape().c;
    s.buffers.assign(1, im2col(in));
    out = make_like(batch_of(in), output_shape());
    detail::linear_forward(s.buffers[0].as_matrix(fan), p.first(fan * out_),
                           p.subspan(fan * out_, out_), scale_, out.as_matrix(out_));
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    const std::size_t fan = k_ * k_ * input_shape().c;
    Tensor gcol;
    std::optional<MatMap> gxm;
    if (gin) {
      gcol = Tensor(s.buffers[0].shape());
      gxm.emplace(gcol.as_matrix(fan));
    }
    detail::linear_backward(s.buffers[0].as_matrix(fan), gout.as_matrix(out_), p.first(fan * out_),
                            scale_, gp.first(fan * out_), gp.subspan(fan * out_, out_),
                            gin ? &*gxm : nullptr);
    if (gin) *gin = col2im(gcol, batch_of(in));
  }

 private:
  Tensor im2col(const Tensor& in) const {
    const auto [h, w, c] = input_shape();
    const std::size_t n = batch_of(in), oh = h / k_, ow = w / k_;
    Tensor col({n * oh * ow, k_ * k_ * c});
    std::size_t r = 0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++r) {
          double* dst = col.data().data() + r * k_ * k_ * c;
          for (std::size_t dy = 0; dy < k_; ++dy)
            for (std::size_t dx = 0; dx < k_; ++dx) {
              const double* src =
                  in.data().data() + ((b * h + oy * k_ + dy) * w + ox * k_ + dx) * c;
              std::copy(src, src + c, dst + (dy * k_ + dx) * c);
            }
        }
    return col;
  }

  Tensor col2im(const Tensor& col, std::size_t n) const {
    const auto [h, w, c] = input_shape();
    const std::size_t oh = h / k_, ow = w / k_;
    Tensor img = make_like(n, input_shape());
    std::size_t r = 0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++r) {
          const double* src = col.data().data() + r * k_ * k_ * c;
          for (std::size_t dy = 0; dy < k_; ++dy)
            for (std::size_t dx = 0; dx < k_; ++dx) {
              double* dst = img.data().data() + ((b * h + oy * k_ + dy) * w + ox * k_ + dx) * c;
              std::copy(src + (dy * k_ + dx) * c, src + (dy * k_ + dx + 1) * c, dst);
            }
        }
    return img;
  }

  std::size_t k_;
  std::size_t out_;
  double scale_;
};

/// Per-token normalization over channels with learned gain and shift.
class LayerNorm final : public Layer {
 public:
  LayerNorm(std::string name, FeatureShape in, double eps = 1e-5)
      : Layer(std::move(name), in), eps_(eps) {}

  std::string kind() const override { return "layer_norm"; }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t c = input_shape().c;
    return {{"gamma", {c}, 1, Init::Ones}, {"beta", {c}, 1, Init::Zeros}};
  }
  std::size_t weighted_depth() const override { return 0; }
  std::uint64_t macs() const override { return 0; }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    const std::size_t c = input_shape().c;
    const std::size_t rows = in.size() / c;
    out = Tensor(in.shape());
    s.buffers.assign(2, Tensor());
    s.buffers[0] = Tensor(in.shape());  // normalized input
    s.buffers[1] = Tensor({rows});      // reciprocal std
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = in.data().data() + r * c;
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += x[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= static_cast<double>(c);
      const double rstd = 1.0 / std::sqrt(var + eps_);
      s.buffers[1][r] = rstd;
      for (std::size_t j = 0; j < c; ++j) {
        const double xh = (x[j] - mean) * rstd;
        s.buffers[0][r * c + j] = xh;
        out[r * c + j] = p[j] * xh + p[c + j];
      }
    }
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    const std::size_t c = input_shape().c;
    const std::size_t rows = in.size() / c;
    if (gin) *gin = Tensor(in.shape());
    std::vector<double> gxh(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xh = s.buffers[0].data().data() + r * c;
      const double* g = gout.data().data() + r * c;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        gp[j] += g[j] * xh[j];
        gp[c + j] += g[j];
        gxh[j] = g[j] * p[j];
        m1 += gxh[j];
        m2 += gxh[j] * xh[j];
      }
      if (!gin) continue;
      m1 /= static_cast<double>(c);
      m2 /= static_cast<double>(c);
      const double rstd = s.buffers[1][r];
      for (std::size_t j = 0; j < c; ++j) (*gin)[r * c + j] = rstd * (gxh[j] - m1 - xh[j] * m2);
    }
  }

 private:
  double eps_;
};

enum class ActivationKind { Relu, Gelu };

/// Elementwise nonlinearity.
class Activation final : public Layer {
 public:
  Activation(std::string name, FeatureShape in, ActivationKind kind)
      : Layer(std::move(name), in), act_(kind) {}

  std::string kind() const override { return act_ == ActivationKind::Relu ? "relu" : "gelu"; }
  std::uint64_t macs() const override { return 0; }

  void forward(const Tensor& in, std::span<const double>, Tensor& out, Scratch& s) const override {
    check_input(in);
    out = Tensor(in.shape());
    if (act_ == ActivationKind::Relu) {
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(0.0, in[i]);
      return;
    }
    s.buffers.assign(1, Tensor(in.shape()));
    detail::gelu_forward(in.data(), s.buffers[0].data(), out.data());
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double>,
                const Scratch& s, std::span<double>, Tensor* gin) const override {
    if (!gin) return;
    *gin = gout;
    if (act_ == ActivationKind::Relu) {
      for (std::size_t i = 0; i < in.size(); ++i)
        if (!(in[i] > 0.0)) (*gin)[i] = 0.0;
      return;
    }
    detail::gelu_backward(in.data(), s.buffers[0].data(), gin->data());
  }

 private:
  ActivationKind act_;
};

/// Multi-head self-attention over the tokens of each sample: fused QKV
/// projection, scaled dot-product softmax attention per head, output
/// projection. Channels must divide evenly by the head count.
class MultiHeadSelfAttention final : public Layer {
 public:
  MultiHeadSelfAttention(std::string name, FeatureShape in, std::size_t heads,
                         Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), heads_(heads), scale_(detail::weight_scale(p, in.c)) {
    if (heads_ == 0 || in.c % heads_ != 0) {
      throw ShapeError("attention '" + this->name() + "': " + std::to_string(in.c) +
                       " channels not divisible by " + std::to_string(heads_) + " heads");
    }
  }

  std::size_t heads() const { return heads_; }
  std::string kind() const override { return "msa"; }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t c = input_shape().c;
    return {{"qkv.weight", {c, 3 * c}, c, Init::Gaussian},
            {"qkv.bias", {3 * c}, 1, Init::Zeros},
            {"proj.weight", {c, c}, c, Init::Gaussian},
            {"proj.bias", {c}, 1, Init::Zeros}};
  }
  std::uint64_t macs() const override {
    const std::uint64_t t = input_shape().tokens(), c = input_shape().c;
    return t * c * 3 * c + 2 * t * t * c + t * c * c;
  }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    const std::size_t dh = c / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto [wqkv, bqkv, wo, bo] = split(p);

    s.buffers.assign(3, Tensor());
    s.buffers[0] = Tensor({n * t, 3 * c});          // qkv
    s.buffers[1] = Tensor({n, heads_, t, t});       // attention probabilities
    s.buffers[2] = Tensor({n * t, c});              // concatenated head outputs
    auto qkv = s.buffers[0].as_matrix(3 * c);
    detail::linear_forward(in.as_matrix(c), wqkv, bqkv, scale_, qkv);
    auto att = s.buffers[2].as_matrix(c);

    RowMatrix scores(t, t);
    for (std::size_t b = 0; b < n; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b * t);
      const auto tt = static_cast<Eigen::Index>(t);
      const auto d = static_cast<Eigen::Index>(dh);
      for (std::size_t h = 0; h < heads_; ++h) {
        const auto hc = static_cast<Eigen::Index>(h * dh);
        auto q = qkv.block(r0, hc, tt, d);
        auto k = qkv.block(r0, static_cast<Eigen::Index>(c) + hc, tt, d);
        auto v = qkv.block(r0, static_cast<Eigen::Index>(2 * c) + hc, tt, d);
        scores.noalias() = inv * (q * k.transpose());
        MatMap prob(s.buffers[1].data().data() + (b * heads_ + h) * t * t, tt, tt);
        for (Eigen::Index i = 0; i < tt; ++i) {
          const double mx = scores.row(i).maxCoeff();
          prob.row(i) = (scores.row(i).array() - mx).exp();
          prob.row(i) /= prob.row(i).sum();
        }
        att.block(r0, hc, tt, d).noalias() = prob * v;
      }
    }
    out = make_like(n, input_shape());
    detail::linear_forward(s.buffers[2].as_matrix(c), wo, bo, scale_, out.as_matrix(c));
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    const std::size_t dh = c / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto [wqkv, bqkv, wo, bo] = split(p);
    auto gsp = split_mut(gp);

    Tensor gatt({n * t, c});
    MatMap gattm = gatt.as_matrix(c);
    detail::linear_backward(s.buffers[2].as_matrix(c), gout.as_matrix(c), wo, scale_, gsp[2],
                            gsp[3], &gattm);

    Tensor gqkv({n * t, 3 * c});
    MatMap gq = gqkv.as_matrix(3 * c);
    const auto qkv = s.buffers[0].as_matrix(3 * c);
    RowMatrix dprob(t, t), dscore(t, t);
    for (std::size_t b = 0; b < n; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b * t);
      const auto tt = static_cast<Eigen::Index>(t);
      const auto d = static_cast<Eigen::Index>(dh);
      for (std::size_t h = 0; h < heads_; ++h) {
        const auto hc = static_cast<Eigen::Index>(h * dh);
        const auto ci = static_cast<Eigen::Index>(c);
        auto q = qkv.block(r0, hc, tt, d);
        auto k = qkv.block(r0, ci + hc, tt, d);
        auto v = qkv.block(r0, 2 * ci + hc, tt, d);
        ConstMatMap prob(s.buffers[1].data().data() + (b * heads_ + h) * t * t, tt, tt);
        auto go = gattm.block(r0, hc, tt, d);
        dprob.noalias() = go * v.transpose();
        gq.block(r0, 2 * ci + hc, tt, d).noalias() = prob.transpose() * go;
        for (Eigen::Index i = 0; i < tt; ++i) {
          const double dot = prob.row(i).dot(dprob.row(i));
          dscore.row(i) = prob.row(i).array() * (dprob.row(i).array() - dot);
        }
        dscore *= inv;
        gq.block(r0, hc, tt, d).noalias() = dscore * k;
        gq.block(r0, ci + hc, tt, d).noalias() = dscore.transpose() * q;
      }
    }
    std::optional<MatMap> gx;
    if (gin) {
      *gin = make_like(n, input_shape());
      gx.emplace(gin->as_matrix(c));
    }
    detail::linear_backward(in.as_matrix(c), gqkv.as_matrix(3 * c), wqkv, scale_, gsp[0], gsp[1],
                            gin ? &*gx : nullptr);
  }

 private:
  std::array<std::span<const double>, 4> split(std::span<const double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, 3 * c * c), p.subspan(3 * c * c, 3 * c),
            p.subspan(3 * c * c + 3 * c, c * c), p.subspan(3 * c * c + 3 * c + c * c, c)};
  }
  std::array<std::span<double>, 4> split_mut(std::span<double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, 3 * c * c), p.subspan(3 * c * c, 3 * c),
            p.subspan(3 * c * c + 3 * c, c * c), p.subspan(3 * c * c + 3 * c + c * c, c)};
  }

  std::size_t heads_;
  double scale_;
};

/// Transformer feed-forward: Linear(C -> e*C), GELU, Linear(e*C -> C).
class FeedForward final : public Layer {
 public:
  FeedForward(std::string name, FeatureShape in, std::size_t expansion,
              Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), hidden_(expansion * in.c),
        scale_in_(detail::weight_scale(p, in.c)), scale_out_(detail::weight_scale(p, hidden_)) {
    if (expansion == 0) throw ShapeError("feed-forward expansion must be positive");
  }

  std::size_t hidden() const { return hidden_; }
  std::string kind() const override { return "ffn"; }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t c = input_shape().c;
    return {{"fc1.weight", {c, hidden_}, c, Init::Gaussian},
            {"fc1.bias", {hidden_}, 1, Init::Zeros},
            {"fc2.weight", {hidden_, c}, hidden_, Init::Gaussian},
            {"fc2.bias", {c}, 1, Init::Zeros}};
  }
  std::size_t weighted_depth() const override { return 2; }
  std::uint64_t macs() const override { return 2 * input_shape().tokens() * input_shape().c * hidden_; }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    const std::size_t c = input_shape().c, rows = in.size() / c;
    const auto [w1, b1, w2, b2] = split(p);
    s.buffers.assign(3, Tensor());
    s.buffers[0] = Tensor({rows, hidden_});  // pre-activation
    s.buffers[1] = Tensor({rows, hidden_});  // post-activation
    s.buffers[2] = Tensor({rows, hidden_});  // gelu gate
    detail::linear_forward(in.as_matrix(c), w1, b1, scale_in_, s.buffers[0].as_matrix(hidden_));
    detail::gelu_forward(s.buffers[0].data(), s.buffers[2].data(), s.buffers[1].data());
    out = Tensor(in.shape());
    detail::linear_forward(s.buffers[1].as_matrix(hidden_), w2, b2, scale_out_, out.as_matrix(c));
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    const std::size_t c = input_shape().c, rows = in.size() / c;
    const auto [w1, b1, w2, b2] = split(p);
    auto g = split_mut(gp);
    Tensor ghid({rows, hidden_});
    MatMap ghm = ghid.as_matrix(hidden_);
    detail::linear_backward(s.buffers[1].as_matrix(hidden_), gout.as_matrix(c), w2, scale_out_,
                            g[2], g[3], &ghm);
    detail::gelu_backward(s.buffers[0].data(), s.buffers[2].data(), ghid.data());
    std::optional<MatMap> gx;
    if (gin) {
      *gin = Tensor(in.shape());
      gx.emplace(gin->as_matrix(c));
    }
    detail::linear_backward(in.as_matrix(c), ghid.as_matrix(hidden_), w1, scale_in_, g[0], g[1],
                            gin ? &*gx : nullptr);
  }

 private:
  std::array<std::span<const double>, 4> split(std::span<const double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, c * hidden_), p.subspan(c * hidden_, hidden_),
            p.subspan(c * hidden_ + hidden_, hidden_ * c), p.subspan(2 * c * hidden_ + hidden_, c)};
  }
  std::array<std::span<double>, 4> split_mut(std::span<double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, c * hidden_), p.subspan(c * hidden_, hidden_),
            p.subspan(c * hidden_ + hidden_, hidden_ * c), p.subspan(2 * c * hidden_ + hidden_, c)};
  }

  std::size_t hidden_;
  double scale_in_;
  double scale_out_;
};

/// k x k depthwise convolution, stride 1, zero "same" padding (k odd).
class DepthwiseConv final : public Layer {
 public:
  DepthwiseConv(std::string name, FeatureShape in, std::size_t kernel,
                Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), k_(kernel), scale_(detail::weight_scale(p, kernel * kernel)) {
    if (k_ % 2 == 0) throw ShapeError("depthwise conv kernel must be odd");
  }

  std::size_t kernel() const { return k_; }
  std::string kind() const override { return "dwconv"; }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t c = input_shape().c;
    return {{"weight", {k_, k_, c}, k_ * k_, Init::Gaussian}, {"bias", {c}, 1, Init::Zeros}};
  }
  std::uint64_t macs() const override { return input_shape().numel() * k_ * k_; }

  // Each kernel tap touches a contiguous run of pixels in a row, so the
  // inner loops work on [pixels x C] blocks.
  using Block = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using CBlock =
      Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using CRow = Eigen::Map<const Eigen::Array<double, 1, Eigen::Dynamic>>;
  using Row = Eigen::Map<Eigen::Array<double, 1, Eigen::Dynamic>>;

  template <class Fn>
  void for_each_tap(std::size_t n, Fn&& fn) const {
    const auto [h, w, c] = input_shape();
    const long pad = static_cast<long>(k_ / 2);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t dy = 0; dy < k_; ++dy) {
          const long iy = static_cast<long>(y) + static_cast<long>(dy) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t dx = 0; dx < k_; ++dx) {
            const long shift = static_cast<long>(dx) - pad;
            const long x0 = std::max(0L, -shift);
            const long x1 = std::min(static_cast<long>(w), static_cast<long>(w) - shift);
            if (x1 <= x0) continue;
            const std::size_t o = ((b * h + y) * w + static_cast<std::size_t>(x0)) * c;
            const std::size_t i =
                ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(x0 + shift)) * c;
            fn(o, i, static_cast<std::size_t>(x1 - x0), (dy * k_ + dx) * c);
          }
        }
  }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out, Scratch&) const override {
    check_input(in);
    const std::size_t c = input_shape().c;
    const std::size_t n = batch_of(in);
    out = make_like(n, input_shape());
    Block all(out.data().data(), static_cast<long>(out.size() / c), static_cast<long>(c));
    all.rowwise() = CRow(p.data() + k_ * k_ * c, static_cast<long>(c));
    const Eigen::ArrayXd wts = scale_ * Eigen::Map<const Eigen::ArrayXd>(p.data(), k_ * k_ * c);
    for_each_tap(n, [&](std::size_t o, std::size_t i, std::size_t len, std::size_t woff) {
      Block(out.data().data() + o, len, c) +=
          CBlock(in.data().data() + i, len, c).rowwise() * CRow(wts.data() + woff, c);
    });
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch&, std::span<double> gp, Tensor* gin) const override {
    const std::size_t c = input_shape().c;
    const std::size_t n = batch_of(in);
    CBlock gall(gout.data().data(), static_cast<long>(gout.size() / c), static_cast<long>(c));
    Row(gp.data() + k_ * k_ * c, c) += gall.colwise().sum();
    if (gin) *gin = make_like(n, input_shape());
    const Eigen::ArrayXd wts = scale_ * Eigen::Map<const Eigen::ArrayXd>(p.data(), k_ * k_ * c);
    Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(k_ * k_ * c);
    for_each_tap(n, [&](std::size_t o, std::size_t i, std::size_t len, std::size_t woff) {
      CBlock g(gout.data().data() + o, len, c);
      Row(gw.data() + woff, c) += (g * CBlock(in.data().data() + i, len, c)).colwise().sum();
      if (gin) Block(gin->data().data() + i, len, c) += g.rowwise() * CRow(wts.data() + woff, c);
    });
    Eigen::Map<Eigen::ArrayXd>(gp.data(), k_ * k_ * c) += scale_ * gw;
  }

 private:
  std::size_t k_;
  double scale_;
};

/// Squeeze-excitation: global average pool, C -> C/r -> C bottleneck
/// (ReLU, sigmoid), channel-wise rescaling of the input.
class SqueezeExcitation final : public Layer {
 public:
  SqueezeExcitation(std::string name, FeatureShape in, std::size_t reduction = 4,
                    Parameterization p = Parameterization::Standard)
      : Layer(std::move(name), in), hidden_(std::max<std::size_t>(1, in.c / reduction)),
        scale1_(detail::weight_scale(p, in.c)), scale2_(detail::weight_scale(p, hidden_)) {}

  std::string kind() const override { return "se"; }
  std::vector<ParamSpec> param_specs() const override {
    const std::size_t c = input_shape().c;
    return {{"fc1.weight", {c, hidden_}, c, Init::Gaussian},
            {"fc1.bias", {hidden_}, 1, Init::Zeros},
            {"fc2.weight", {hidden_, c}, hidden_, Init::Gaussian},
            {"fc2.bias", {c}, 1, Init::Zeros}};
  }
  std::size_t weighted_depth() const override { return 2; }
  std::uint64_t macs() const override {
    const std::uint64_t c = input_shape().c;
    return 2 * c * hidden_ + input_shape().numel();
  }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    const auto [w1, b1, w2, b2] = split(p);
    s.buffers.assign(4, Tensor());
    s.buffers[0] = Tensor({n, c});        // pooled
    s.buffers[1] = Tensor({n, hidden_});  // pre-relu
    s.buffers[2] = Tensor({n, hidden_});  // post-relu
    s.buffers[3] = Tensor({n, c});        // gate
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t; ++i) acc += in[(b * t + i) * c + ch];
        s.buffers[0][b * c + ch] = acc / static_cast<double>(t);
      }
    detail::linear_forward(s.buffers[0].as_matrix(c), w1, b1, scale1_,
                           s.buffers[1].as_matrix(hidden_));
    for (std::size_t i = 0; i < s.buffers[1].size(); ++i)
      s.buffers[2][i] = std::max(0.0, s.buffers[1][i]);
    detail::linear_forward(s.buffers[2].as_matrix(hidden_), w2, b2, scale2_,
                           s.buffers[3].as_matrix(c));
    for (auto& v : s.buffers[3].values()) v = 1.0 / (1.0 + std::exp(-v));
    out = Tensor(in.shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[(b * t + i) * c + ch] = in[(b * t + i) * c + ch] * s.buffers[3][b * c + ch];
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    const auto [w1, b1, w2, b2] = split(p);
    auto g = split_mut(gp);
    Tensor ggate({n, c});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          ggate[b * c + ch] += gout[(b * t + i) * c + ch] * in[(b * t + i) * c + ch];
    for (std::size_t i = 0; i < ggate.size(); ++i) {
      const double sg = s.buffers[3][i];
      ggate[i] *= sg * (1.0 - sg);
    }
    Tensor ghid({n, hidden_});
    MatMap ghm = ghid.as_matrix(hidden_);
    detail::linear_backward(s.buffers[2].as_matrix(hidden_), ggate.as_matrix(c), w2, scale2_, g[2],
                            g[3], &ghm);
    for (std::size_t i = 0; i < ghid.size(); ++i)
      if (s.buffers[1][i] <= 0.0) ghid[i] = 0.0;
    Tensor gpool({n, c});
    MatMap gpm = gpool.as_matrix(c);
    detail::linear_backward(s.buffers[0].as_matrix(c), ghid.as_matrix(hidden_), w1, scale1_, g[0],
                            g[1], &gpm);
    if (!gin) return;
    *gin = Tensor(in.shape());
    const double invt = 1.0 / static_cast<double>(t);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t k = (b * t + i) * c + ch;
          (*gin)[k] = gout[k] * s.buffers[3][b * c + ch] + gpool[b * c + ch] * invt;
        }
  }

 private:
  std::array<std::span<const double>, 4> split(std::span<const double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, c * hidden_), p.subspan(c * hidden_, hidden_),
            p.subspan(c * hidden_ + hidden_, hidden_ * c), p.subspan(2 * c * hidden_ + hidden_, c)};
  }
  std::array<std::span<double>, 4> split_mut(std::span<double> p) const {
    const std::size_t c = input_shape().c;
    return {p.subspan(0, c * hidden_), p.subspan(c * hidden_, hidden_),
            p.subspan(c * hidden_ + hidden_, hidden_ * c), p.subspan(2 * c * hidden_ + hidden_, c)};
  }

  std::size_t hidden_;
  double scale1_;
  double scale2_;
};

/// Mean over spatial positions: [N,H,W,C] -> [N,1,1,C].
class GlobalAvgPool final : public Layer {
 public:
  using Layer::Layer;

  std::string kind() const override { return "avg_pool"; }
  FeatureShape output_shape() const override { return {1, 1, input_shape().c}; }
  std::uint64_t macs() const override { return 0; }

  void forward(const Tensor& in, std::span<const double>, Tensor& out, Scratch&) const override {
    check_input(in);
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    out = make_like(n, output_shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += in[(b * t + i) * c + ch];
    for (auto& v : out.values()) v /= static_cast<double>(t);
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double>,
                const Scratch&, std::span<double>, Tensor* gin) const override {
    if (!gin) return;
    const std::size_t c = input_shape().c, t = input_shape().tokens(), n = batch_of(in);
    *gin = Tensor(in.shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          (*gin)[(b * t + i) * c + ch] = gout[b * c + ch] / static_cast<double>(t);
  }
};

/// Runs a layer list in order. Shared by whole networks and residual bodies.
class LayerStack {
 public:
  LayerStack() = default;
  explicit LayerStack(std::vector<LayerPtr> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      if (!(layers_[i - 1]->output_shape() == layers_[i]->input_shape())) {
        throw ShapeError("layer '" + layers_[i - 1]->name() + "' produces " +
                         layers_[i - 1]->output_shape().str() + " but '" + layers_[i]->name() +
                         "' expects " + layers_[i]->input_shape().str());
      }
    }
    for (const auto& l : layers_) {
      offsets_.push_back(total_);
      total_ += l->param_count();
    }
  }

  const std::vector<LayerPtr>& layers() const { return layers_; }
  std::size_t param_count() const { return total_; }
  std::size_t offset(std::size_t i) const { return offsets_[i]; }
  std::size_t count(std::size_t i) const {
    return (i + 1 < offsets_.size() ? offsets_[i + 1] : total_) - offsets_[i];
  }

  /// Fills scratch.activations[i] with the output of layer i.
  void forward(const Tensor& in, std::span<const double> params, Scratch& scratch) const {
    scratch.children.assign(layers_.size(), Scratch());
    scratch.activations.assign(layers_.size(), Tensor());
    const Tensor* cur = &in;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = *layers_[i];
      l.forward(*cur, params.subspan(offsets_[i], count(i)), scratch.activations[i],
                scratch.children[i]);
      if (!scratch.activations[i].all_finite()) {
        throw NumericError("non-finite value in output of layer '" + l.name() + "' (" + l.kind() +
                           ")");
      }
      cur = &scratch.activations[i];
    }
  }

  void backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                const Scratch& scratch, std::span<double> grad_params, Tensor* grad_in) const {
    const Tensor* g = &grad_out;
    Tensor buf[2];
    Tensor* last = nullptr;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto& l = *layers_[i];
      const Tensor& x = i == 0 ? in : scratch.activations[i - 1];
      auto gp = grad_params.subspan(offsets_[i], count(i));
      Tensor& gx = buf[i % 2];
      const bool need_input = i > 0 || grad_in != nullptr;
      l.backward(x, scratch.activations[i], *g, params.subspan(offsets_[i], count(i)),
                 scratch.children[i], gp, need_input ? &gx : nullptr);
      if (!Eigen::Map<const Eigen::ArrayXd>(gp.data(), static_cast<Eigen::Index>(gp.size()))
               .allFinite())
        throw NumericError("non-finite gradient in layer '" + l.name() + "' (" + l.kind() + ")");
      if (need_input) g = last = &gx;
    }
    if (grad_in) *grad_in = last ? std::move(*last) : grad_out;
  }

 private:
  std::vector<LayerPtr> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

/// x + body(x). The body must preserve the feature shape.
class Residual final : public Layer {
 public:
  Residual(std::string name, std::vector<LayerPtr> body)
      : Layer(std::move(name), body.empty() ? FeatureShape{} : body.front()->input_shape()),
        body_(std::move(body)) {
    if (body_.layers().empty()) throw ShapeError("residual '" + this->name() + "' has empty body");
    if (!(body_.layers().back()->output_shape() == input_shape())) {
      throw ShapeError("residual '" + this->name() + "' body changes shape " +
                       input_shape().str() + " -> " + body_.layers().back()->output_shape().str());
    }
  }

  const LayerStack& body() const { return body_; }
  std::string kind() const override { return "residual"; }
  std::vector<ParamSpec> param_specs() const override {
    std::vector<ParamSpec> out;
    for (const auto& l : body_.layers())
      for (auto s : l->param_specs()) {
        s.name = l->name() + "." + s.name;
        out.push_back(std::move(s));
      }
    return out;
  }
  std::size_t weighted_depth() const override {
    std::size_t d = 0;
    for (const auto& l : body_.layers()) d += l->weighted_depth();
    return d;
  }
  std::uint64_t macs() const override {
    std::uint64_t m = 0;
    for (const auto& l : body_.layers()) m += l->macs();
    return m;
  }

  void forward(const Tensor& in, std::span<const double> p, Tensor& out,
               Scratch& s) const override {
    check_input(in);
    body_.forward(in, p, s);
    out = s.activations.back();
    add_into(out, in);
  }

  void backward(const Tensor& in, const Tensor&, const Tensor& gout, std::span<const double> p,
                const Scratch& s, std::span<double> gp, Tensor* gin) const override {
    Tensor gbody;
    body_.backward(in, gout, p, s, gp, gin ? &gbody : nullptr);
    if (gin) {
      *gin = std::move(gbody);
      add_into(*gin, gout);
    }
  }

 private:
  static void add_into(Tensor& a, const Tensor& b) {
    const auto n = static_cast<Eigen::Index>(a.size());
    Eigen::Map<Eigen::ArrayXd>(a.data().data(), n) += Eigen::Map<const Eigen::ArrayXd>(b.data().data(), n);
  }

  LayerStack body_;
};

}  // namespace vintk
