#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sft/error.hpp"
#include "sft/geom.hpp"

namespace sft {

/// Softplus with beta = 1. Returns x directly above 30 where log1p(exp(x))
/// rounds to x anyway.
inline double softplus(double x) noexcept { return x > 30.0 ? x : std::log1p(std::exp(x)); }

/// d/dx softplus(x): the logistic sigmoid.
inline double softplus_d1(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_d2(double x) noexcept {
  const double s = softplus_d1(x);
  return s * (1.0 - s);
}

namespace detail {

/// Softplus and its derivative over a block, sharing one exp per entry.
template <typename In>
void softplus_block(const In& x, Eigen::Ref<Eigen::MatrixXd> value, Eigen::Ref<Eigen::MatrixXd> slope) {
  const auto xa = x.array();
  const Eigen::ArrayXXd e = (-xa.abs()).exp();  // in (0, 1]
  const Eigen::ArrayXXd inv = (1.0 + e).inverse();
  value.array() = (xa > 30.0).select(xa, xa.max(0.0) + e.log1p());
  slope.array() = (xa >= 0.0).select(inv, e * inv);
}

}  // namespace detail

/// Values and input-Jacobian columns for a batch of domain points, one
/// column per point.
struct BatchOutputs {
  Eigen::Matrix3Xd value;
  Eigen::Matrix3Xd jac_u;  ///< d phi / du
  Eigen::Matrix3Xd jac_v;  ///< d phi / dv
};

/// Adjoints of a scalar loss with respect to BatchOutputs. Jacobian adjoints
/// are ignored (and may stay empty) on value-only passes.
struct BatchAdjoints {
  Eigen::Matrix3Xd value;
  Eigen::Matrix3Xd jac_u;
  Eigen::Matrix3Xd jac_v;
};

struct EvalBundle {
  Vec3 value;
  Mat32 jacobian;
};

/// Recorded forward pass over a batch. Each layer input is stored as
/// [a | da/du | da/dv] side by side, so one matrix product per layer carries
/// the value and both tangent directions.
struct ForwardTape {
  Eigen::Index batch = 0;
  bool with_jacobian = false;
  std::vector<Eigen::MatrixXd> inputs;  ///< per affine layer, in x (N or 3N)
  std::vector<Eigen::MatrixXd> pre;     ///< per affine layer, out x (N or 3N)
  std::vector<Eigen::MatrixXd> slope;   ///< per hidden layer, softplus'(z) at the N value columns
};

/// Multilayer perceptron R^2 -> R^3 with Softplus hidden activations and a
/// linear output. Parameters live in one flat vector, layer by layer, each
/// layer as a column-major weight matrix followed by its bias.
class SurfNet {
 public:
  using Matrix = Eigen::MatrixXd;
  using Vector = Eigen::VectorXd;
  using WeightMap = Eigen::Map<Matrix>;
  using ConstWeightMap = Eigen::Map<const Matrix>;
  using BiasMap = Eigen::Map<Vector>;
  using ConstBiasMap = Eigen::Map<const Vector>;

  SurfNet() = default;

  static SurfNet zeros(std::vector<int> layer_dims) {
    SurfNet net;
    net.init_layout(std::move(layer_dims));
    net.params_.setZero(static_cast<Eigen::Index>(net.param_count_));
    return net;
  }

  /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  /// `first_gain` widens the input layer's bound and `first_bias` draws its
  /// biases in +-first_bias, spreading the first Softplus units over [0,1]^2.
  static SurfNet random(std::vector<int> layer_dims, std::uint64_t seed, double first_gain = 1.0,
                        double first_bias = 0.0) {
    SurfNet net = zeros(std::move(layer_dims));
    net.seed_ = seed;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const int fan_in = net.dims_[l];
      const int fan_out = net.dims_[l + 1];
      const double gain = l == 0 ? first_gain : 1.0;
      const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-bound, bound);
      auto w = net.weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    if (first_bias > 0.0) {
      std::uniform_real_distribution<double> dist(-first_bias, first_bias);
      auto b = net.bias(0);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = dist(rng);
    }
    return net;
  }

  /// Rebuilds a net from a flat parameter vector laid out as `params()`.
  static SurfNet from_params(std::vector<int> layer_dims, Vector params, std::uint64_t seed = 0) {
    SurfNet net;
    net.init_layout(std::move(layer_dims));
    if (static_cast<std::size_t>(params.size()) != net.param_count_) {
      throw Error(ErrorKind::ArchitectureMismatch, "parameter vector length does not match layer_dims");
    }
    net.params_ = std::move(params);
    net.seed_ = seed;
    return net;
  }

  const std::vector<int>& layer_dims() const noexcept { return dims_; }
  std::size_t num_layers() const noexcept { return dims_.empty() ? 0 : dims_.size() - 1; }
  std::size_t num_params() const noexcept { return param_count_; }
  std::uint64_t seed() const noexcept { return seed_; }

  const Vector& params() const noexcept { return params_; }
  Vector& params() noexcept { return params_; }

  WeightMap weight(std::size_t l) {
    return {params_.data() + w_offset_[l], dims_[l + 1], dims_[l]};
  }
  ConstWeightMap weight(std::size_t l) const {
    return {params_.data() + w_offset_[l], dims_[l + 1], dims_[l]};
  }
  BiasMap bias(std::size_t l) { return {params_.data() + b_offset_[l], dims_[l + 1]}; }
  ConstBiasMap bias(std::size_t l) const { return {params_.data() + b_offset_[l], dims_[l + 1]}; }

  std::size_t weight_offset(std::size_t l) const { return w_offset_[l]; }
  std::size_t bias_offset(std::size_t l) const { return b_offset_[l]; }

  /// Fixed readout normalization: phi(p) = offset + scale * mlp(p). Not
  /// trained; lets the weights stay O(1) when the surface lives in mm.
  double output_scale() const noexcept { return output_scale_; }
  const Vec3& output_offset() const noexcept { return output_offset_; }
  void set_output_transform(double scale, const Vec3& offset) {
    if (!(scale > 0.0) || !std::isfinite(scale) || !offset.allFinite()) {
      throw Error(ErrorKind::InvalidArgument, "output scale must be positive and finite");
    }
    output_scale_ = scale;
    output_offset_ = offset;
  }

  bool same_architecture(const SurfNet& other) const noexcept { return dims_ == other.dims_; }

  bool all_finite() const { return params_.allFinite(); }

  Vec3 eval(const Vec2& p) const {
    Eigen::Matrix2Xd pts(2, 1);
    pts.col(0) = p;
    return eval_batch(pts).col(0);
  }

  EvalBundle eval_with_jacobian(const Vec2& p) const {
    Eigen::Matrix2Xd pts(2, 1);
    pts.col(0) = p;
    const BatchOutputs out = outputs(forward(pts, true));
    EvalBundle bundle;
    bundle.value = out.value.col(0);
    bundle.jacobian.col(0) = out.jac_u.col(0);
    bundle.jacobian.col(1) = out.jac_v.col(0);
    return bundle;
  }

  Eigen::Matrix3Xd eval_batch(const Eigen::Matrix2Xd& points) const { return outputs(forward(points, false)).value; }

  ForwardTape forward(const Eigen::Matrix2Xd& points, bool with_jacobian) const {
    check_ready();
    const Eigen::Index n = points.cols();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!in_unit_square(points.col(i))) {
        throw Error(ErrorKind::OutOfDomain, "domain point outside [0,1]^2", static_cast<std::size_t>(i));
      }
    }
    const Eigen::Index width = with_jacobian ? 3 * n : n;
    ForwardTape tape;
    tape.batch = n;
    tape.with_jacobian = with_jacobian;
    tape.inputs.reserve(num_layers());
    tape.pre.reserve(num_layers());
    tape.slope.reserve(num_layers());

    Matrix input(2, width);
    input.leftCols(n) = points;
    if (with_jacobian) {
      input.middleCols(n, n).setZero();
      input.middleCols(n, n).row(0).setOnes();
      input.rightCols(n).setZero();
      input.rightCols(n).row(1).setOnes();
    }
    for (std::size_t l = 0; l < num_layers(); ++l) {
      Matrix z(dims_[l + 1], width);
      z.noalias() = weight(l) * input;
      z.leftCols(n).colwise() += bias(l);
      tape.inputs.push_back(std::move(input));
      if (l + 1 < num_layers()) {
        input.resize(z.rows(), width);
        Matrix d1(z.rows(), n);
        detail::softplus_block(z.leftCols(n), input.leftCols(n), d1);
        if (with_jacobian) {
          input.middleCols(n, n) = d1.cwiseProduct(z.middleCols(n, n));
          input.rightCols(n) = d1.cwiseProduct(z.rightCols(n));
        }
        tape.slope.push_back(std::move(d1));
      }
      tape.pre.push_back(std::move(z));
    }
    return tape;
  }

  BatchOutputs outputs(const ForwardTape& tape) const {
    const Matrix& top = tape.pre.back();
    const Eigen::Index n = tape.batch;
    BatchOutputs out;
    out.value = (output_scale_ * top.leftCols(n)).colwise() + output_offset_;
    if (tape.with_jacobian) {
      out.jac_u = output_scale_ * top.middleCols(n, n);
      out.jac_v = output_scale_ * top.rightCols(n);
    }
    return out;
  }

  /// Reverse sweep: adds d(loss)/d(params) into `grad` given the loss adjoints
  /// of the batch outputs. When the tape carries Jacobians, adjoints of the
  /// Jacobian columns are pushed through the tangent recurrences (second
  /// derivatives of Softplus enter here).
  void backward(const ForwardTape& tape, const BatchAdjoints& adj, Vector& grad) const {
    const Eigen::Index n = tape.batch;
    const Eigen::Index width = tape.with_jacobian ? 3 * n : n;
    if (grad.size() != params_.size()) grad.setZero(params_.size());

    Matrix zbar(3, width);
    zbar.leftCols(n) = output_scale_ * adj.value;
    if (tape.with_jacobian) {
      zbar.middleCols(n, n) = adj.jac_u.cols() == n ? Matrix(output_scale_ * adj.jac_u) : Matrix::Zero(3, n);
      zbar.rightCols(n) = adj.jac_v.cols() == n ? Matrix(output_scale_ * adj.jac_v) : Matrix::Zero(3, n);
    }

    for (std::size_t l = num_layers(); l-- > 0;) {
      const Matrix& input = tape.inputs[l];
      Eigen::Map<Matrix> gw(grad.data() + w_offset_[l], dims_[l + 1], dims_[l]);
      Eigen::Map<Vector> gb(grad.data() + b_offset_[l], dims_[l + 1]);
      gw.noalias() += zbar * input.transpose();
      gb += zbar.leftCols(n).rowwise().sum();
      if (l == 0) break;

      Matrix sbar(dims_[l], width);
      sbar.noalias() = weight(l).transpose() * zbar;

      const Matrix& z = tape.pre[l - 1];
      const Matrix& d1 = tape.slope[l - 1];
      Matrix next(dims_[l], width);
      next.leftCols(n) = d1.cwiseProduct(sbar.leftCols(n));
      if (tape.with_jacobian) {
        const Eigen::ArrayXXd d2 = d1.array() * (1.0 - d1.array());
        next.leftCols(n).array() += d2 * (z.middleCols(n, n).array() * sbar.middleCols(n, n).array() +
                                                  z.rightCols(n).array() * sbar.rightCols(n).array());
        next.middleCols(n, n) = d1.cwiseProduct(sbar.middleCols(n, n));
        next.rightCols(n) = d1.cwiseProduct(sbar.rightCols(n));
      }
      zbar = std::move(next);
    }
  }

 private:
  void init_layout(std::vector<int> dims) {
    if (dims.size() < 2 || dims.front() != 2 || dims.back() != 3) {
      throw Error(ErrorKind::ArchitectureMismatch, "layer_dims must start at 2 and end at 3");
    }
    for (int d : dims) {
      if (d <= 0) throw Error(ErrorKind::ArchitectureMismatch, "layer widths must be positive");
    }
    dims_ = std::move(dims);
    w_offset_.clear();
    b_offset_.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      w_offset_.push_back(off);
      off += static_cast<std::size_t>(dims_[l]) * static_cast<std::size_t>(dims_[l + 1]);
      b_offset_.push_back(off);
      off += static_cast<std::size_t>(dims_[l + 1]);
    }
    param_count_ = off;
  }

  void check_ready() const {
    if (dims_.empty()) throw Error(ErrorKind::ArchitectureMismatch, "net has no layers");
  }

  std::vector<int> dims_;
  std::vector<std::size_t> w_offset_;
  std::vector<std::size_t> b_offset_;
  std::size_t param_count_ = 0;
  Vector params_;
  std::uint64_t seed_ = 0;
  double output_scale_ = 1.0;
  Vec3 output_offset_ = Vec3::Zero();
};

inline Eigen::Matrix2Xd to_matrix(const std::vector<Vec2>& points) {
  Eigen::Matrix2Xd m(2, static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = points[i];
  return m;
}

/// Runs forward, lets `loss_fn(outputs, adjoints)` compute a scalar and fill
/// the output adjoints, then back-propagates into `grad` (accumulating).
/// Returns the loss value.
template <typename LossFn>
double backprop_scalar(const SurfNet& net, const Eigen::Matrix2Xd& points, bool with_jacobian, LossFn&& loss_fn,
                       Eigen::VectorXd& grad) {
  const ForwardTape tape = net.forward(points, with_jacobian);
  const BatchOutputs out = net.outputs(tape);
  BatchAdjoints adj;
  adj.value = Eigen::Matrix3Xd::Zero(3, tape.batch);
  if (with_jacobian) {
    adj.jac_u = Eigen::Matrix3Xd::Zero(3, tape.batch);
    adj.jac_v = Eigen::Matrix3Xd::Zero(3, tape.batch);
  }
  const double loss = loss_fn(out, adj);
  net.backward(tape, adj, grad);
  if (!grad.allFinite() || !std::isfinite(loss)) {
    throw Error(ErrorKind::NonFiniteGradient, "loss or parameter gradient is not finite");
  }
  return loss;
}

}  // namespace sft
