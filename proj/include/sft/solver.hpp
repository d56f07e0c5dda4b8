#pragma once

#include <Eigen/Dense>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sft/adam.hpp"
#include "sft/error.hpp"
#include "sft/geom.hpp"
#include "sft/surfnet.hpp"

namespace sft {

struct LossWeights {
  double lambda_metric = 0.01;
  double lambda_time = 0.001;

  void validate() const {
    if (!(lambda_metric >= 0.0) || !(lambda_time >= 0.0)) {
      throw Error(ErrorKind::InvalidArgument, "loss weights must be non-negative");
    }
  }
};

/// Run configuration shared by the neural and classical reconstructions.
struct SolverConfig {
  LossWeights weights{};
  AdamConfig adam{.lr = 3e-5};  ///< per-frame optimizer
  int max_frame_iters = 2000;
  double frame_lr_decay = 1.0;  ///< learning-rate factor reached after max_frame_iters
  int early_stop_window = 50;
  double early_stop_tol = 1e-6;  ///< relative improvement of the best total over the window
  int max_template_iters = 20000;
  double template_tol = 1e-3;  ///< fraction of the template bounding-box diagonal
  double template_lr = 1e-3;
  double template_lr_decay = 1e-2;  ///< learning-rate factor reached after max_template_iters
  std::uint64_t seed = 0;
  std::vector<int> layer_dims{2, 128, 256, 128, 3};
  double first_layer_gain = 10.0;  ///< multiplier on the Glorot bound of the input layer
  double first_layer_bias = 3.0;  ///< input-layer biases drawn uniformly in +-this
  int metric_random_samples = 0;  ///< extra interior samples per iteration for the metric loss

  // classical baseline
  double c_tol = 1e-6;  ///< fraction of the mean squared template edge length
  int max_outer = 20;
  int max_inner = 100;
  double damping = 1e-10;
};

struct LossBreakdown {
  double projection = 0.0;
  double metric = 0.0;
  double time = 0.0;
  double total = 0.0;
};

inline double combine(const LossWeights& w, double projection, double metric, double time) {
  return projection + w.lambda_metric * metric + w.lambda_time * time;
}

struct TemplateFit {
  SurfNet net;
  std::vector<Vec2> param_coords;
  std::vector<Mat2> template_metrics;  ///< J^T J of `net` at each param_coords entry
  double fit_error = 0.0;              ///< mean vertex distance
  int iterations = 0;
};

struct FrameSolution {
  std::size_t frame = 0;
  std::string method = "neural";
  std::optional<SurfNet> theta;
  std::vector<Vec3> vertex_estimates;
  LossBreakdown losses{};
  int iterations = 0;
  double wall_time = 0.0;
  bool failed = false;
  std::string error;
  std::map<std::string, double> diagnostics;
};

namespace detail {

struct MatchBatch {
  Eigen::Matrix2Xd points;
  Eigen::Matrix2Xd pixels;
};

inline MatchBatch split_matches(const MatchSet& matches) {
  MatchBatch b;
  b.points.resize(2, static_cast<Eigen::Index>(matches.size()));
  b.pixels.resize(2, static_cast<Eigen::Index>(matches.size()));
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    if (!in_unit_square(matches[i].param_point)) {
      throw Error(ErrorKind::OutOfDomain, "match param_point outside [0,1]^2", i);
    }
    b.points.col(c) = matches[i].param_point;
    b.pixels.col(c) = matches[i].pixel;
  }
  return b;
}

/// Mean reprojection distance over a batch; adds `scale` times its gradient
/// when `grad` is non-null.
inline double projection_term(const SurfNet& net, const CameraIntrinsics& cam, const MatchBatch& batch,
                              Eigen::VectorXd* grad, double scale = 1.0) {
  const Eigen::Index m = batch.points.cols();
  if (m == 0) throw Error(ErrorKind::EmptyMatches, "projection loss needs at least one match");
  auto loss_fn = [&](const BatchOutputs& out, BatchAdjoints& adj) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec3 s = out.value.col(i);
      if (!(s.z() > kMinDepth)) {
        throw Error(ErrorKind::NonPositiveDepth, "surface point behind the camera for match " + std::to_string(i),
                    static_cast<std::size_t>(i));
      }
      const Vec2 r = project(cam, s) - batch.pixels.col(i);
      const double nr = r.norm();
      sum += nr;
      if (nr > 0.0) {
        adj.value.col(i) = (scale / static_cast<double>(m)) * (project_jacobian(cam, s).transpose() * (r / nr));
      }
    }
    return sum / static_cast<double>(m);
  };
  if (grad != nullptr) return backprop_scalar(net, batch.points, false, loss_fn, *grad);
  const ForwardTape tape = net.forward(batch.points, false);
  BatchAdjoints scratch;
  scratch.value = Eigen::Matrix3Xd::Zero(3, m);
  return loss_fn(net.outputs(tape), scratch);
}

struct ControlTerms {
  double metric = 0.0;
  double time = 0.0;
};

/// Metric and temporal terms over control points. `targets` holds the
/// template metric per column; `prev_values` the previous surface at the same
/// points (may be null when `time_scale` is zero and no time value is needed).
inline ControlTerms control_terms(const SurfNet& net, const Eigen::Matrix2Xd& points, const std::vector<Mat2>& targets,
                                  const Eigen::Matrix3Xd* prev_values, Eigen::VectorXd* grad, double metric_scale,
                                  double time_scale, bool need_metric = true, Eigen::Index metric_count = 0) {
  const Eigen::Index n = points.cols();
  ControlTerms terms;
  if (n == 0) return terms;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_m = 1.0 / static_cast<double>(metric_count > 0 ? metric_count : n);
  auto loss_fn = [&](const BatchOutputs& out, BatchAdjoints& adj) {
    double metric_sum = 0.0;
    double time_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (need_metric) {
        Mat32 jac;
        jac.col(0) = out.jac_u.col(i);
        jac.col(1) = out.jac_v.col(i);
        const Mat2 diff = metric_tensor(jac) - targets[static_cast<std::size_t>(i)];
        metric_sum += diff.squaredNorm();
        if (grad != nullptr && metric_scale != 0.0) {
          // d ||J^T J - G||_F^2 / dJ = 2 J (D + D^T)
          const Mat32 dj = (2.0 * metric_scale * inv_m) * jac * (diff + diff.transpose());
          adj.jac_u.col(i) = dj.col(0);
          adj.jac_v.col(i) = dj.col(1);
        }
      }
      if (prev_values != nullptr) {
        const Vec3 d = out.value.col(i) - prev_values->col(i);
        const double nd = d.norm();
        time_sum += nd;
        if (grad != nullptr && time_scale != 0.0 && nd > 0.0) adj.value.col(i) = (time_scale * inv_n / nd) * d;
      }
    }
    terms.metric = metric_sum * inv_m;
    terms.time = time_sum * inv_n;
    return metric_scale * terms.metric + time_scale * terms.time;
  };
  if (grad != nullptr) {
    backprop_scalar(net, points, need_metric, loss_fn, *grad);
  } else {
    const ForwardTape tape = net.forward(points, need_metric);
    BatchAdjoints scratch;
    scratch.value = Eigen::Matrix3Xd::Zero(3, n);
    scratch.jac_u = Eigen::Matrix3Xd::Zero(3, n);
    scratch.jac_v = Eigen::Matrix3Xd::Zero(3, n);
    loss_fn(net.outputs(tape), scratch);
  }
  return terms;
}

inline std::vector<Mat2> metrics_at(const SurfNet& net, const Eigen::Matrix2Xd& points) {
  const ForwardTape tape = net.forward(points, true);
  const BatchOutputs out = net.outputs(tape);
  std::vector<Mat2> result(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    Mat32 jac;
    jac.col(0) = out.jac_u.col(i);
    jac.col(1) = out.jac_v.col(i);
    result[static_cast<std::size_t>(i)] = metric_tensor(jac);
  }
  return result;
}

inline std::vector<Vec3> to_points(const Eigen::Matrix3Xd& m) {
  std::vector<Vec3> pts(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.cols(); ++i) pts[static_cast<std::size_t>(i)] = m.col(i);
  return pts;
}

}  // namespace detail

/// Mean reprojection error (pixels) of the surface over a match set.
inline double loss_projection(const SurfNet& net, const CameraIntrinsics& cam, const MatchSet& matches) {
  if (matches.empty()) throw Error(ErrorKind::EmptyMatches, "projection loss needs at least one match");
  return detail::projection_term(net, cam, detail::split_matches(matches), nullptr);
}

/// Mean squared Frobenius distance between the surface metric and the cached
/// template metric over the template's control points.
inline double loss_metric(const SurfNet& net, const TemplateFit& fit) {
  return detail::control_terms(net, to_matrix(fit.param_coords), fit.template_metrics, nullptr, nullptr, 1.0, 0.0)
      .metric;
}

/// Mean displacement between two surfaces over the given control points.
inline double loss_time(const SurfNet& net, const SurfNet& prev_net, const std::vector<Vec2>& param_coords) {
  if (!net.same_architecture(prev_net)) {
    throw Error(ErrorKind::ArchitectureMismatch, "temporal loss needs nets of identical architecture");
  }
  if (param_coords.empty()) return 0.0;
  const Eigen::Matrix2Xd pts = to_matrix(param_coords);
  const Eigen::Matrix3Xd diff = net.eval_batch(pts) - prev_net.eval_batch(pts);
  return diff.colwise().norm().mean();
}

/// Over-fits a net to the template vertices at their parametrization points,
/// then caches the template metric tensors there.
inline TemplateFit fit_template(const TriMesh& mesh, const SolverConfig& cfg,
                                const std::function<void(int, double)>& progress = {}) {
  if (mesh.empty()) throw Error(ErrorKind::InvalidMesh, "template mesh has no vertices");
  const Eigen::Matrix2Xd pts = to_matrix(mesh.param_coords());
  Eigen::Matrix3Xd targets(3, pts.cols());
  for (std::size_t i = 0; i < mesh.num_vertices(); ++i) targets.col(static_cast<Eigen::Index>(i)) = mesh.vertices()[i];

  SurfNet net = SurfNet::random(cfg.layer_dims, cfg.seed, cfg.first_layer_gain, cfg.first_layer_bias);
  // readout starts at zero so the initial surface is the template centroid
  net.set_output_transform(mesh.bbox_diagonal() > 0.0 ? mesh.bbox_diagonal() : 1.0, targets.rowwise().mean());
  net.weight(net.num_layers() - 1).setZero();

  const double tol = cfg.template_tol * mesh.bbox_diagonal();
  const double inv_n = 1.0 / static_cast<double>(pts.cols());
  AdamState state = AdamState::zeros(static_cast<Eigen::Index>(net.num_params()));
  Eigen::VectorXd grad(static_cast<Eigen::Index>(net.num_params()));
  Eigen::VectorXd best_params = net.params();
  double best = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < cfg.max_template_iters; ++it) {
    grad.setZero();
    const double err = backprop_scalar(
        net, pts, false,
        [&](const BatchOutputs& out, BatchAdjoints& adj) {
          double sum = 0.0;
          for (Eigen::Index i = 0; i < pts.cols(); ++i) {
            const Vec3 d = out.value.col(i) - targets.col(i);
            const double nd = d.norm();
            sum += nd;
            if (nd > 0.0) adj.value.col(i) = (inv_n / nd) * d;
          }
          return sum * inv_n;
        },
        grad);
    if (err < best) {
      best = err;
      best_params = net.params();
    }
    if (progress && it % 1000 == 0) progress(it, err);
    if (err < tol) break;
    AdamConfig step_cfg = cfg.adam;
    step_cfg.lr = cfg.template_lr * std::pow(cfg.template_lr_decay, static_cast<double>(it) / cfg.max_template_iters);
    adam_step(net.params(), grad, state, step_cfg);
  }
  if (!(best < tol)) {
    throw Error(ErrorKind::DidNotConverge, "template fit error " + std::to_string(best) + " above tolerance " +
                                               std::to_string(tol) + " after " + std::to_string(it) + " iterations");
  }
  net.params() = best_params;

  TemplateFit fit;
  fit.param_coords = mesh.param_coords();
  fit.template_metrics = detail::metrics_at(net, pts);
  fit.fit_error = best;
  fit.iterations = it;
  fit.net = std::move(net);
  return fit;
}

struct FrameOptimum {
  SurfNet net;
  LossBreakdown losses;
  int iterations = 0;
};

namespace detail {

class FrameObjective {
 public:
  FrameObjective(const TemplateFit& fit, const CameraIntrinsics& cam, const MatchSet& matches, const SurfNet& prev,
                 const LossWeights& weights, const SolverConfig& cfg, std::uint64_t frame_seed)
      : fit_(fit), cam_(cam), weights_(weights), cfg_(cfg), rng_(frame_seed) {
    batch_ = split_matches(matches);
    control_ = to_matrix(fit.param_coords);
    prev_values_ = prev.eval_batch(control_);
  }

  /// With `need_metric` false the metric term is neither evaluated nor
  /// differentiated (only valid when lambda_metric is zero).
  LossBreakdown evaluate(const SurfNet& net, Eigen::VectorXd* grad, bool need_metric = true) {
    LossBreakdown l;
    l.projection = projection_term(net, cam_, batch_, grad, 1.0);
    const auto k = static_cast<Eigen::Index>(need_metric ? cfg_.metric_random_samples : 0);
    const Eigen::Index metric_count = control_.cols() + k;
    const ControlTerms ct = control_terms(net, control_, fit_.template_metrics, &prev_values_, grad,
                                          weights_.lambda_metric, weights_.lambda_time, need_metric, metric_count);
    l.metric = ct.metric;
    l.time = ct.time;
    if (k > 0) {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      Eigen::Matrix2Xd pts(2, k);
      for (Eigen::Index i = 0; i < k; ++i) {
        const double u = unit(rng_);
        pts.col(i) = Vec2(u, unit(rng_));
      }
      const std::vector<Mat2> targets = metrics_at(fit_.net, pts);
      l.metric += control_terms(net, pts, targets, nullptr, grad, weights_.lambda_metric, 0.0, true, metric_count)
                      .metric;
    }
    l.total = combine(weights_, l.projection, l.metric, l.time);
    return l;
  }

 private:
  const TemplateFit& fit_;
  CameraIntrinsics cam_;
  LossWeights weights_;
  const SolverConfig& cfg_;
  MatchBatch batch_;
  Eigen::Matrix2Xd control_;
  Eigen::Matrix3Xd prev_values_;
  std::mt19937_64 rng_;
};

}  // namespace detail

/// Minimizes projection + lambda_metric * metric + lambda_time * time for one
/// frame, starting from `init` and keeping the best iterate. `state` carries
/// the Adam moments across frames.
inline FrameOptimum optimize_frame(const TemplateFit& fit, const CameraIntrinsics& cam, const MatchSet& matches,
                                   const SurfNet& init, const LossWeights& weights, const SolverConfig& cfg,
                                   AdamState& state, std::uint64_t frame_seed = 0,
                                   const std::function<void(int, const LossBreakdown&)>& on_iter = {}) {
  weights.validate();
  if (matches.empty()) throw Error(ErrorKind::EmptyMatches, "frame has no matches");
  detail::FrameObjective objective(fit, cam, matches, init, weights, cfg, frame_seed);

  SurfNet net = init;
  if (state.m.size() != static_cast<Eigen::Index>(net.num_params())) {
    state = AdamState::zeros(static_cast<Eigen::Index>(net.num_params()));
  }
  Eigen::VectorXd grad(static_cast<Eigen::Index>(net.num_params()));
  FrameOptimum best{net, {}, 0};
  best.losses.total = std::numeric_limits<double>::infinity();
  double window_start_best = best.losses.total;
  const bool need_metric = weights.lambda_metric != 0.0;
  int it = 0;
  while (it < cfg.max_frame_iters) {
    grad.setZero();
    const LossBreakdown l = objective.evaluate(net, &grad, need_metric);
    ++it;
    if (on_iter) on_iter(it, l);
    if (l.total < best.losses.total) {
      best.losses = l;
      best.net.params() = net.params();
    }
    if (cfg.early_stop_window > 0 && it % cfg.early_stop_window == 0) {
      const double improvement = window_start_best - best.losses.total;
      if (std::isfinite(window_start_best) && improvement < cfg.early_stop_tol * std::abs(window_start_best)) break;
      window_start_best = best.losses.total;
    }
    AdamConfig step_cfg = cfg.adam;
    step_cfg.lr *= std::pow(cfg.frame_lr_decay, static_cast<double>(it) / cfg.max_frame_iters);
    adam_step(net.params(), grad, state, step_cfg);
  }
  best.iterations = it;
  if (!need_metric) best.losses.metric = loss_metric(best.net, fit);
  return best;
}

/// Per-frame seed derived from the run seed; frames are independent streams.
inline std::uint64_t frame_seed(std::uint64_t seed, std::size_t frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(frame), 0x5f7u};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Tracks a sequence frame by frame, warm-starting every frame from the
/// previous solution (the template fit for the first frame). A frame that
/// fails carries the previous parameters forward and is marked failed.
inline std::vector<FrameSolution> reconstruct_sequence(
    const TemplateFit& fit, const CameraIntrinsics& cam, const std::vector<MatchSet>& frames,
    const LossWeights& weights, const SolverConfig& cfg,
    const std::function<void(const FrameSolution&)>& on_frame = {}) {
  weights.validate();
  if (frames.empty()) throw Error(ErrorKind::InvalidArgument, "sequence has no frames");
  const Eigen::Matrix2Xd control = to_matrix(fit.param_coords);
  std::vector<FrameSolution> out;
  out.reserve(frames.size());
  SurfNet prev = fit.net;
  AdamState state = AdamState::zeros(static_cast<Eigen::Index>(prev.num_params()));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    FrameSolution sol;
    sol.frame = t;
    sol.method = "neural";
    try {
      FrameOptimum opt = optimize_frame(fit, cam, frames[t], prev, weights, cfg, state, frame_seed(cfg.seed, t));
      sol.losses = opt.losses;
      sol.iterations = opt.iterations;
      prev = std::move(opt.net);
    } catch (const Error& e) {
      sol.failed = true;
      sol.error = e.what();
      state = AdamState::zeros(static_cast<Eigen::Index>(prev.num_params()));
    }
    sol.vertex_estimates = detail::to_points(prev.eval_batch(control));
    sol.theta = prev;
    sol.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_frame) on_frame(sol);
    out.push_back(std::move(sol));
  }
  return out;
}

/// Candidate values for each loss weight in a grid search.
inline std::vector<double> default_lambda_grid() { return {0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0}; }

}  // namespace sft
