#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sft/classical.hpp"
#include "sft/error.hpp"
#include "sft/geom.hpp"
#include "sft/io.hpp"
#include "sft/solver.hpp"

namespace sft {

struct EvalReport {
  std::vector<double> per_frame_error;  ///< mean vertex distance per frame
  double sequence_mean = 0.0;
  double sequence_std = 0.0;
  std::map<std::string, double> seconds_per_frame;  ///< by method
};

/// Mean over frames of the mean vertex distance.
inline EvalReport evaluate(const std::vector<std::vector<Vec3>>& estimates,
                           const std::vector<std::vector<Vec3>>& ground_truth) {
  if (estimates.size() != ground_truth.size()) {
    throw Error(ErrorKind::ShapeMismatch, "estimate and ground-truth frame counts differ");
  }
  if (estimates.empty()) throw Error(ErrorKind::ShapeMismatch, "no frames to evaluate");
  EvalReport r;
  for (std::size_t t = 0; t < estimates.size(); ++t) {
    const auto& est = estimates[t];
    const auto& gt = ground_truth[t];
    if (est.size() != gt.size() || est.empty()) {
      throw Error(ErrorKind::ShapeMismatch, "vertex counts differ in frame " + std::to_string(t), t);
    }
    double sum = 0.0;
    for (std::size_t n = 0; n < est.size(); ++n) sum += (est[n] - gt[n]).norm();
    r.per_frame_error.push_back(sum / static_cast<double>(est.size()));
  }
  double sum = 0.0;
  for (double e : r.per_frame_error) sum += e;
  const double T = static_cast<double>(r.per_frame_error.size());
  r.sequence_mean = sum / T;
  double var = 0.0;
  for (double e : r.per_frame_error) var += (e - r.sequence_mean) * (e - r.sequence_mean);
  r.sequence_std = std::sqrt(var / T);
  return r;
}

inline EvalReport evaluate(const std::vector<FrameSolution>& sols, const std::vector<std::vector<Vec3>>& ground_truth) {
  std::vector<std::vector<Vec3>> est;
  std::map<std::string, std::pair<double, int>> timing;
  for (const auto& s : sols) {
    est.push_back(s.vertex_estimates);
    auto& [total, count] = timing[s.method];
    total += s.wall_time;
    ++count;
  }
  EvalReport r = evaluate(est, ground_truth);
  for (const auto& [method, tc] : timing) r.seconds_per_frame[method] = tc.first / tc.second;
  return r;
}

inline io::json report_to_json(const EvalReport& r) {
  return {{"per_frame_error", r.per_frame_error},
          {"sequence_mean", r.sequence_mean},
          {"sequence_std", r.sequence_std},
          {"seconds_per_frame", r.seconds_per_frame}};
}

/// Per-frame CSV: frame, error and the loss breakdown of each solution.
inline std::string report_csv(const EvalReport& r, const std::vector<FrameSolution>& sols) {
  std::string out = "frame,error_mm,projection,metric,time,total,iterations,failed\n";
  for (std::size_t t = 0; t < r.per_frame_error.size(); ++t) {
    const FrameSolution& s = sols[t];
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n", t, r.per_frame_error[t],
                  s.losses.projection, s.losses.metric, s.losses.time, s.losses.total, s.iterations,
                  s.failed ? 1 : 0);
    out += buf;
  }
  return out;
}

/// Mean relative edge-length change of every frame estimate, averaged.
inline double sequence_edge_deviation(const TriMesh& templ, const std::vector<FrameSolution>& sols) {
  if (sols.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : sols) {
    double frame = 0.0;
    for (const auto& [a, b] : templ.edges()) {
      const double l0 = (templ.vertices()[a] - templ.vertices()[b]).norm();
      frame += std::abs((s.vertex_estimates[a] - s.vertex_estimates[b]).norm() / l0 - 1.0);
    }
    sum += frame / static_cast<double>(templ.edges().size());
  }
  return sum / static_cast<double>(sols.size());
}

struct SweepRow {
  double lambda_metric = 0.0;
  double lambda_time = 0.0;
  double error = 0.0;
};

/// Neural reconstruction and evaluation for every weight pair, sorted by
/// error (ties keep grid order). The template is fitted once.
inline std::vector<SweepRow> sweep_lambdas(const io::Bundle& bundle, const std::vector<LossWeights>& grid,
                                           const SolverConfig& cfg, const TemplateFit* fit = nullptr) {
  if (grid.empty()) throw Error(ErrorKind::InvalidArgument, "empty lambda grid");
  if (bundle.frames.empty()) throw Error(ErrorKind::ShapeMismatch, "bundle has no ground truth");
  const TemplateFit local = fit ? TemplateFit{} : fit_template(bundle.templ, cfg);
  const TemplateFit& use = fit ? *fit : local;
  std::vector<SweepRow> rows;
  for (const LossWeights& w : grid) {
    const auto sols = reconstruct_sequence(use, bundle.camera, bundle.matches, w, cfg);
    rows.push_back({w.lambda_metric, w.lambda_time, evaluate(sols, bundle.frames).sequence_mean});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.error < b.error; });
  return rows;
}

/// Cartesian product of two candidate lists.
inline std::vector<LossWeights> lambda_grid(const std::vector<double>& metric, const std::vector<double>& time) {
  std::vector<LossWeights> out;
  for (double m : metric)
    for (double t : time) out.push_back({m, t});
  return out;
}

}  // namespace sft
