#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sft/error.hpp"
#include "sft/geom.hpp"
#include "sft/solver.hpp"

namespace sft {

using SparseMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Linear reprojection constraints M x = 0 over the stacked vertex vector
/// x = (v1.x, v1.y, v1.z, v2.x, ...).
struct ProjectionSystem {
  SparseMat M;
  std::vector<std::size_t> match_index;  ///< match behind each pair of rows
};

struct ConstraintState {
  Eigen::VectorXd residual;
  SparseMat jacobian;
  Eigen::VectorXd lagrange;
};

inline Eigen::VectorXd stack_vertices(const std::vector<Vec3>& v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(3 * v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) x.segment<3>(static_cast<Eigen::Index>(3 * i)) = v[i];
  return x;
}

inline std::vector<Vec3> unstack_vertices(const Eigen::VectorXd& x) {
  std::vector<Vec3> v(static_cast<std::size_t>(x.size() / 3));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.segment<3>(static_cast<Eigen::Index>(3 * i));
  return v;
}

inline ProjectionSystem build_projection_matrix(const CameraIntrinsics& cam, const TriMesh& mesh,
                                                const MatchSet& matches) {
  cam.validate();
  const Eigen::Index cols = static_cast<Eigen::Index>(3 * mesh.num_vertices());
  const Vec3 k1(cam.fx, cam.skew, cam.cx);
  const Vec3 k2(0.0, cam.fy, cam.cy);
  const Vec3 k3(0.0, 0.0, 1.0);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(matches.size() * 18);
  ProjectionSystem sys;
  sys.match_index.reserve(matches.size());
  for (std::size_t m = 0; m < matches.size(); ++m) {
    const Match& mt = matches[m];
    check_facet(mesh, mt.facet);
    check_weights(mt.bary);
    const Face& f = mesh.faces()[static_cast<std::size_t>(mt.facet)];
    const Vec3 ru = k1 - mt.pixel.x() * k3;
    const Vec3 rv = k2 - mt.pixel.y() * k3;
    const int row = static_cast<int>(2 * m);
    for (int c = 0; c < 3; ++c) {
      for (int d = 0; d < 3; ++d) {
        const int col = 3 * f[static_cast<std::size_t>(c)] + d;
        if (ru[d] != 0.0) trip.emplace_back(row, col, mt.bary[c] * ru[d]);
        if (rv[d] != 0.0) trip.emplace_back(row + 1, col, mt.bary[c] * rv[d]);
      }
    }
    sys.match_index.push_back(m);
  }
  sys.M.resize(static_cast<Eigen::Index>(2 * matches.size()), cols);
  sys.M.setFromTriplets(trip.begin(), trip.end());
  sys.M.makeCompressed();
  return sys;
}

namespace detail {

inline void check_length(const Eigen::VectorXd& x, const TriMesh& templ) {
  if (x.size() != static_cast<Eigen::Index>(3 * templ.num_vertices())) {
    throw Error(ErrorKind::LengthMismatch, "vertex vector length must be 3 * vertex count");
  }
}

inline std::vector<double> squared_rest_lengths(const TriMesh& templ) {
  std::vector<double> out;
  out.reserve(templ.edges().size());
  for (const auto& [i, j] : templ.edges()) {
    out.push_back((templ.vertices()[static_cast<std::size_t>(i)] - templ.vertices()[static_cast<std::size_t>(j)])
                      .squaredNorm());
  }
  return out;
}

}  // namespace detail

/// Per-edge squared length change relative to the template.
inline Eigen::VectorXd constraint_C(const Eigen::VectorXd& x, const TriMesh& templ) {
  detail::check_length(x, templ);
  const auto rest = detail::squared_rest_lengths(templ);
  Eigen::VectorXd c(static_cast<Eigen::Index>(rest.size()));
  for (std::size_t e = 0; e < rest.size(); ++e) {
    const auto [i, j] = templ.edges()[e];
    c[static_cast<Eigen::Index>(e)] = (x.segment<3>(3 * i) - x.segment<3>(3 * j)).squaredNorm() - rest[e];
  }
  return c;
}

/// Sparse derivative of `constraint_C`; a zero-length edge yields an
/// all-zero row (explicitly stored so every row keeps six entries).
inline SparseMat constraint_jacobian(const Eigen::VectorXd& x, const TriMesh& templ) {
  detail::check_length(x, templ);
  const auto& edges = templ.edges();
  SparseMat jac(static_cast<Eigen::Index>(edges.size()), x.size());
  jac.reserve(Eigen::VectorXi::Constant(jac.rows(), 6));
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [i, j] = edges[e];
    const Vec3 d = 2.0 * (x.segment<3>(3 * i) - x.segment<3>(3 * j));
    const auto row = static_cast<Eigen::Index>(e);
    for (int k = 0; k < 3; ++k) {
      jac.insert(row, 3 * i + k) = d[k];
      jac.insert(row, 3 * j + k) = -d[k];
    }
  }
  jac.makeCompressed();
  return jac;
}

/// Edges shorter than this are reported as degenerate.
inline std::vector<std::size_t> degenerate_edges(const Eigen::VectorXd& x, const TriMesh& templ, double tol = 1e-12) {
  detail::check_length(x, templ);
  std::vector<std::size_t> out;
  for (std::size_t e = 0; e < templ.edges().size(); ++e) {
    const auto [i, j] = templ.edges()[e];
    if ((x.segment<3>(3 * i) - x.segment<3>(3 * j)).norm() <= tol) out.push_back(e);
  }
  return out;
}

struct ClassicalResult {
  Eigen::VectorXd x;
  ConstraintState constraints;
  double projection_residual = 0.0;  ///< ||M x||
  double c_inf = 0.0;                ///< ||C(x)||_inf
  double c_tol = 0.0;                ///< absolute tolerance used
  int outer_iterations = 0;
  int inner_iterations = 0;          ///< total refinement steps
  double max_normal_residual = 0.0;  ///< worst relative normal-equation residual of the inner solves
  bool damped = false;               ///< a Tikhonov retry was needed
  bool converged = false;
};

namespace detail {

struct LinearSolveReport {
  Eigen::VectorXd z;
  double normal_residual = 0.0;
  int iterations = 0;
  bool damped = false;
};

/// Least-squares solution of K z = r through the normal equations
/// (K^T K + mu I) z = K^T r, refined until the undamped normal residual is
/// below `tol` relative to ||K^T r||. A zero `damping` is tried first.
inline LinearSolveReport solve_least_squares(const SparseMat& K, const Eigen::VectorXd& r, double damping,
                                             int max_inner, double tol = 1e-8) {
  const Eigen::SparseMatrix<double> Kc = K;
  Eigen::SparseMatrix<double> N = Kc.transpose() * Kc;
  const Eigen::VectorXd rhs = Kc.transpose() * r;
  const double rhs_norm = rhs.norm();
  LinearSolveReport rep;
  rep.z = Eigen::VectorXd::Zero(K.cols());
  if (rhs_norm == 0.0) return rep;

  double scale = 0.0;
  for (Eigen::Index k = 0; k < N.outerSize(); ++k) scale = std::max(scale, N.coeff(k, k));
  if (!(scale > 0.0)) scale = 1.0;

  auto attempt = [&](double mu) -> bool {
    Eigen::SparseMatrix<double> A = N;
    if (mu > 0.0) {
      for (Eigen::Index k = 0; k < A.rows(); ++k) A.coeffRef(k, k) += mu * scale;
    }
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(A);
    if (ldlt.info() != Eigen::Success) return false;
    const Eigen::VectorXd d = ldlt.vectorD();
    if (!d.allFinite() || (d.array().abs() <= 1e-14 * scale).any()) return false;
    Eigen::VectorXd z = Eigen::VectorXd::Zero(K.cols());
    Eigen::VectorXd res = rhs;
    int it = 0;
    double rel = 1.0;
    while (it < max_inner) {
      z += ldlt.solve(res);
      ++it;
      if (!z.allFinite()) return false;
      res = rhs - N * z;
      rel = res.norm() / rhs_norm;
      if (rel < tol) break;
    }
    rep.z = std::move(z);
    rep.normal_residual = rel;
    rep.iterations = it;
    return true;
  };

  if (attempt(0.0)) return rep;
  rep.damped = true;
  if (attempt(damping > 0.0 ? damping : 1e-10)) return rep;
  throw Error(ErrorKind::SingularSystem, "KKT normal equations could not be factorized");
}

}  // namespace detail

/// Iterated linearized KKT solve for one frame, starting from `prev_x`.
/// Each outer step solves
///   [M^T M  dC^T] [dx ]   [-M^T M x]
///   [dC     0   ] [lam] = [-C(x)   ]
/// in the least-squares sense and moves x by dx.
inline ClassicalResult solve_frame_classical(const Eigen::VectorXd& prev_x, const ProjectionSystem& system,
                                             const TriMesh& templ, const SolverConfig& cfg,
                                             const CameraIntrinsics* cam = nullptr) {
  detail::check_length(prev_x, templ);
  if (system.M.cols() != prev_x.size()) {
    throw Error(ErrorKind::ShapeMismatch, "projection matrix columns do not match the vertex vector");
  }
  const Eigen::Index n = prev_x.size();
  const auto rest = detail::squared_rest_lengths(templ);
  const Eigen::Index ne = static_cast<Eigen::Index>(rest.size());
  double mean_sq = 0.0;
  double mean_len = 0.0;
  for (double r2 : rest) {
    mean_sq += r2;
    mean_len += std::sqrt(r2);
  }
  if (ne > 0) {
    mean_sq /= static_cast<double>(ne);
    mean_len /= static_cast<double>(ne);
  }
  if (!(mean_len > 0.0)) mean_len = 1.0;

  // Equivalent rescaling: projection rows in normalized image units,
  // constraint rows per unit length.
  const double row_m = cam != nullptr ? 1.0 / cam->fx : 1.0;
  const double row_c = 1.0 / mean_len;
  const SparseMat Ms = system.M * row_m;
  const SparseMat MtM = SparseMat(Ms.transpose()) * Ms;

  ClassicalResult out;
  out.c_tol = cfg.c_tol * (mean_sq > 0.0 ? mean_sq : 1.0);
  out.x = prev_x;
  Eigen::VectorXd c = constraint_C(out.x, templ);
  const double c0 = ne > 0 ? c.cwiseAbs().maxCoeff() : 0.0;
  // A start that already satisfies the constraints (e.g. the flat template)
  // has no meaningful baseline; growth is then measured from the first step.
  double baseline = c0 >= out.c_tol ? c0 : -1.0;
  out.constraints.lagrange = Eigen::VectorXd::Zero(ne);

  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    const double cinf = ne > 0 ? c.cwiseAbs().maxCoeff() : 0.0;
    if (cinf < out.c_tol && outer > 0) break;
    const SparseMat B = constraint_jacobian(out.x, templ) * row_c;

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(MtM.nonZeros() + 2 * B.nonZeros()));
    for (Eigen::Index r = 0; r < MtM.outerSize(); ++r) {
      for (SparseMat::InnerIterator it(MtM, r); it; ++it) trip.emplace_back(r, it.col(), it.value());
    }
    for (Eigen::Index r = 0; r < B.outerSize(); ++r) {
      for (SparseMat::InnerIterator it(B, r); it; ++it) {
        trip.emplace_back(n + r, it.col(), it.value());
        trip.emplace_back(it.col(), n + r, it.value());
      }
    }
    SparseMat K(n + ne, n + ne);
    K.setFromTriplets(trip.begin(), trip.end());
    K.makeCompressed();
    Eigen::VectorXd rhs(n + ne);
    rhs.head(n) = -(MtM * out.x);
    rhs.tail(ne) = -row_c * c;

    const auto rep = detail::solve_least_squares(K, rhs, cfg.damping, cfg.max_inner);
    out.damped = out.damped || rep.damped;
    out.inner_iterations += rep.iterations;
    out.max_normal_residual = std::max(out.max_normal_residual, rep.normal_residual);
    out.x += rep.z.head(n);
    out.constraints.lagrange = rep.z.tail(ne) * (row_c / (row_m * row_m));
    out.outer_iterations = outer + 1;
    if (!out.x.allFinite()) throw Error(ErrorKind::Diverged, "non-finite vertex update");
    c = constraint_C(out.x, templ);
    const double cnew = ne > 0 ? c.cwiseAbs().maxCoeff() : 0.0;
    if (baseline < 0.0) {
      baseline = std::max(cnew, out.c_tol);
    } else if (cnew > 10.0 * baseline) {
      throw Error(ErrorKind::Diverged, "constraint residual grew from " + std::to_string(baseline) + " to " +
                                           std::to_string(cnew));
    }
  }
  out.c_inf = ne > 0 ? c.cwiseAbs().maxCoeff() : 0.0;
  out.converged = out.c_inf < out.c_tol;
  out.constraints.residual = c;
  out.constraints.jacobian = constraint_jacobian(out.x, templ);
  out.projection_residual = (system.M * out.x).norm();
  return out;
}

/// Mean pixel distance between projected match points and their pixels.
inline double mean_reprojection_error(const CameraIntrinsics& cam, const TriMesh& templ,
                                      const std::vector<Vec3>& vertices, const MatchSet& matches) {
  if (matches.empty()) return 0.0;
  const TriMesh mesh = templ.with_vertices(vertices);
  double sum = 0.0;
  for (const Match& m : matches) sum += (project(cam, barycentric_embed(mesh, m.facet, m.bary)) - m.pixel).norm();
  return sum / static_cast<double>(matches.size());
}

/// Frame-by-frame classical tracking from the template pose. A failed frame
/// keeps the previous vertices.
inline std::vector<FrameSolution> reconstruct_sequence_classical(
    const TriMesh& templ, const CameraIntrinsics& cam, const std::vector<MatchSet>& frames, const SolverConfig& cfg,
    const std::function<void(const FrameSolution&)>& on_frame = {}) {
  if (templ.empty()) throw Error(ErrorKind::InvalidMesh, "template has no vertices");
  if (frames.empty()) throw Error(ErrorKind::InvalidArgument, "sequence has no frames");
  std::vector<FrameSolution> out;
  out.reserve(frames.size());
  Eigen::VectorXd x = stack_vertices(templ.vertices());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    FrameSolution sol;
    sol.frame = t;
    sol.method = "classical";
    try {
      const ProjectionSystem sys = build_projection_matrix(cam, templ, frames[t]);
      ClassicalResult r = solve_frame_classical(x, sys, templ, cfg, &cam);
      x = r.x;
      sol.iterations = r.outer_iterations;
      sol.diagnostics["projection_residual"] = r.projection_residual;
      sol.diagnostics["c_inf"] = r.c_inf;
      sol.diagnostics["c_tol"] = r.c_tol;
      sol.diagnostics["inner_iterations"] = r.inner_iterations;
      sol.diagnostics["normal_residual"] = r.max_normal_residual;
      sol.diagnostics["damped"] = r.damped ? 1.0 : 0.0;
      sol.diagnostics["converged"] = r.converged ? 1.0 : 0.0;
    } catch (const Error& e) {
      sol.failed = true;
      sol.error = e.what();
    }
    sol.vertex_estimates = unstack_vertices(x);
    try {
      sol.losses.projection = mean_reprojection_error(cam, templ, sol.vertex_estimates, frames[t]);
    } catch (const Error&) {
      sol.losses.projection = std::numeric_limits<double>::infinity();
    }
    sol.losses.total = sol.losses.projection;
    sol.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_frame) on_frame(sol);
    out.push_back(std::move(sol));
  }
  return out;
}

}  // namespace sft
