#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "sft/error.hpp"

namespace sft {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat32 = Eigen::Matrix<double, 3, 2>;

/// Points closer to the image plane than this are rejected by `project`.
inline constexpr double kMinDepth = 1e-6;

/// Pinhole intrinsics. Camera frame is right-handed with z pointing forward;
/// the pixel origin is the top-left corner.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double skew = 0.0;

  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double cx_, double cy_, double skew_ = 0.0)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), skew(skew_) {
    validate();
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy) || !std::isfinite(cx) ||
        !std::isfinite(cy) || !std::isfinite(skew)) {
      throw Error(ErrorKind::InvalidArgument, "camera focal lengths must be positive and finite");
    }
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

/// Projects a camera-frame point to pixels. The depth is discarded.
inline Vec2 project(const CameraIntrinsics& cam, const Vec3& s) {
  if (!(s.z() > kMinDepth)) {
    throw Error(ErrorKind::NonPositiveDepth, "point at or behind the camera (z=" + std::to_string(s.z()) + ")");
  }
  const double inv_z = 1.0 / s.z();
  return {(cam.fx * s.x() + cam.skew * s.y()) * inv_z + cam.cx, cam.fy * s.y() * inv_z + cam.cy};
}

/// 2x3 derivative of `project` with respect to the 3D point.
inline Eigen::Matrix<double, 2, 3> project_jacobian(const CameraIntrinsics& cam, const Vec3& s) {
  if (!(s.z() > kMinDepth)) {
    throw Error(ErrorKind::NonPositiveDepth, "point at or behind the camera (z=" + std::to_string(s.z()) + ")");
  }
  const double iz = 1.0 / s.z();
  const double iz2 = iz * iz;
  Eigen::Matrix<double, 2, 3> d;
  d << cam.fx * iz, cam.skew * iz, -(cam.fx * s.x() + cam.skew * s.y()) * iz2,  //
      0.0, cam.fy * iz, -cam.fy * s.y() * iz2;
  return d;
}

using Face = std::array<int, 3>;
using Edge = std::pair<int, int>;

/// Triangle mesh plus one parametrization point per vertex.
class TriMesh {
 public:
  TriMesh() = default;

  TriMesh(std::vector<Vec3> vertices, std::vector<Face> faces, std::vector<Vec2> param_coords)
      : vertices_(std::move(vertices)), faces_(std::move(faces)), param_coords_(std::move(param_coords)) {
    validate();
    build_edges();
  }

  const std::vector<Vec3>& vertices() const noexcept { return vertices_; }
  const std::vector<Face>& faces() const noexcept { return faces_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::vector<Vec2>& param_coords() const noexcept { return param_coords_; }
  std::size_t num_vertices() const noexcept { return vertices_.size(); }
  std::size_t num_faces() const noexcept { return faces_.size(); }
  bool empty() const noexcept { return vertices_.empty(); }

  /// Same connectivity and parametrization, new vertex positions.
  TriMesh with_vertices(std::vector<Vec3> vertices) const {
    if (vertices.size() != vertices_.size()) {
      throw Error(ErrorKind::LengthMismatch, "vertex count differs from mesh");
    }
    TriMesh out = *this;
    out.vertices_ = std::move(vertices);
    return out;
  }

  double bbox_diagonal() const {
    if (vertices_.empty()) return 0.0;
    Vec3 lo = vertices_.front();
    Vec3 hi = lo;
    for (const auto& v : vertices_) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    return (hi - lo).norm();
  }

 private:
  void validate() const {
    const auto n = static_cast<int>(vertices_.size());
    if (param_coords_.size() != vertices_.size()) {
      throw Error(ErrorKind::InvalidMesh, "param_coords must have one entry per vertex");
    }
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const Face& face = faces_[f];
      for (int idx : face) {
        if (idx < 0 || idx >= n) throw Error(ErrorKind::InvalidMesh, "face index out of range", f);
      }
      if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
        throw Error(ErrorKind::InvalidMesh, "face repeats a vertex", f);
      }
    }
    for (std::size_t i = 0; i < param_coords_.size(); ++i) {
      const Vec2& p = param_coords_[i];
      if (!(p.x() >= 0.0 && p.x() <= 1.0 && p.y() >= 0.0 && p.y() <= 1.0)) {
        throw Error(ErrorKind::InvalidMesh, "param_coords outside the unit square", i);
      }
      if (!vertices_[i].allFinite()) throw Error(ErrorKind::InvalidMesh, "non-finite vertex", i);
    }
    std::vector<std::pair<double, double>> sorted;
    sorted.reserve(param_coords_.size());
    for (const auto& p : param_coords_) sorted.emplace_back(p.x(), p.y());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(ErrorKind::InvalidMesh, "param_coords are not pairwise distinct");
    }
  }

  void build_edges() {
    edges_.clear();
    edges_.reserve(faces_.size() * 3);
    for (const Face& f : faces_) {
      for (int k = 0; k < 3; ++k) {
        int a = f[k];
        int b = f[(k + 1) % 3];
        if (a > b) std::swap(a, b);
        edges_.emplace_back(a, b);
      }
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  std::vector<Vec3> vertices_;
  std::vector<Face> faces_;
  std::vector<Vec2> param_coords_;
  std::vector<Edge> edges_;
};

/// One 2D-3D correspondence, carried both as a barycentric point on a facet
/// and as the matching point of the parametrization domain.
struct Match {
  int facet = 0;
  Vec3 bary = Vec3::Zero();
  Vec2 param_point = Vec2::Zero();
  Vec2 pixel = Vec2::Zero();
};

using MatchSet = std::vector<Match>;

inline constexpr double kBaryTolerance = 1e-6;

inline void check_facet(const TriMesh& mesh, int facet) {
  if (facet < 0 || static_cast<std::size_t>(facet) >= mesh.num_faces()) {
    throw Error(ErrorKind::BadFacet, "facet " + std::to_string(facet) + " out of range",
                static_cast<std::size_t>(std::max(facet, 0)));
  }
}

inline void check_weights(const Vec3& bary) {
  if (!bary.allFinite() || std::abs(bary.sum() - 1.0) > kBaryTolerance) {
    throw Error(ErrorKind::BadWeights, "barycentric weights must sum to 1");
  }
}

inline Vec3 barycentric_embed(const TriMesh& mesh, int facet, const Vec3& bary) {
  check_facet(mesh, facet);
  check_weights(bary);
  const Face& f = mesh.faces()[static_cast<std::size_t>(facet)];
  const auto& v = mesh.vertices();
  return bary[0] * v[f[0]] + bary[1] * v[f[1]] + bary[2] * v[f[2]];
}

/// First fundamental form J^T J of a 3x2 Jacobian.
inline Mat2 metric_tensor(const Mat32& jac) { return jac.transpose() * jac; }

inline bool in_unit_square(const Vec2& p, double tol = 1e-9) {
  return p.x() >= -tol && p.x() <= 1.0 + tol && p.y() >= -tol && p.y() <= 1.0 + tol;
}

}  // namespace sft
