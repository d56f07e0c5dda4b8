#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sft/error.hpp"
#include "sft/geom.hpp"
#include "sft/solver.hpp"

namespace sft {

/// Flat W x H sheet on an nx x ny vertex grid in the z = 0 plane. Vertex
/// (i, j) sits at (W i/(nx-1), H j/(ny-1), 0) with index j*nx + i; every cell
/// is split into two triangles along the same diagonal.
inline TriMesh make_template(double width, double height, int nx, int ny) {
  if (nx < 2 || ny < 2) throw Error(ErrorKind::BadResolution, "grid needs at least 2x2 vertices");
  if (!(width > 0.0) || !(height > 0.0)) throw Error(ErrorKind::BadResolution, "sheet size must be positive");
  std::vector<Vec3> vertices;
  std::vector<Vec2> params;
  vertices.reserve(static_cast<std::size_t>(nx * ny));
  params.reserve(static_cast<std::size_t>(nx * ny));
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const double u = static_cast<double>(i) / (nx - 1);
      const double v = static_cast<double>(j) / (ny - 1);
      params.emplace_back(u, v);
      vertices.emplace_back(width * u, height * v, 0.0);
    }
  }
  std::vector<Face> faces;
  faces.reserve(static_cast<std::size_t>(2 * (nx - 1) * (ny - 1)));
  for (int j = 0; j + 1 < ny; ++j) {
    for (int i = 0; i + 1 < nx; ++i) {
      const int a = j * nx + i;
      const int b = a + 1;
      const int c = a + nx;
      const int d = c + 1;
      faces.push_back({a, b, d});
      faces.push_back({a, d, c});
    }
  }
  return TriMesh(std::move(vertices), std::move(faces), std::move(params));
}

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

enum class DeformationKind { CylinderRoll, SineFlex, RigidMotion };

inline std::string_view to_string(DeformationKind kind) {
  switch (kind) {
    case DeformationKind::CylinderRoll: return "cylinder_roll";
    case DeformationKind::SineFlex: return "sine_flex";
    case DeformationKind::RigidMotion: return "rigid_motion";
  }
  return "unknown";
}

inline DeformationKind parse_deformation_kind(std::string_view name) {
  if (name == "cylinder_roll") return DeformationKind::CylinderRoll;
  if (name == "sine_flex") return DeformationKind::SineFlex;
  if (name == "rigid_motion") return DeformationKind::RigidMotion;
  throw Error(ErrorKind::ParseError, "unknown deformation model '" + std::string(name) + "'");
}

/// Bends a flat sheet about lines parallel to its y axis, then places it in
/// the camera frame. The sheet folds exactly at the template's grid columns
/// (spacing `fold_spacing`) so every triangle moves rigidly: the bent grid is
/// an exact discrete isometry of the template.
///
/// schedule[t] is the cylinder radius for cylinder_roll and the sine
/// amplitude for sine_flex; rigid_motion ignores it.
struct DeformationModel {
  DeformationKind kind = DeformationKind::CylinderRoll;
  std::vector<double> schedule;
  std::vector<RigidTransform> extrinsics;
  double width = 1.0;
  double fold_spacing = 1.0;
  double sine_wavelength = 1.0;

  std::size_t num_frames() const { return extrinsics.size(); }
};

namespace detail {

/// Polyline in the (x, z) plane with vertices a fixed arc length apart.
struct Profile {
  std::vector<Eigen::Vector2d> knots;
  double spacing = 1.0;

  Vec3 map(const Vec3& rest) const {
    const double s = rest.x();
    const auto last = static_cast<double>(knots.size() - 1);
    const double k = std::clamp(std::floor(s / spacing), 0.0, last - 1.0);
    const auto idx = static_cast<std::size_t>(k);
    const double frac = s / spacing - k;
    const Eigen::Vector2d& a = knots[idx];
    const Eigen::Vector2d& b = knots[idx + 1];
    const Eigen::Vector2d dir = (b - a) / spacing;
    const Eigen::Vector2d p = a + frac * (b - a);
    // in-strip normal (-dz, dx) carries any out-of-plane rest offset
    return {p.x() - dir.y() * rest.z(), rest.y(), p.y() + dir.x() * rest.z()};
  }
};

inline int knot_count(double width, double spacing) {
  const double n = width / spacing;
  const auto rounded = std::lround(n);
  if (rounded < 1 || std::abs(n - static_cast<double>(rounded)) > 1e-9 * std::max(1.0, n)) {
    throw Error(ErrorKind::InvalidArgument, "sheet width is not a whole number of fold spacings");
  }
  return static_cast<int>(rounded) + 1;
}

inline Profile cylinder_profile(double width, double spacing, double radius) {
  if (!(radius > 0.0) || 2.0 * radius < spacing) {
    throw Error(ErrorKind::InvalidArgument, "cylinder radius too small for the fold spacing");
  }
  const int n = knot_count(width, spacing);
  const double step = 2.0 * std::asin(spacing / (2.0 * radius));
  const double start = -0.5 * step * (n - 1);
  Profile prof;
  prof.spacing = spacing;
  for (int k = 0; k < n; ++k) {
    const double a = start + step * k;
    prof.knots.emplace_back(0.5 * width + radius * std::sin(a), radius * (1.0 - std::cos(a)));
  }
  return prof;
}

inline Profile sine_profile(double width, double spacing, double amplitude, double wavelength) {
  const int n = knot_count(width, spacing);
  const double w = 2.0 * std::numbers::pi / wavelength;
  auto curve = [&](double x) { return Eigen::Vector2d(x, amplitude * std::sin(w * x)); };
  Profile prof;
  prof.spacing = spacing;
  double x = 0.0;
  prof.knots.push_back(curve(x));
  for (int k = 1; k < n; ++k) {
    const Eigen::Vector2d from = curve(x);
    double lo = x;
    double hi = x + spacing;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      if ((curve(mid) - from).norm() < spacing) lo = mid;
      else hi = mid;
    }
    x = 0.5 * (lo + hi);
    // snap the chord to the exact spacing along its own direction
    const Eigen::Vector2d dir = (curve(x) - from).normalized();
    prof.knots.push_back(from + spacing * dir);
    x = prof.knots.back().x();
  }
  const double shift = 0.5 * width - 0.5 * (prof.knots.front().x() + prof.knots.back().x());
  for (auto& kn : prof.knots) kn.x() += shift;
  return prof;
}

}  // namespace detail

/// Ground-truth vertex positions at frame t for a flat rest template.
inline std::vector<Vec3> deform(const DeformationModel& model, const TriMesh& rest, std::size_t t) {
  if (t >= model.extrinsics.size() || (model.kind != DeformationKind::RigidMotion && t >= model.schedule.size())) {
    throw Error(ErrorKind::ScheduleOutOfRange, "no schedule entry for frame " + std::to_string(t), t);
  }
  const RigidTransform& place = model.extrinsics[t];
  std::vector<Vec3> out;
  out.reserve(rest.num_vertices());
  if (model.kind == DeformationKind::RigidMotion) {
    for (const auto& v : rest.vertices()) out.push_back(place.apply(v));
    return out;
  }
  const detail::Profile prof =
      model.kind == DeformationKind::CylinderRoll
          ? detail::cylinder_profile(model.width, model.fold_spacing, model.schedule[t])
          : detail::sine_profile(model.width, model.fold_spacing, model.schedule[t], model.sine_wavelength);
  for (const auto& v : rest.vertices()) out.push_back(place.apply(prof.map(v)));
  return out;
}

/// Smooth cylinder roll (u, v) -> (r sin(W u / r), H v, r (1 - cos(W u / r))).
inline Vec3 cylinder_roll_surface(double width, double height, double radius, const Vec2& p) {
  const double a = width * p.x() / radius;
  return {radius * std::sin(a), height * p.y(), radius * (1.0 - std::cos(a))};
}

inline Mat3 rotation_xyz(double rx, double ry, double rz) {
  return (Eigen::AngleAxisd(rz, Vec3::UnitZ()) * Eigen::AngleAxisd(ry, Vec3::UnitY()) *
          Eigen::AngleAxisd(rx, Vec3::UnitX()))
      .toRotationMatrix();
}

enum class MatchMode { PerFacet, Vertices };

struct SynthOptions {
  DeformationKind kind = DeformationKind::CylinderRoll;
  int frames = 30;
  double width = 130.0;
  double height = 100.0;
  int nx = 13;
  int ny = 10;
  double max_bend = 2.0 * std::numbers::pi / 3.0;  ///< total bend angle of the last cylinder frame (rad)
  double max_amplitude = 0.15;                     ///< last sine amplitude, fraction of width
  MatchMode match_mode = MatchMode::PerFacet;
  int per_facet = 1;
  double noise_px = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  CameraIntrinsics camera{500.0, 500.0, 320.0, 240.0, 0.0};
};

struct SyntheticSequence {
  TriMesh rest;      ///< flat sheet in its own frame
  TriMesh templ;     ///< rest sheet placed in the camera frame
  DeformationModel model;
  std::vector<std::vector<Vec3>> frames;
  std::vector<MatchSet> matches;
  CameraIntrinsics camera;
  SynthOptions options;
};

/// Rest placement: sheet centred on the optical axis at depth 2 max(W, H).
inline RigidTransform rest_placement(double width, double height) {
  RigidTransform tf;
  tf.translation = Vec3(-0.5 * width, -0.5 * height, 2.0 * std::max(width, height));
  return tf;
}

inline DeformationModel make_model(const SynthOptions& opt) {
  DeformationModel model;
  model.kind = opt.kind;
  model.width = opt.width;
  model.fold_spacing = opt.width / (opt.nx - 1);
  model.sine_wavelength = opt.width;
  const RigidTransform rest = rest_placement(opt.width, opt.height);
  const auto t_count = static_cast<std::size_t>(opt.frames);
  for (std::size_t t = 0; t < t_count; ++t) {
    const double phase = static_cast<double>(t + 1) / static_cast<double>(t_count);
    switch (opt.kind) {
      case DeformationKind::CylinderRoll:
        model.schedule.push_back(opt.width / (opt.max_bend * phase));
        model.extrinsics.push_back(rest);
        break;
      case DeformationKind::SineFlex:
        model.schedule.push_back(opt.max_amplitude * opt.width * phase);
        model.extrinsics.push_back(rest);
        break;
      case DeformationKind::RigidMotion: {
        model.schedule.push_back(0.0);
        // rotate about the sheet centre while drifting sideways
        const Vec3 centre(0.5 * opt.width, 0.5 * opt.height, 0.0);
        RigidTransform tf;
        tf.rotation = rotation_xyz(0.15 * phase, 0.25 * phase, 0.05 * phase);
        tf.translation = rest.apply(centre) - tf.rotation * centre + Vec3(0.05 * opt.width * phase, 0.0, 0.0);
        model.extrinsics.push_back(tf);
        break;
      }
    }
  }
  return model;
}

/// Uniform point in a triangle as barycentric weights.
inline Vec3 sample_barycentric(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r1 = std::sqrt(unit(rng));
  const double r2 = unit(rng);
  return {1.0 - r1, r1 * (1.0 - r2), r1 * r2};
}

namespace detail {

inline MatchSet drop_and_perturb(MatchSet all, const TriMesh& frame, const CameraIntrinsics& cam, double noise_px,
                                 double dropout, std::mt19937_64& rng) {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::InvalidArgument, "dropout must lie in [0, 1)");
  if (!(noise_px >= 0.0)) throw Error(ErrorKind::InvalidArgument, "noise must be non-negative");
  for (auto& m : all) {
    const Vec3 s = barycentric_embed(frame, m.facet, m.bary);
    if (!(s.z() > kMinDepth)) {
      throw Error(ErrorKind::NonPositiveDepth, "facet behind the camera", static_cast<std::size_t>(m.facet));
    }
    m.pixel = project(cam, s);
  }
  if (noise_px > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_px);
    for (auto& m : all) {
      const double du = noise(rng);
      const double dv = noise(rng);
      m.pixel += Vec2(du, dv);
    }
  }
  const auto n = all.size();
  const auto drop = static_cast<std::size_t>(std::llround(dropout * static_cast<double>(n)));
  if (drop == 0) return all;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
  std::sort(keep.begin(), keep.end());
  MatchSet out;
  out.reserve(keep.size());
  for (std::size_t i : keep) out.push_back(all[i]);
  return out;
}

}  // namespace detail

/// `per_facet` uniform samples in every facet. The domain point reuses the
/// barycentric weights on the template's parametrization.
inline MatchSet synthesize_matches(const std::vector<Vec3>& frame_vertices, const TriMesh& templ,
                                   const CameraIntrinsics& cam, int per_facet, double noise_px, double dropout,
                                   std::uint64_t seed) {
  if (per_facet < 1) throw Error(ErrorKind::InvalidArgument, "per_facet must be positive");
  const TriMesh frame = templ.with_vertices(frame_vertices);
  std::mt19937_64 rng(seed);
  MatchSet all;
  all.reserve(frame.num_faces() * static_cast<std::size_t>(per_facet));
  for (std::size_t f = 0; f < frame.num_faces(); ++f) {
    const Face& face = frame.faces()[f];
    for (int k = 0; k < per_facet; ++k) {
      Match m;
      m.facet = static_cast<int>(f);
      m.bary = sample_barycentric(rng);
      m.param_point = m.bary[0] * templ.param_coords()[face[0]] + m.bary[1] * templ.param_coords()[face[1]] +
                      m.bary[2] * templ.param_coords()[face[2]];
      all.push_back(m);
    }
  }
  return detail::drop_and_perturb(std::move(all), frame, cam, noise_px, dropout, rng);
}

/// One match per vertex, expressed on the lowest-index facet touching it.
inline MatchSet synthesize_vertex_matches(const std::vector<Vec3>& frame_vertices, const TriMesh& templ,
                                          const CameraIntrinsics& cam, double noise_px, double dropout,
                                          std::uint64_t seed) {
  const TriMesh frame = templ.with_vertices(frame_vertices);
  std::vector<int> owner(frame.num_vertices(), -1);
  std::vector<int> slot(frame.num_vertices(), 0);
  for (std::size_t f = 0; f < frame.num_faces(); ++f) {
    for (int k = 0; k < 3; ++k) {
      const auto v = static_cast<std::size_t>(frame.faces()[f][static_cast<std::size_t>(k)]);
      if (owner[v] < 0) {
        owner[v] = static_cast<int>(f);
        slot[v] = k;
      }
    }
  }
  MatchSet all;
  for (std::size_t v = 0; v < frame.num_vertices(); ++v) {
    if (owner[v] < 0) continue;
    Match m;
    m.facet = owner[v];
    m.bary = Vec3::Zero();
    m.bary[slot[v]] = 1.0;
    m.param_point = templ.param_coords()[v];
    all.push_back(m);
  }
  std::mt19937_64 rng(seed);
  return detail::drop_and_perturb(std::move(all), frame, cam, noise_px, dropout, rng);
}

inline SyntheticSequence make_sequence(const SynthOptions& opt) {
  if (opt.frames < 1) throw Error(ErrorKind::InvalidArgument, "need at least one frame");
  opt.camera.validate();
  SyntheticSequence seq;
  seq.options = opt;
  seq.camera = opt.camera;
  seq.rest = make_template(opt.width, opt.height, opt.nx, opt.ny);
  seq.model = make_model(opt);
  const RigidTransform place = rest_placement(opt.width, opt.height);
  std::vector<Vec3> placed;
  for (const auto& v : seq.rest.vertices()) placed.push_back(place.apply(v));
  seq.templ = seq.rest.with_vertices(std::move(placed));

  const double scale = std::max(opt.width, opt.height);
  for (std::size_t t = 0; t < static_cast<std::size_t>(opt.frames); ++t) {
    std::vector<Vec3> verts = deform(seq.model, seq.rest, t);
    for (std::size_t i = 0; i < verts.size(); ++i) {
      if (!(verts[i].z() > 0.1 * scale)) {
        throw Error(ErrorKind::NonPositiveDepth, "generated vertex too close to the camera", i);
      }
    }
    const std::uint64_t s = frame_seed(opt.seed, t);
    seq.matches.push_back(opt.match_mode == MatchMode::PerFacet
                              ? synthesize_matches(verts, seq.templ, opt.camera, opt.per_facet, opt.noise_px,
                                                   opt.dropout, s)
                              : synthesize_vertex_matches(verts, seq.templ, opt.camera, opt.noise_px, opt.dropout, s));
    seq.frames.push_back(std::move(verts));
  }
  return seq;
}

/// Largest |len/len_template - 1| over all mesh edges.
inline double max_edge_deviation(const TriMesh& templ, const std::vector<Vec3>& vertices) {
  double worst = 0.0;
  for (const auto& [a, b] : templ.edges()) {
    const double l0 = (templ.vertices()[a] - templ.vertices()[b]).norm();
    const double l1 = (vertices[a] - vertices[b]).norm();
    worst = std::max(worst, std::abs(l1 / l0 - 1.0));
  }
  return worst;
}

/// Mean |len/len_template - 1| over all mesh edges.
inline double mean_edge_deviation(const TriMesh& templ, const std::vector<Vec3>& vertices) {
  double sum = 0.0;
  for (const auto& [a, b] : templ.edges()) {
    const double l0 = (templ.vertices()[a] - templ.vertices()[b]).norm();
    const double l1 = (vertices[a] - vertices[b]).norm();
    sum += std::abs(l1 / l0 - 1.0);
  }
  return templ.edges().empty() ? 0.0 : sum / static_cast<double>(templ.edges().size());
}

}  // namespace sft
