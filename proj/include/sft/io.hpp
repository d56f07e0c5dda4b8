#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sft/error.hpp"
#include "sft/geom.hpp"
#include "sft/solver.hpp"
#include "sft/surfnet.hpp"
#include "sft/synth.hpp"

namespace sft::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- text files --------------------------------------------------------

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::FileNotFound, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::FileNotFound, "cannot write " + path.string());
  out << text;
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, what + ": " + e.what());
  }
}

inline json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_json(line, path.string() + ":" + std::to_string(n)));
  }
  return out;
}

inline void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

/// Runs `fn`, turning JSON type and key errors into ParseError.
template <class Fn>
auto guarded(const std::string& what, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, what + ": " + e.what());
  }
}

// ---- small vectors -----------------------------------------------------

inline json to_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec2 vec2_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorKind::ParseError, "expected a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::ParseError, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json points_to_json(const std::vector<Vec3>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back(to_json(p));
  return a;
}

inline std::vector<Vec3> points_from(const json& j) {
  if (!j.is_array()) throw Error(ErrorKind::ParseError, "expected an array of points");
  std::vector<Vec3> out;
  out.reserve(j.size());
  for (const auto& p : j) out.push_back(vec3_from(p));
  return out;
}

// ---- mesh and camera ---------------------------------------------------

inline json mesh_to_json(const TriMesh& mesh) {
  json faces = json::array();
  for (const auto& f : mesh.faces()) faces.push_back(json::array({f[0], f[1], f[2]}));
  json params = json::array();
  for (const auto& p : mesh.param_coords()) params.push_back(to_json(p));
  return {{"vertices", points_to_json(mesh.vertices())}, {"faces", faces}, {"param_coords", params}};
}

inline TriMesh mesh_from_json(const json& j) {
  return guarded("mesh", [&] {
    std::vector<Face> faces;
    for (const auto& f : j.at("faces")) {
      if (!f.is_array() || f.size() != 3) throw Error(ErrorKind::ParseError, "face must have three indices");
      faces.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
    }
    std::vector<Vec2> params;
    for (const auto& p : j.at("param_coords")) params.push_back(vec2_from(p));
    return TriMesh(points_from(j.at("vertices")), std::move(faces), std::move(params));
  });
}

inline json camera_to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"skew", c.skew}};
}

inline CameraIntrinsics camera_from_json(const json& j) {
  return guarded("camera", [&] {
    return CameraIntrinsics(j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                            j.at("cy").get<double>(), j.value("skew", 0.0));
  });
}

// ---- matches -----------------------------------------------------------

inline json match_to_json(const Match& m) {
  return {{"facet", m.facet}, {"bary", to_json(m.bary)}, {"param_point", to_json(m.param_point)},
          {"pixel", to_json(m.pixel)}};
}

inline Match match_from_json(const json& j) {
  return guarded("match", [&] {
    Match m;
    m.facet = j.at("facet").get<int>();
    m.bary = vec3_from(j.at("bary"));
    m.param_point = vec2_from(j.at("param_point"));
    m.pixel = vec2_from(j.at("pixel"));
    return m;
  });
}

/// Rejects matches whose facet, weights or parameter point are unusable
/// with `mesh`.
inline void validate_matches(const TriMesh& mesh, const MatchSet& matches) {
  for (std::size_t k = 0; k < matches.size(); ++k) {
    const Match& m = matches[k];
    if (m.facet < 0 || static_cast<std::size_t>(m.facet) >= mesh.num_faces()) {
      throw Error(ErrorKind::BadFacet, "match facet out of range", k);
    }
    if (!m.bary.allFinite() || (m.bary.array() < -1e-9).any() || std::abs(m.bary.sum() - 1.0) > 1e-9) {
      throw Error(ErrorKind::BadWeights, "match weights must be non-negative and sum to 1", k);
    }
    if (!m.param_point.allFinite() || !in_unit_square(m.param_point)) {
      throw Error(ErrorKind::OutOfDomain, "match parameter point outside the unit square", k);
    }
    if (!m.pixel.allFinite()) throw Error(ErrorKind::ParseError, "non-finite pixel", k);
  }
}

// ---- solver config -----------------------------------------------------

inline json config_to_json(const SolverConfig& c) {
  return {{"lambda_metric", c.weights.lambda_metric},
          {"lambda_time", c.weights.lambda_time},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"max_frame_iters", c.max_frame_iters},
          {"frame_lr_decay", c.frame_lr_decay},
          {"early_stop_window", c.early_stop_window},
          {"early_stop_tol", c.early_stop_tol},
          {"max_template_iters", c.max_template_iters},
          {"template_tol", c.template_tol},
          {"template_lr", c.template_lr},
          {"template_lr_decay", c.template_lr_decay},
          {"seed", c.seed},
          {"layer_dims", c.layer_dims},
          {"first_layer_gain", c.first_layer_gain},
          {"first_layer_bias", c.first_layer_bias},
          {"metric_random_samples", c.metric_random_samples},
          {"c_tol", c.c_tol},
          {"max_outer", c.max_outer},
          {"max_inner", c.max_inner},
          {"damping", c.damping}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline SolverConfig config_from_json(const json& j) {
  return guarded("config", [&] {
    if (!j.is_object()) throw Error(ErrorKind::ParseError, "config must be a JSON object");
    const json known = config_to_json(SolverConfig{});
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw Error(ErrorKind::ParseError, "unknown config key '" + key + "'");
    }
    SolverConfig c;
    c.weights.lambda_metric = j.value("lambda_metric", c.weights.lambda_metric);
    c.weights.lambda_time = j.value("lambda_time", c.weights.lambda_time);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.max_frame_iters = j.value("max_frame_iters", c.max_frame_iters);
    c.frame_lr_decay = j.value("frame_lr_decay", c.frame_lr_decay);
    c.early_stop_window = j.value("early_stop_window", c.early_stop_window);
    c.early_stop_tol = j.value("early_stop_tol", c.early_stop_tol);
    c.max_template_iters = j.value("max_template_iters", c.max_template_iters);
    c.template_tol = j.value("template_tol", c.template_tol);
    c.template_lr = j.value("template_lr", c.template_lr);
    c.template_lr_decay = j.value("template_lr_decay", c.template_lr_decay);
    c.seed = j.value("seed", c.seed);
    c.layer_dims = j.value("layer_dims", c.layer_dims);
    c.first_layer_gain = j.value("first_layer_gain", c.first_layer_gain);
    c.first_layer_bias = j.value("first_layer_bias", c.first_layer_bias);
    c.metric_random_samples = j.value("metric_random_samples", c.metric_random_samples);
    c.c_tol = j.value("c_tol", c.c_tol);
    c.max_outer = j.value("max_outer", c.max_outer);
    c.max_inner = j.value("max_inner", c.max_inner);
    c.damping = j.value("damping", c.damping);
    c.weights.validate();
    if (c.layer_dims.size() < 2 || c.layer_dims.front() != 2 || c.layer_dims.back() != 3) {
      throw Error(ErrorKind::InvalidArgument, "layer_dims must start at 2 and end at 3");
    }
    if (!(c.adam.lr > 0.0) || !(c.template_lr > 0.0) || c.max_frame_iters < 1 || c.max_template_iters < 1 ||
        !(c.template_tol > 0.0) || c.max_outer < 1 || c.max_inner < 1 || c.damping < 0.0 || !(c.c_tol > 0.0)) {
      throw Error(ErrorKind::InvalidArgument, "config values out of range");
    }
    return c;
  });
}

inline SolverConfig load_config(const fs::path& path) { return config_from_json(read_json(path)); }

// ---- network checkpoint ------------------------------------------------

inline json net_to_json(const SurfNet& net) {
  json weights = json::array();
  json biases = json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto w = net.weight(l);
    json rows = json::array();
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < w.cols(); ++c) row.push_back(w(r, c));
      rows.push_back(std::move(row));
    }
    weights.push_back(std::move(rows));
    const auto b = net.bias(l);
    biases.push_back(std::vector<double>(b.data(), b.data() + b.size()));
  }
  return {{"layer_dims", net.layer_dims()},
          {"weights", weights},
          {"biases", biases},
          {"seed", net.seed()},
          {"output_scale", net.output_scale()},
          {"output_offset", to_json(net.output_offset())}};
}

inline SurfNet net_from_json(const json& j) {
  return guarded("network", [&] {
    auto dims = j.at("layer_dims").get<std::vector<int>>();
    SurfNet net = SurfNet::zeros(dims);
    const json& weights = j.at("weights");
    const json& biases = j.at("biases");
    if (weights.size() != net.num_layers() || biases.size() != net.num_layers()) {
      throw Error(ErrorKind::ArchitectureMismatch, "layer count does not match layer_dims");
    }
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      auto w = net.weight(l);
      const json& rows = weights[l];
      if (rows.size() != static_cast<std::size_t>(w.rows())) {
        throw Error(ErrorKind::ArchitectureMismatch, "weight rows do not match layer_dims", l);
      }
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const json& row = rows[static_cast<std::size_t>(r)];
        if (row.size() != static_cast<std::size_t>(w.cols())) {
          throw Error(ErrorKind::ArchitectureMismatch, "weight columns do not match layer_dims", l);
        }
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = row[static_cast<std::size_t>(c)].get<double>();
      }
      auto b = net.bias(l);
      const auto bv = biases[l].get<std::vector<double>>();
      if (bv.size() != static_cast<std::size_t>(b.size())) {
        throw Error(ErrorKind::ArchitectureMismatch, "bias length does not match layer_dims", l);
      }
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = bv[static_cast<std::size_t>(i)];
    }
    SurfNet out = SurfNet::from_params(dims, net.params(), j.value("seed", std::uint64_t{0}));
    out.set_output_transform(j.value("output_scale", 1.0),
                             j.contains("output_offset") ? vec3_from(j.at("output_offset")) : Vec3::Zero());
    return out;
  });
}

inline json template_fit_to_json(const TemplateFit& fit) {
  json j = net_to_json(fit.net);
  json params = json::array();
  for (const auto& p : fit.param_coords) params.push_back(to_json(p));
  json metrics = json::array();
  for (const auto& g : fit.template_metrics) metrics.push_back(json::array({g(0, 0), g(0, 1), g(1, 0), g(1, 1)}));
  j["param_coords"] = params;
  j["template_metrics"] = metrics;
  j["fit_error"] = fit.fit_error;
  j["iterations"] = fit.iterations;
  return j;
}

inline TemplateFit template_fit_from_json(const json& j) {
  return guarded("template fit", [&] {
    TemplateFit fit;
    fit.net = net_from_json(j);
    for (const auto& p : j.at("param_coords")) fit.param_coords.push_back(vec2_from(p));
    for (const auto& g : j.at("template_metrics")) {
      if (!g.is_array() || g.size() != 4) throw Error(ErrorKind::ParseError, "metric tensor must have 4 entries");
      Mat2 m;
      m << g[0].get<double>(), g[1].get<double>(), g[2].get<double>(), g[3].get<double>();
      fit.template_metrics.push_back(m);
    }
    if (fit.template_metrics.size() != fit.param_coords.size()) {
      throw Error(ErrorKind::LengthMismatch, "one template metric per parameter point expected");
    }
    fit.fit_error = j.value("fit_error", 0.0);
    fit.iterations = j.value("iterations", 0);
    return fit;
  });
}

// ---- frame results -----------------------------------------------------

inline json solution_to_json(const FrameSolution& s) {
  json j = {{"frame", s.frame},
            {"method", s.method},
            {"vertex_estimates", points_to_json(s.vertex_estimates)},
            {"losses",
             {{"projection", s.losses.projection},
              {"metric", s.losses.metric},
              {"time", s.losses.time},
              {"total", s.losses.total}}},
            {"iterations", s.iterations},
            {"failed", s.failed}};
  if (s.failed) j["error"] = s.error;
  if (!s.diagnostics.empty()) j["diagnostics"] = s.diagnostics;
  return j;
}

inline FrameSolution solution_from_json(const json& j) {
  return guarded("result record", [&] {
    FrameSolution s;
    s.frame = j.at("frame").get<std::size_t>();
    s.method = j.at("method").get<std::string>();
    s.vertex_estimates = points_from(j.at("vertex_estimates"));
    const json& l = j.at("losses");
    s.losses = {l.at("projection").get<double>(), l.at("metric").get<double>(), l.at("time").get<double>(),
                l.at("total").get<double>()};
    s.iterations = j.value("iterations", 0);
    s.failed = j.value("failed", false);
    s.error = j.value("error", std::string{});
    if (j.contains("diagnostics")) s.diagnostics = j.at("diagnostics").get<std::map<std::string, double>>();
    s.wall_time = j.value("wall_time", 0.0);
    return s;
  });
}

/// Timing is kept out of the results file so that identical runs write
/// identical results; it goes to `<results>.timing.jsonl` instead.
inline fs::path timing_path(const fs::path& results) {
  fs::path p = results;
  p += ".timing.jsonl";
  return p;
}

inline void write_results(const fs::path& path, const std::vector<FrameSolution>& sols) {
  std::vector<json> rows;
  std::vector<json> timing;
  for (const auto& s : sols) {
    rows.push_back(solution_to_json(s));
    timing.push_back({{"frame", s.frame}, {"method", s.method}, {"wall_time", s.wall_time}});
  }
  write_jsonl(path, rows);
  write_jsonl(timing_path(path), timing);
}

inline std::vector<FrameSolution> read_results(const fs::path& path) {
  std::vector<FrameSolution> out;
  for (const auto& row : read_jsonl(path)) out.push_back(solution_from_json(row));
  const fs::path tp = timing_path(path);
  if (fs::exists(tp)) {
    for (const auto& row : read_jsonl(tp)) {
      const auto f = guarded("timing", [&] { return row.at("frame").get<std::size_t>(); });
      for (auto& s : out) {
        if (s.frame == f) s.wall_time = row.value("wall_time", 0.0);
      }
    }
  }
  return out;
}

// ---- sequence bundle ---------------------------------------------------

struct Bundle {
  TriMesh templ;
  CameraIntrinsics camera;
  std::vector<MatchSet> matches;
  std::vector<std::vector<Vec3>> frames;  ///< ground truth; empty when absent
  json manifest = json::object();
};

inline json manifest_for(const SyntheticSequence& seq) {
  const SynthOptions& o = seq.options;
  return {{"model", std::string(to_string(o.kind))},
          {"frames", o.frames},
          {"width", o.width},
          {"height", o.height},
          {"nx", o.nx},
          {"ny", o.ny},
          {"schedule", seq.model.schedule},
          {"match_mode", o.match_mode == MatchMode::PerFacet ? "per_facet" : "vertices"},
          {"per_facet", o.per_facet},
          {"noise_px", o.noise_px},
          {"dropout", o.dropout},
          {"seed", o.seed}};
}

inline void write_bundle(const fs::path& dir, const SyntheticSequence& seq) {
  fs::create_directories(dir);
  write_json(dir / "template.json", mesh_to_json(seq.templ));
  write_json(dir / "camera.json", camera_to_json(seq.camera));
  std::vector<json> frames;
  std::vector<json> matches;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    frames.push_back({{"frame", t}, {"vertices", points_to_json(seq.frames[t])}});
    json ms = json::array();
    for (const auto& m : seq.matches[t]) ms.push_back(match_to_json(m));
    matches.push_back({{"frame", t}, {"matches", ms}});
  }
  write_jsonl(dir / "frames.jsonl", frames);
  write_jsonl(dir / "matches.jsonl", matches);
  write_json(dir / "manifest.json", manifest_for(seq));
}

inline Bundle load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::FileNotFound, "bundle directory " + dir.string() + " not found");
  Bundle b;
  b.templ = mesh_from_json(read_json(dir / "template.json"));
  b.camera = camera_from_json(read_json(dir / "camera.json"));
  if (fs::exists(dir / "manifest.json")) b.manifest = read_json(dir / "manifest.json");
  const auto rows = read_jsonl(dir / "matches.jsonl");
  for (std::size_t t = 0; t < rows.size(); ++t) {
    MatchSet ms = guarded("matches", [&] {
      MatchSet out;
      for (const auto& m : rows[t].at("matches")) out.push_back(match_from_json(m));
      return out;
    });
    validate_matches(b.templ, ms);
    b.matches.push_back(std::move(ms));
  }
  if (fs::exists(dir / "frames.jsonl")) {
    for (const auto& row : read_jsonl(dir / "frames.jsonl")) {
      auto verts = guarded("frames", [&] { return points_from(row.at("vertices")); });
      if (verts.size() != b.templ.num_vertices()) {
        throw Error(ErrorKind::ShapeMismatch, "ground-truth frame vertex count differs from the template");
      }
      b.frames.push_back(std::move(verts));
    }
  }
  return b;
}

}  // namespace sft::io
