#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sft/classical.hpp"
#include "sft/eval.hpp"
#include "sft/io.hpp"
#include "sft/solver.hpp"
#include "sft/synth.hpp"

namespace sft::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kParse = 2,
  kShape = 3,
  kSolver = 4,
  kDiverged = 5,
  kNotFound = 6,
  kInvalid = 7,
};

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::ParseError: return kParse;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::LengthMismatch:
    case ErrorKind::ArchitectureMismatch: return kShape;
    case ErrorKind::NonPositiveDepth:
    case ErrorKind::NonFiniteGradient:
    case ErrorKind::DidNotConverge:
    case ErrorKind::SingularSystem: return kSolver;
    case ErrorKind::Diverged: return kDiverged;
    case ErrorKind::FileNotFound: return kNotFound;
    default: return kInvalid;
  }
}

inline void report_error(std::ostream& err, const std::string& kind, const std::string& message, int code,
                         std::optional<std::size_t> index = std::nullopt) {
  io::json rec = {{"error", kind}, {"message", message}, {"exit_code", code}};
  if (index) rec["index"] = *index;
  err << rec.dump() << "\n";
}

inline std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::ParseError, "bad number '" + item + "' in list");
    }
  }
  return out;
}

/// "m:t,m:t,..." weight pairs.
inline std::vector<LossWeights> parse_pairs(const std::string& text) {
  std::vector<LossWeights> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error(ErrorKind::ParseError, "weight pair '" + item + "' needs m:t");
    const auto m = parse_list(item.substr(0, colon));
    const auto t = parse_list(item.substr(colon + 1));
    if (m.size() != 1 || t.size() != 1) throw Error(ErrorKind::ParseError, "bad weight pair '" + item + "'");
    out.push_back({m[0], t[0]});
  }
  return out;
}

struct Options {
  // synth
  std::string out;
  std::string model = "cylinder_roll";
  int frames = 30;
  double noise_px = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  bool vertex_matches = false;
  int per_facet = 1;
  double width = 130.0;
  double height = 100.0;
  int nx = 13;
  int ny = 10;
  // shared
  std::string bundle;
  std::string config;
  std::string template_fit;
  bool quiet = false;
  // reconstruct
  std::string method = "neural";
  // eval
  std::string results;
  std::string csv;
  // sweep
  std::string grid;
  std::string metric_values;
  std::string time_values;
  std::string pairs;
};

inline SolverConfig config_or_default(const Options& o) {
  return o.config.empty() ? SolverConfig{} : io::load_config(o.config);
}

inline TemplateFit obtain_template_fit(const Options& o, const io::Bundle& b, const SolverConfig& cfg,
                                       std::ostream& log) {
  io::fs::path path = o.template_fit;
  if (path.empty() && io::fs::exists(io::fs::path(o.bundle) / "template_fit.json")) {
    path = io::fs::path(o.bundle) / "template_fit.json";
  }
  if (!path.empty()) {
    TemplateFit fit = io::template_fit_from_json(io::read_json(path));
    if (fit.param_coords.size() != b.templ.num_vertices() || fit.net.layer_dims() != cfg.layer_dims) {
      throw Error(ErrorKind::ShapeMismatch, "template fit does not match the bundle or config");
    }
    return fit;
  }
  if (!o.quiet) log << "fitting template\n";
  return fit_template(b.templ, cfg);
}

inline int cmd_synth(const Options& o, std::ostream& log) {
  SynthOptions s;
  s.kind = parse_deformation_kind(o.model);
  s.frames = o.frames;
  s.noise_px = o.noise_px;
  s.dropout = o.dropout;
  s.seed = o.seed;
  s.match_mode = o.vertex_matches ? MatchMode::Vertices : MatchMode::PerFacet;
  s.per_facet = o.per_facet;
  s.width = o.width;
  s.height = o.height;
  s.nx = o.nx;
  s.ny = o.ny;
  if (!(s.noise_px >= 0.0) || !(s.dropout >= 0.0 && s.dropout < 1.0) || s.per_facet < 1) {
    throw Error(ErrorKind::InvalidArgument, "noise must be >= 0, dropout in [0,1), per-facet >= 1");
  }
  const SyntheticSequence seq = make_sequence(s);
  io::write_bundle(o.out, seq);
  if (!o.quiet) log << "wrote " << seq.frames.size() << " frames to " << o.out << "\n";
  return kOk;
}

inline int cmd_fit_template(const Options& o, std::ostream& log) {
  const SolverConfig cfg = config_or_default(o);
  const io::Bundle b = io::load_bundle(o.bundle);
  const TemplateFit fit = fit_template(b.templ, cfg);
  const io::fs::path out = o.out.empty() ? io::fs::path(o.bundle) / "template_fit.json" : io::fs::path(o.out);
  io::write_json(out, io::template_fit_to_json(fit));
  if (!o.quiet) log << "fit error " << fit.fit_error << " after " << fit.iterations << " iterations\n";
  return kOk;
}

inline int cmd_reconstruct(const Options& o, std::ostream& log) {
  const SolverConfig cfg = config_or_default(o);
  const io::Bundle b = io::load_bundle(o.bundle);
  auto progress = [&](const FrameSolution& s) {
    if (o.quiet) return;
    log << s.method << " frame " << s.frame << " total " << s.losses.total << " iters " << s.iterations
        << (s.failed ? " FAILED " + s.error : "") << "\n";
  };
  std::vector<FrameSolution> sols;
  if (o.method == "neural") {
    const TemplateFit fit = obtain_template_fit(o, b, cfg, log);
    sols = reconstruct_sequence(fit, b.camera, b.matches, cfg.weights, cfg, progress);
  } else if (o.method == "classical") {
    sols = reconstruct_sequence_classical(b.templ, b.camera, b.matches, cfg, progress);
  } else {
    throw Error(ErrorKind::InvalidArgument, "method must be neural or classical");
  }
  io::write_results(o.out, sols);
  int code = kOk;
  for (const auto& s : sols) {
    if (!s.failed) continue;
    code = s.error.rfind("Diverged", 0) == 0 ? kDiverged : std::max(code, static_cast<int>(kSolver));
  }
  return code;
}

inline int cmd_eval(const Options& o, std::ostream& log) {
  const io::Bundle b = io::load_bundle(o.bundle);
  if (b.frames.empty()) throw Error(ErrorKind::ShapeMismatch, "bundle has no ground-truth frames");
  const auto sols = io::read_results(o.results);
  const EvalReport r = evaluate(sols, b.frames);
  io::json j = report_to_json(r);
  j["edge_deviation"] = sequence_edge_deviation(b.templ, sols);
  io::write_json(o.out, j);
  if (!o.csv.empty()) io::write_text(o.csv, report_csv(r, sols));
  if (!o.quiet) log << "sequence mean " << r.sequence_mean << " std " << r.sequence_std << "\n";
  return kOk;
}

inline int cmd_sweep(const Options& o, std::ostream& out, std::ostream& log) {
  const SolverConfig cfg = config_or_default(o);
  std::vector<LossWeights> grid;
  if (!o.pairs.empty()) {
    grid = parse_pairs(o.pairs);
  } else {
    const auto both = parse_list(o.grid);
    const auto m = o.metric_values.empty() ? both : parse_list(o.metric_values);
    const auto t = o.time_values.empty() ? both : parse_list(o.time_values);
    grid = lambda_grid(m, t);
  }
  for (const auto& w : grid) w.validate();
  const io::Bundle b = io::load_bundle(o.bundle);
  if (grid.empty()) throw Error(ErrorKind::InvalidArgument, "empty lambda grid");
  const TemplateFit fit = obtain_template_fit(o, b, cfg, log);
  const auto rows = sweep_lambdas(b, grid, cfg, &fit);
  std::string table = "lambda_metric,lambda_time,error_mm\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.lambda_metric, r.lambda_time, r.error);
    table += buf;
  }
  if (o.out.empty()) {
    out << table;
  } else {
    io::write_text(o.out, table);
  }
  return kOk;
}

/// Parses and runs one command line; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Template-based deformable surface reconstruction"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic sequence bundle");
  synth->add_option("--out", o.out, "bundle directory")->required();
  synth->add_option("--model", o.model, "cylinder_roll, sine_flex or rigid_motion");
  synth->add_option("--frames", o.frames, "frame count");
  synth->add_option("--noise-px", o.noise_px, "pixel noise sigma");
  synth->add_option("--dropout", o.dropout, "fraction of matches removed");
  synth->add_option("--seed", o.seed);
  synth->add_flag("--vertex-matches", o.vertex_matches, "one match per vertex instead of per facet");
  synth->add_option("--per-facet", o.per_facet, "matches per facet");
  synth->add_option("--width", o.width, "sheet width (mm)");
  synth->add_option("--height", o.height, "sheet height (mm)");
  synth->add_option("--nx", o.nx, "grid columns");
  synth->add_option("--ny", o.ny, "grid rows");

  auto* fit = app.add_subcommand("fit-template", "fit the network to the template mesh");
  fit->add_option("--bundle", o.bundle)->required();
  fit->add_option("--config", o.config);
  fit->add_option("--out", o.out, "checkpoint path (default BUNDLE/template_fit.json)");

  auto* rec = app.add_subcommand("reconstruct", "track every frame of a bundle");
  rec->add_option("--bundle", o.bundle)->required();
  rec->add_option("--method", o.method)->check(CLI::IsMember({"neural", "classical"}));
  rec->add_option("--config", o.config);
  rec->add_option("--template-fit", o.template_fit, "checkpoint from fit-template");
  rec->add_option("--out", o.out, "results JSON-lines file")->required();

  auto* ev = app.add_subcommand("eval", "mean tracking error against ground truth");
  ev->add_option("--bundle", o.bundle)->required();
  ev->add_option("--results", o.results)->required();
  ev->add_option("--out", o.out, "report JSON")->required();
  ev->add_option("--csv", o.csv, "per-frame CSV");

  auto* sw = app.add_subcommand("sweep", "grid search over the loss weights");
  sw->add_option("--bundle", o.bundle)->required();
  sw->add_option("--config", o.config);
  sw->add_option("--template-fit", o.template_fit);
  auto* g = sw->add_option("--grid", o.grid, "comma list used for both weights");
  sw->add_option("--metric-values", o.metric_values, "comma list for the metric weight");
  sw->add_option("--time-values", o.time_values, "comma list for the time weight");
  auto* p = sw->add_option("--pairs", o.pairs, "explicit m:t pairs");
  g->excludes(p);
  sw->add_option("--out", o.out, "CSV table (default stdout)");

  for (auto* sub : {synth, fit, rec, ev, sw}) sub->add_flag("--quiet", o.quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "UsageError", e.what(), kUsage);
    return kUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, err);
    if (fit->parsed()) return cmd_fit_template(o, err);
    if (rec->parsed()) return cmd_reconstruct(o, err);
    if (ev->parsed()) return cmd_eval(o, err);
    if (sw->parsed()) {
      if (o.grid.empty() && o.pairs.empty() && o.metric_values.empty() && o.time_values.empty()) {
        throw Error(ErrorKind::InvalidArgument, "sweep needs --grid, --pairs or per-weight value lists");
      }
      return cmd_sweep(o, out, err);
    }
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    report_error(err, std::string(to_string(e.kind())), e.what(), code, e.index());
    return code;
  } catch (const std::exception& e) {
    report_error(err, "InternalError", e.what(), kSolver);
    return kSolver;
  }
  return kUsage;
}

}  // namespace sft::cli
