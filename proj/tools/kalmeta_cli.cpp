// Command-line entry point: generate | train | adapt | evaluate | plot |
// gradcheck. Every run is a pure function of (config file, --set overrides),
// all output files land under output_dir and carry the resolved config hash,
// and exit codes separate config (2), numerical (3), and IO (4) failures.

#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kalmeta/checkpoint.hpp"
#include "kalmeta/config.hpp"
#include "kalmeta/dataset_io.hpp"
#include "kalmeta/report.hpp"
#include "kalmeta/svg.hpp"

namespace {

using namespace kalmeta;

struct CliArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  std::vector<std::string> reports;
  double tol = 1e-4;
};

nlohmann::json raw_config(const CliArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config_path.empty()) {
    try {
      j = nlohmann::json::parse(read_text_file(a.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + a.config_path + ": " + e.what());
    }
    if (!j.is_object())
      throw ConfigError("config " + a.config_path + ": root must be an object");
  }
  for (const std::string& kv : a.overrides) apply_override(j, kv);
  return j;
}

std::filesystem::path out_dir(const ExperimentConfig& c) {
  std::filesystem::path dir(c.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create output directory " + dir.string() + ": " +
                  ec.message());
  return dir;
}

long record_count(const TrajectoryDataset& ds) {
  long n = 0;
  for (const AgentTrack& tr : ds.tracks)
    n += static_cast<long>(tr.states.size());
  return n;
}

TrajectoryDataset domain_data(const ExperimentConfig& c,
                              const DomainSpec& spec) {
  if (!c.dataset.empty()) return ingest(c.dataset, spec.dt);
  return generate(spec, c.scenes);
}

Checkpoint required_checkpoint(const ExperimentConfig& c, const char* who) {
  if (c.checkpoint.empty())
    throw ConfigError(std::string(who) +
                      ": set checkpoint to a trained model file");
  return load_checkpoint(c.checkpoint);
}

int cmd_generate(const ExperimentConfig& c, const std::string& hash) {
  const std::filesystem::path dir = out_dir(c);
  for (const auto& [stem, spec] :
       {std::pair<const char*, const DomainSpec&>{"source", c.source},
        {"target", c.target}}) {
    TrajectoryDataset ds = generate(spec, c.scenes);
    save_dataset((dir / stem).string(), ds, hash);
    std::printf("%s: %s scenes=%d records=%ld dt=%g -> %s.txt\n", stem,
                spec.name.c_str(), c.scenes, record_count(ds), ds.dt,
                (dir / stem).c_str());
  }
  return 0;
}

int cmd_train(const ExperimentConfig& c, const std::string& hash) {
  const std::filesystem::path dir = out_dir(c);
  TrajectoryDataset ds = domain_data(c, c.source);
  std::vector<SceneWindow> ws =
      extract_windows(ds, c.eval.history_len, c.eval.horizon);
  std::vector<Episode> eps =
      training_episodes(ws, c.segment_len, c.anchor, c.train.episode);

  // Deterministic validation split: every fifth episode.
  std::vector<Episode> train_eps, val_eps;
  for (std::size_t i = 0; i < eps.size(); ++i)
    ((i % 5 == 4) ? val_eps : train_eps).push_back(eps[i]);
  if (train_eps.empty()) std::swap(train_eps, val_eps);

  TrainState st = initial_state(c);
  if (!c.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(c.checkpoint);
    if (!(ck.state.params.cfg == c.model))
      throw ConfigError(
          "train: checkpoint model does not match the configured model");
    st = ck.state;
  }

  TrainResult res = train(st, train_eps, val_eps, c.train);
  save_checkpoint((dir / "checkpoint.json").string(), res.state, hash);
  atomic_write_text((dir / "training_log.jsonl").string(),
                    training_log_jsonl(res.log, hash));
  if (res.diverged) throw NumericalError("train: loss diverged");
  std::printf(
      "trained %d epochs on %zu episodes (%zu validation), best val %.6g at "
      "epoch %d -> %s\n",
      res.state.epochs_done, train_eps.size(), val_eps.size(), res.best_val,
      res.best_epoch, (dir / "checkpoint.json").c_str());
  return 0;
}

int cmd_adapt(const ExperimentConfig& c, const std::string& hash) {
  Checkpoint ck = required_checkpoint(c, "adapt");
  const std::filesystem::path dir = out_dir(c);
  const ModelParameters& mp = ck.state.params;
  TrajectoryDataset ds = domain_data(c, c.target);
  std::vector<SceneWindow> ws =
      extract_windows(ds, c.eval.history_len, c.eval.horizon);

  std::vector<LastLayerBelief> beliefs;
  std::vector<UpdateTrace> trace;
  switch (c.adapt.mode) {
    case AdaptMode::online:
      throw ConfigError(
          "adapt: mode online runs inside evaluate; use k0, offline, "
          "finetune, or hybrid here");
    case AdaptMode::k0:
      beliefs = prior_beliefs(mp);
      break;
    case AdaptMode::offline: {
      Eager::Ctx ctx;
      BoundModel<Eager> bm = BoundModel<Eager>::bind(ctx, mp);
      OfflineResult res =
          adapt_offline(bm, prior_beliefs(mp), process_noise_diag(mp), ws);
      beliefs = std::move(res.beliefs);
      trace = std::move(res.trace);
      std::printf("folded %ld transitions into the shared belief\n",
                  res.transitions_used);
      break;
    }
    case AdaptMode::finetune: {
      TrainResult res = adapt_finetune(mp, ws, c.adapt);
      save_checkpoint((dir / "checkpoint_adapted.json").string(), res.state,
                      hash);
      beliefs = prior_beliefs(res.state.params);
      if (res.diverged) throw NumericalError("adapt: finetune diverged");
      break;
    }
    case AdaptMode::hybrid: {
      HybridResult res = adapt_hybrid(mp, ws, c.adapt);
      TrainState st;
      st.params = res.params;
      st.adam = AdamState::init(st.params);
      st.epochs_done = ck.state.epochs_done;
      save_checkpoint((dir / "checkpoint_adapted.json").string(), st, hash);
      beliefs = std::move(res.beliefs);
      trace = std::move(res.trace);
      if (res.diverged) throw NumericalError("adapt: hybrid finetune diverged");
      break;
    }
  }

  save_beliefs((dir / "beliefs.json").string(), beliefs, hash);
  atomic_write_text((dir / "trace.jsonl").string(), trace_jsonl(trace, hash));
  std::printf("adapt mode=%s windows=%zu trace records=%zu -> %s\n",
              adapt_mode_name(c.adapt.mode).c_str(), ws.size(), trace.size(),
              (dir / "beliefs.json").c_str());
  return 0;
}

int cmd_evaluate(const ExperimentConfig& c, const std::string& hash) {
  Checkpoint ck = required_checkpoint(c, "evaluate");
  const std::filesystem::path dir = out_dir(c);
  RandomStream rng(c.seed);

  if (c.mode == "offline") {
    // Adapt on one draw of the target domain, score on a held-out draw. A
    // file-backed dataset splits by scene parity instead: even ids adapt,
    // odd ids evaluate.
    TrajectoryDataset adapt_ds, eval_ds;
    if (c.dataset.empty()) {
      adapt_ds =
          generate(c.target, c.scenes, RandomStream(c.target.seed).child(0xAD));
      eval_ds =
          generate(c.target, c.scenes, RandomStream(c.target.seed).child(0xE5));
    } else {
      TrajectoryDataset ds = ingest(c.dataset, c.target.dt);
      adapt_ds.dt = eval_ds.dt = ds.dt;
      adapt_ds.provenance = eval_ds.provenance = ds.provenance;
      for (AgentTrack& tr : ds.tracks)
        ((tr.scene_id % 2 == 0) ? adapt_ds : eval_ds)
            .tracks.push_back(std::move(tr));
      require(!adapt_ds.tracks.empty() && !eval_ds.tracks.empty(),
              "evaluate: scene-parity split needs both even scene ids (adapt) "
              "and odd scene ids (evaluate)");
    }
    std::vector<SceneWindow> adapt_ws =
        extract_windows(adapt_ds, c.eval.history_len, c.eval.horizon);
    std::vector<AgentWindows> eval_agents =
        extract_agent_windows(eval_ds, c.eval.history_len, c.eval.horizon);
    std::vector<CurvePoint> curve = offline_curve(
        ck.state.params, adapt_ws, eval_agents, c.eval, rng.child(0xE0));

    atomic_write_text((dir / "curve.csv").string(), curve_csv(curve, hash));
    const MetricsReport& last = curve.back().report;
    atomic_write_text((dir / "metrics.json").string(),
                      metrics_json(last, hash).dump(2) + "\n");
    atomic_write_text((dir / "calibration.csv").string(),
                      calibration_csv(last, hash));
    std::printf(
        "offline curve over %zu budgets: ade %.4g -> %.4g, ece %.4g -> %.4g "
        "(%ld agents) -> %s\n",
        curve.size(), curve.front().report.ade.value, last.ade.value,
        curve.front().report.ece, last.ece, last.agents,
        (dir / "curve.csv").c_str());
    return 0;
  }

  // Online protocol: per-agent streaming, with a frozen-prior baseline run
  // under the identical random stream so the comparison is paired.
  TrajectoryDataset ds = domain_data(c, c.target);
  std::vector<OnlinePoint> ours =
      online_curve(ck.state.params, ds, c.eval, rng.child(0xE1), false);
  std::vector<OnlinePoint> k0 =
      online_curve(ck.state.params, ds, c.eval, rng.child(0xE1), true);
  atomic_write_text((dir / "online_ours.csv").string(), online_csv(ours, hash));
  atomic_write_text((dir / "online_k0.csv").string(), online_csv(k0, hash));
  std::printf(
      "online curve over %zu checkpoints (%ld agents): ade %.4g -> %.4g, "
      "frozen baseline %.4g -> %.4g -> %s\n",
      ours.size(), ours.front().agents, ours.front().ade, ours.back().ade,
      k0.front().ade, k0.back().ade, (dir / "online_ours.csv").c_str());
  return 0;
}

// Rows of a comma-separated report, comments stripped; the config hash comment
// is handed back so plots inherit the hash of the file they render.
struct CsvReport {
  std::string hash;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

CsvReport parse_csv_report(const std::string& path, const std::string& text) {
  CsvReport r;
  std::istringstream is(text);
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# config_hash=";
      if (line.rfind(tag, 0) == 0) r.hash = line.substr(tag.size());
      continue;
    }
    std::vector<std::string> toks = detail::record_tokens(line);
    if (r.header.empty()) {
      r.header = std::move(toks);
      continue;
    }
    std::vector<double> row;
    for (const std::string& t : toks) {
      double v = 0.0;
      if (!detail::parse_double(t, v))
        throw IoError(path + ":" + std::to_string(line_no) +
                      ": malformed value '" + t + "'");
      row.push_back(v);
    }
    if (row.size() != r.header.size())
      throw IoError(path + ":" + std::to_string(line_no) +
                    ": expected " + std::to_string(r.header.size()) +
                    " columns");
    r.rows.push_back(std::move(row));
  }
  if (r.header.empty()) throw IoError(path + ": no header row");
  return r;
}

long column_of(const CsvReport& r, const std::string& name,
               const std::string& path) {
  for (std::size_t i = 0; i < r.header.size(); ++i)
    if (r.header[i] == name) return static_cast<long>(i);
  throw IoError(path + ": missing column '" + name + "'");
}

std::string stamp_hash(std::string svg, const std::string& hash) {
  const std::string tag = "<svg ";
  const std::size_t pos = svg.find(tag);
  if (pos != std::string::npos)
    svg.insert(pos + tag.size(), "data-config-hash=\"" + hash + "\" ");
  return svg;
}

void write_svg(const std::filesystem::path& path, const std::string& svg,
               const std::string& hash) {
  atomic_write_text(path.string(), stamp_hash(svg, hash));
  std::printf("wrote %s\n", path.c_str());
}

void plot_metric_curve(const std::filesystem::path& dir,
                       const std::string& stem, const CsvReport& r,
                       const std::string& metric, bool band,
                       const std::string& hash) {
  PlotSeries s;
  s.label = stem;
  const long xi = column_of(r, "updates", stem);
  const long yi = column_of(r, metric, stem);
  const long li = band ? column_of(r, metric + "_lo", stem) : -1;
  const long hi = band ? column_of(r, metric + "_hi", stem) : -1;
  for (const std::vector<double>& row : r.rows) {
    s.x.push_back(row[xi]);
    s.y.push_back(row[yi]);
    if (band) {
      s.lo.push_back(row[li]);
      s.hi.push_back(row[hi]);
    }
  }
  PlotOptions opts;
  opts.title = metric + " vs adaptation updates";
  opts.xlabel = "updates";
  opts.ylabel = metric;
  write_svg(dir / (stem + "_" + metric + ".svg"),
            line_chart_svg({s}, opts), hash);
}

void plot_one(const ExperimentConfig& c, const std::string& cli_hash,
              const std::string& path) {
  const std::filesystem::path dir = out_dir(c);
  const std::string text = read_text_file(path);
  const std::string stem = std::filesystem::path(path).stem().string();

  if (!text.empty() && text[0] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ": " + e.what());
    }
    std::vector<CalibrationPoint> pts;
    for (const nlohmann::json& p : j.value("calibration", nlohmann::json::array()))
      pts.push_back({p.value("level", 0.0), p.value("coverage", 0.0)});
    if (pts.empty()) throw IoError(path + ": no calibration curve to plot");
    const std::string hash = j.value("config_hash", cli_hash);
    write_svg(dir / (stem + "_calibration.svg"),
              calibration_svg({{stem, pts}}), hash);
    return;
  }

  CsvReport r = parse_csv_report(path, text);
  const std::string hash = r.hash.empty() ? cli_hash : r.hash;
  if (r.header == std::vector<std::string>{"level", "coverage"}) {
    std::vector<CalibrationPoint> pts;
    for (const std::vector<double>& row : r.rows)
      pts.push_back({row[0], row[1]});
    write_svg(dir / (stem + ".svg"), calibration_svg({{stem, pts}}), hash);
    return;
  }
  if (!r.header.empty() && r.header[0] == "updates") {
    const bool band =
        std::find(r.header.begin(), r.header.end(), "ade_lo") != r.header.end();
    for (const char* metric : {"ade", "fde", "nll"})
      plot_metric_curve(dir, stem, r, metric, band, hash);
    if (band) plot_metric_curve(dir, stem, r, "ece", false, hash);
    return;
  }
  throw IoError(path + ": unrecognized report layout");
}

int cmd_plot(const ExperimentConfig& c, const std::string& hash,
             const std::vector<std::string>& reports) {
  if (reports.empty())
    throw ConfigError("plot: at least one report file is required");
  for (const std::string& path : reports) plot_one(c, hash, path);
  return 0;
}

int cmd_gradcheck(const ExperimentConfig& c, const std::string& hash,
                  double tol) {
  const std::filesystem::path dir = out_dir(c);
  TrajectoryDataset ds = domain_data(c, c.source);
  std::vector<SceneWindow> ws =
      extract_windows(ds, c.eval.history_len, c.eval.horizon);
  std::vector<Episode> eps =
      training_episodes(ws, c.segment_len, c.anchor, c.train.episode);

  GradCheckReport rep =
      gradient_check(initial_state(c).params, eps.front(), c.train.episode,
                     RandomStream(c.seed).child(0x6C));

  nlohmann::json j;
  j["config_hash"] = hash;
  j["tolerance"] = tol;
  j["worst"] = rep.worst;
  j["worst_name"] = rep.worst_name;
  nlohmann::json entries = nlohmann::json::array();
  for (const GradCheckEntry& e : rep.entries)
    entries.push_back({{"name", e.name},
                       {"group", e.group},
                       {"max_rel_err", e.max_rel_err}});
  j["entries"] = std::move(entries);
  atomic_write_text((dir / "gradcheck.json").string(), j.dump(2) + "\n");

  std::printf("gradcheck worst relative error %.3e at %s (tolerance %.1e)\n",
              rep.worst, rep.worst_name.c_str(), tol);
  if (rep.worst > tol)
    throw NumericalError("gradcheck: " + rep.worst_name +
                         " exceeds the tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive trajectory forecasting harness"};
  app.require_subcommand(0, 1);

  CliArgs a;
  app.add_option("-c,--config", a.config_path, "experiment config file (JSON)");
  app.add_option("--set", a.overrides,
                 "override one config key, dotted.path=value (repeatable)")
      ->allow_extra_args(false);
  app.add_flag("--print-config", a.print_config,
               "print the fully resolved config and exit");

  CLI::App* gen = app.add_subcommand(
      "generate", "write synthetic source and target datasets");
  CLI::App* tr = app.add_subcommand(
      "train", "meta-train the predictor on the source domain");
  CLI::App* ad = app.add_subcommand(
      "adapt", "adapt a trained model to target-domain data");
  CLI::App* ev = app.add_subcommand(
      "evaluate", "run the offline or online evaluation protocol");
  CLI::App* pl =
      app.add_subcommand("plot", "render report files to SVG charts");
  pl->add_option("reports", a.reports, "metric or calibration report files")
      ->required();
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "audit analytic gradients against finite differences");
  gc->add_option("--tol", a.tol, "maximum relative error tolerated");
  for (CLI::App* sub : {gen, tr, ad, ev, pl, gc}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = parse_config(raw_config(a));
    const std::string hash = config_hash(cfg);
    if (a.print_config) {
      std::printf("%s\n", resolved_config(cfg).dump(2).c_str());
      return 0;
    }
    if (app.got_subcommand(gen)) return cmd_generate(cfg, hash);
    if (app.got_subcommand(tr)) return cmd_train(cfg, hash);
    if (app.got_subcommand(ad)) return cmd_adapt(cfg, hash);
    if (app.got_subcommand(ev)) return cmd_evaluate(cfg, hash);
    if (app.got_subcommand(pl)) return cmd_plot(cfg, hash, a.reports);
    if (app.got_subcommand(gc)) return cmd_gradcheck(cfg, hash, a.tol);
    std::fputs(app.help().c_str(), stderr);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const InvalidInput& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
