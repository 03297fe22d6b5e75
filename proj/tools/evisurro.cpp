// evisurro: simulate | train | calibrate | evaluate | predict | serve
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evisurro/conformal.hpp"
#include "evisurro/data.hpp"
#include "evisurro/metrics.hpp"
#include "evisurro/server.hpp"
#include "evisurro/training.hpp"

namespace fs = std::filesystem;
using namespace evisurro;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

std::vector<double> default_levels() {
  std::vector<double> v;
  for (int k = 1; k <= 30; ++k) v.push_back(k / 100.0);
  return v;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
  if (!out) throw DataError("write failed: " + p.string());
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw DataError(dir.string() + " is not empty (use --force to overwrite)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

std::string fmt(double v) { return detail::fmt17(v); }

std::string g_resolved_config;

struct SimulateOpts {
  std::string grid = "32x32";
  std::size_t n_train = 128, n_cal = 200, n_test = 100;
  std::uint64_t seed = 0;
  std::uint64_t simulator_seed = 0;
  std::string noise = "heteroscedastic";
  int sparse_dim = -1;
  double sparse_lo = 0.0, sparse_hi = 0.0;
  std::string out;
  bool force = false;
};

struct TrainOpts {
  std::string data, out, resume, log;
  std::vector<std::size_t> hidden{64, 128, 256};
  std::size_t epochs = 300, batch = 16;
  double lr = 1e-3, lambda = 0.01, xi = 0.05;
  std::uint64_t seed = 0, net_seed = 0;
  bool quiet = false;
};

struct CalibrateOpts {
  std::string checkpoint, data, out;
  double delta = 0.1;
  bool pooled = false;
  std::string tail_rule = "split";
  std::vector<double> alphas;
};

struct EvaluateOpts {
  std::string checkpoint, data, table, out;
  std::vector<double> levels;
  std::optional<double> data_range;
  bool force = false;
};

struct PredictOpts {
  std::string checkpoint, table, out;
  std::vector<double> params;
  double level = 0.9;
  bool calibrated = false;
};

struct ServeOpts {
  std::string checkpoint, table, host = "127.0.0.1", cors;
  int port = 8080;
};

int run_simulate(const SimulateOpts& o) {
  SimulatorSpec spec;
  spec.grid_shape = GridShape::parse(o.grid);
  spec.noise_model = parse_noise_model(o.noise);
  spec.seed = o.simulator_seed;
  std::optional<SparseRegion> sparse;
  if (o.sparse_dim >= 0) {
    if (!(o.sparse_lo <= o.sparse_hi)) throw DomainError("--sparse-lo must not exceed --sparse-hi");
    sparse = SparseRegion{static_cast<std::size_t>(o.sparse_dim), o.sparse_lo, o.sparse_hi};
  }
  const auto ds = generate_dataset(spec, o.n_train, o.n_cal, o.n_test, o.seed, sparse);
  prepare_dir(o.out, o.force);
  save_dataset(ds, o.out);
  std::cout << "members " << ds.members.size() << "\n"
            << "train " << ds.count(Split::train) << "\n"
            << "calibration " << ds.count(Split::calibration) << "\n"
            << "test " << ds.count(Split::test) << "\n";
  return 0;
}

int run_train(const TrainOpts& o) {
  const auto ds = load_dataset(o.data);
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.learning_rate = o.lr;
  tc.weights = {o.lambda, o.xi};
  tc.seed = o.seed;
  if (!tc.valid()) throw DomainError("invalid training configuration");

  const std::string log_path = o.log.empty() ? o.out + ".log" : o.log;
  std::ofstream log(log_path, o.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot open log " + log_path);
  {
    std::istringstream cfg(g_resolved_config);
    for (std::string line; std::getline(cfg, line);) log << "# " << line << "\n";
  }
  auto on_epoch = [&](const EpochRecord& r) {
    std::ostringstream os;
    os << "epoch=" << r.epoch << " nll=" << fmt(r.nll) << " reg=" << fmt(r.reg)
       << " u=" << fmt(r.u) << " total=" << fmt(r.total) << "\n";
    log << os.str();
    if (!o.quiet) std::cout << os.str();
  };

  Checkpoint ckpt;
  if (!o.resume.empty()) {
    ckpt = load_checkpoint(o.resume);
    const auto train = ds.members_in(Split::train);
    std::vector<std::uint64_t> ids;
    for (const auto* m : train) ids.push_back(m->member_id);
    if (ids != ckpt.train_ids)
      throw DataError("resume: dataset training split differs from the checkpoint's");
    tc.seed = ckpt.train_config.seed;
    ckpt.train_config = tc;
    continue_training(ckpt, ds, on_epoch);
  } else {
    NetConfig nc;
    nc.hidden_sizes = o.hidden;
    nc.seed = o.net_seed;
    ckpt = fit(ds, nc, tc, on_epoch);
  }
  save_checkpoint(ckpt, o.out);
  std::cout << "wrote " << o.out << " (" << ckpt.history.size() << " epochs, final total "
            << fmt(ckpt.history.back().total) << ")\n";
  return 0;
}

int run_calibrate(const CalibrateOpts& o) {
  const auto ckpt = load_checkpoint(o.checkpoint);
  const auto ds = load_dataset(o.data);
  const auto table = build_table(ckpt, ds, o.delta, {o.pooled, parse_tail_rule(o.tail_rule)});
  save_table(table, o.out);
  const std::size_t n_eff = table.block_size();
  std::cout << "calibration members n = " << table.n << ", scores per element = " << n_eff
            << "\nmax attainable confidence = " << fmt(table.max_attainable_confidence())
            << " (tail rule " << to_string(table.tail_rule) << ")\n";
  const auto alphas = o.alphas.empty() ? std::vector<double>{o.delta} : o.alphas;
  for (double a : alphas) {
    const MiscoverageLevel lv(a);
    const std::size_t k = conformal_rank(n_eff, table.side_level(lv));
    if (k > n_eff)
      std::cout << "warning: alpha=" << fmt(a) << " unattainable (rank " << k << " > n " << n_eff
                << "); intervals at this level are unbounded\n";
    else
      std::cout << "alpha=" << fmt(a) << " attainable (rank " << k << " of " << n_eff << ")\n";
  }
  return 0;
}

std::string grid_text(const std::vector<double>& v, const GridShape& g) {
  std::ostringstream os;
  const std::size_t w = g.dims.back();
  for (std::size_t i = 0; i < v.size(); ++i)
    os << fmt(v[i]) << ((i + 1) % w == 0 ? "\n" : " ");
  return os.str();
}

int run_evaluate(const EvaluateOpts& o) {
  const auto ckpt = load_checkpoint(o.checkpoint);
  const auto ds = load_dataset(o.data);
  std::optional<CalibrationTable> table;
  if (!o.table.empty()) table = load_table(o.table);
  std::vector<MiscoverageLevel> levels;
  for (double a : o.levels.empty() ? default_levels() : o.levels) levels.emplace_back(a);

  const auto rep = coverage_audit(ckpt, table ? &*table : nullptr, ds, levels);
  prepare_dir(o.out, o.force);
  const fs::path out(o.out);
  write_text(out / "coverage.txt", coverage_records(rep));
  write_text(out / "coverage_summary.txt", coverage_summary(rep));
  fs::create_directories(out / "coverage_maps");
  for (const auto& r : rep.rows) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%.4f.txt", to_string(r.kind), 1.0 - r.level);
    write_text(out / "coverage_maps" / name, grid_text(r.element_coverage, ds.grid_shape));
  }

  // Accuracy and uncertainty quality on the test split.
  const auto test = ds.members_in(Split::test);
  const double global_range =
      o.data_range ? *o.data_range : ckpt.transform.y_max - ckpt.transform.y_min;
  std::vector<double> psnr_g, psnr_m, ssim_g;
  std::vector<std::vector<double>> epi, ale, total, err, sq_err, noise_var;
  bool have_noise = true;
  for (const auto* m : test) {
    const auto s = predict_summary(ckpt, m->params);
    const auto [lo_it, hi_it] = std::minmax_element(m->field.begin(), m->field.end());
    const double member_range = *hi_it - *lo_it;
    psnr_g.push_back(psnr(s.mean, m->field, global_range));
    if (member_range > 0) psnr_m.push_back(psnr(s.mean, m->field, member_range));
    bool ssim_ok = true;
    for (auto dim : ds.grid_shape.dims) ssim_ok = ssim_ok && dim >= SsimOptions{}.window;
    if (ssim_ok) ssim_g.push_back(ssim(s.mean, m->field, ds.grid_shape, global_range));
    std::vector<double> e(s.mean.size()), e2(s.mean.size()), t(s.mean.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      e[i] = std::abs(s.mean[i] - m->field[i]);
      e2[i] = e[i] * e[i];
      t[i] = s.aleatoric[i] + s.epistemic[i];
    }
    epi.push_back(s.epistemic);
    ale.push_back(s.aleatoric);
    total.push_back(std::move(t));
    err.push_back(std::move(e));
    sq_err.push_back(std::move(e2));
    if (m->truth_noise_var)
      noise_var.push_back(*m->truth_noise_var);
    else
      have_noise = false;
  }
  std::ostringstream mr;
  auto record = [&](const std::string& metric, const std::string& extra, double v) {
    mr << "metric=" << metric << extra << " value=" << fmt(v) << "\n";
  };
  record("psnr", " range=global", mean(psnr_g));
  if (!psnr_m.empty()) record("psnr", " range=member", mean(psnr_m));
  if (!ssim_g.empty()) record("ssim", " range=global", mean(ssim_g));
  auto corr = [&](const char* what, const std::vector<std::vector<double>>& u,
                  const std::vector<std::vector<double>>& e) {
    const auto c = correlation_report(u, e);
    const std::string tag = std::string(" pair=") + what;
    record("corr", tag + " level=voxel excluded=" + std::to_string(c.excluded_members), c.voxel_level);
    record("corr", tag + " level=member", c.member_level);
  };
  corr("epistemic:abs_error", epi, err);
  corr("total:abs_error", total, err);
  corr("aleatoric:sq_error", ale, sq_err);
  if (have_noise && !noise_var.empty()) corr("aleatoric:noise_var", ale, noise_var);
  write_text(out / "metrics.txt", mr.str());

  std::cout << coverage_summary(rep) << mr.str();
  return 0;
}

int run_predict(const PredictOpts& o) {
  std::optional<fs::path> tp;
  if (!o.table.empty()) tp = o.table;
  const auto bundle = ModelBundle::load(o.checkpoint, tp);
  const nlohmann::json preq = {{"params", o.params}};
  nlohmann::json ireq = preq;
  ireq["level"] = o.level;
  ireq["calibrated"] = o.calibrated;
  const auto p = predict_response(bundle, preq);
  const auto iv = interval_response(bundle, ireq);
  if (p.status != 200 || iv.status != 200) {
    const auto& bad = p.status != 200 ? p : iv;
    std::cerr << bad.body.dump() << "\n";
    return bad.status == 409 || bad.status == 422 ? kExitConfig : kExitData;
  }
  const nlohmann::json doc = {{"predict", p.body}, {"interval", iv.body}};
  if (o.out.empty())
    std::cout << doc.dump() << "\n";
  else
    write_text(o.out, doc.dump() + "\n");
  return 0;
}

int run_serve(const ServeOpts& o) {
  httplib::Server srv;
  Service service;
  ServerOptions so;
  so.host = o.host;
  so.port = o.port;
  if (!o.cors.empty()) so.cors_origin = o.cors;
  service.mount(srv, so);
  std::optional<fs::path> tp;
  if (!o.table.empty()) tp = o.table;
  service.publish(ModelBundle::load(o.checkpoint, tp));
  std::cout << "listening on " << o.host << ":" << o.port << std::endl;
  if (!srv.listen(o.host, o.port)) throw DataError("cannot listen on " + o.host + ":" + std::to_string(o.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidential surrogate with conformal calibration"};
  app.set_config("--config", "", "INI-style config file; sections name subcommands");
  app.require_subcommand(1);
  app.fallthrough();  // --config may also follow the subcommand

  SimulateOpts so;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic ensemble dataset");
  sim->add_option("--grid", so.grid, "Grid shape, e.g. 32x32 or 16x16x16")->capture_default_str();
  sim->add_option("--train", so.n_train, "Training members")->capture_default_str();
  sim->add_option("--cal", so.n_cal, "Calibration members")->capture_default_str();
  sim->add_option("--test", so.n_test, "Test members")->capture_default_str();
  sim->add_option("--seed", so.seed, "Dataset seed")->capture_default_str();
  sim->add_option("--simulator-seed", so.simulator_seed, "Simulator seed")->capture_default_str();
  sim->add_option("--noise", so.noise,
                  "none | heteroscedastic | parameter-perturbation | resolution-variants")
      ->capture_default_str();
  sim->add_option("--sparse-dim", so.sparse_dim, "Parameter index of a region kept out of training (-1: none)")
      ->capture_default_str();
  sim->add_option("--sparse-lo", so.sparse_lo, "Lower bound of the held-out region");
  sim->add_option("--sparse-hi", so.sparse_hi, "Upper bound of the held-out region");
  sim->add_option("--out", so.out, "Output dataset directory")->required();
  sim->add_flag("--force", so.force, "Replace a non-empty output directory");

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "Fit the evidential network on the training split");
  tr->add_option("--data", to.data, "Dataset directory")->required();
  tr->add_option("--out", to.out, "Checkpoint path")->required();
  tr->add_option("--resume", to.resume, "Continue from this checkpoint");
  tr->add_option("--log", to.log, "Loss log path (default <out>.log)");
  tr->add_option("--hidden", to.hidden, "Hidden layer widths")->delimiter(',')->capture_default_str();
  tr->add_option("--epochs", to.epochs, "Epochs")->capture_default_str();
  tr->add_option("--batch", to.batch, "Batch size")->capture_default_str();
  tr->add_option("--lr", to.lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--lambda", to.lambda, "Evidence regularizer weight")->capture_default_str();
  tr->add_option("--xi", to.xi, "Uncertainty regularizer weight")->capture_default_str();
  tr->add_option("--seed", to.seed, "Shuffle seed")->capture_default_str();
  tr->add_option("--net-seed", to.net_seed, "Weight initialization seed")->capture_default_str();
  tr->add_flag("--quiet", to.quiet, "Log to file only");

  CalibrateOpts co;
  auto* ca = app.add_subcommand("calibrate", "Build a conformal calibration table");
  ca->add_option("--checkpoint", co.checkpoint, "Checkpoint path")->required();
  ca->add_option("--data", co.data, "Dataset directory")->required();
  ca->add_option("--out", co.out, "Table path")->required();
  ca->add_option("--delta", co.delta, "Raw interval miscoverage for the scores")->capture_default_str();
  ca->add_flag("--pooled", co.pooled, "Share one score pool across all elements");
  ca->add_option("--tail-rule", co.tail_rule,
                 "split: alpha/2 per bound; per-side: alpha on each bound")
      ->check(CLI::IsMember({"split", "per-side"}))
      ->capture_default_str();
  ca->add_option("--alpha", co.alphas, "Miscoverage levels to check for attainability")->delimiter(',');

  EvaluateOpts eo;
  auto* ev = app.add_subcommand("evaluate", "Coverage, width and accuracy reports on the test split");
  ev->add_option("--checkpoint", eo.checkpoint, "Checkpoint path")->required();
  ev->add_option("--data", eo.data, "Dataset directory")->required();
  ev->add_option("--table", eo.table, "Calibration table (omit for raw intervals only)");
  ev->add_option("--levels", eo.levels, "Miscoverage levels (default 0.01..0.30 step 0.01)")->delimiter(',');
  ev->add_option("--data-range", eo.data_range, "PSNR/SSIM data range (default: training range)");
  ev->add_option("--out", eo.out, "Report directory")->required();
  ev->add_flag("--force", eo.force, "Replace a non-empty report directory");

  PredictOpts po;
  auto* pr = app.add_subcommand("predict", "Mean, uncertainty and interval grids as JSON");
  pr->add_option("--checkpoint", po.checkpoint, "Checkpoint path")->required();
  pr->add_option("--table", po.table, "Calibration table");
  pr->add_option("--params", po.params, "Parameter vector")->delimiter(',')->required();
  pr->add_option("--level", po.level, "Interval confidence in (0,1)")->capture_default_str();
  pr->add_flag("--calibrated", po.calibrated, "Use the calibration table");
  pr->add_option("--out", po.out, "Output JSON path (default stdout)");

  ServeOpts sv;
  auto* se = app.add_subcommand("serve", "HTTP service for the explorer");
  se->add_option("--checkpoint", sv.checkpoint, "Checkpoint path")->required();
  se->add_option("--table", sv.table, "Calibration table");
  se->add_option("--host", sv.host, "Listen address")->capture_default_str();
  se->add_option("--port", sv.port, "Listen port")->capture_default_str();
  se->add_option("--cors-origin", sv.cors, "Allowed browser origin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  // Only the active subcommand's settings.
  {
    const std::string prefix = app.get_subcommands().front()->get_name() + ".";
    std::istringstream all(app.config_to_str(true, false));
    for (std::string line; std::getline(all, line);)
      if (line.rfind(prefix, 0) == 0) g_resolved_config += line + "\n";
  }
  std::clog << "# resolved configuration\n" << g_resolved_config << std::flush;

  try {
    if (*sim) return run_simulate(so);
    if (*tr) return run_train(to);
    if (*ca) return run_calibrate(co);
    if (*ev) return run_evaluate(eo);
    if (*pr) return run_predict(po);
    if (*se) return run_serve(sv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DomainError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
