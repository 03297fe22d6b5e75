#ifndef EVISURRO_TRAINING_HPP_
#define EVISURRO_TRAINING_HPP_

// Fitting the evidential network on the training split, plus the
// checkpoint format and original-unit prediction helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evisurro/container.hpp"
#include "evisurro/data.hpp"
#include "evisurro/errors.hpp"
#include "evisurro/evidential.hpp"
#include "evisurro/network.hpp"
#include "evisurro/numeric.hpp"

namespace evisurro {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  LossWeights weights;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  bool valid() const {
    return epochs > 0 && batch_size > 0 && learning_rate > 0.0 && adam_beta1 > 0.0 &&
           adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0 &&
           weights.valid();
  }
};

// Global min-max map of training targets onto [-1, 1].
struct NormalizationTransform {
  double y_min = -1.0;
  double y_max = 1.0;

  double half_range() const { return 0.5 * (y_max - y_min); }
  double normalize(double y) const { return (y - y_min) / half_range() - 1.0; }
  double denormalize(double z) const { return y_min + (z + 1.0) * half_range(); }
  // Variances scale with the square of the affine factor.
  double denormalize_var(double v) const { return v * half_range() * half_range(); }

  static NormalizationTransform fit(const std::vector<const EnsembleMember*>& members) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto* m : members)
      for (double v : m->field) {
        if (!std::isfinite(v))
          throw DataError("member " + std::to_string(m->member_id) + ": non-finite target");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    if (!(hi > lo)) throw DataError("training targets are constant; cannot normalize");
    return {lo, hi};
  }
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  void reset(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    step = 0;
  }
};

// One bias-corrected Adam update.
inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state, const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient size mismatch");
  if (state.m.size() != params.size()) state.reset(params.size());
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

struct EpochRecord {
  std::uint64_t epoch = 0;
  double nll = 0.0;
  double reg = 0.0;
  double u = 0.0;
  double total = 0.0;
};

struct Checkpoint {
  EvidentialNet net;
  NormalizationTransform transform;
  TrainConfig train_config;
  std::vector<EpochRecord> history;
  std::vector<ParamRange> param_ranges;
  std::vector<std::uint64_t> train_ids;
  AdamState adam;

  std::vector<double> loss_history() const {
    std::vector<double> out;
    for (const auto& r : history) out.push_back(r.total);
    return out;
  }
  const GridShape& grid_shape() const { return net.config().grid_shape; }

  // Maps raw parameters onto [-1, 1] per dimension.
  std::vector<double> normalize_input(std::span<const double> x) const {
    if (x.size() != param_ranges.size())
      throw ShapeError("expected " + std::to_string(param_ranges.size()) + " parameters, got " +
                       std::to_string(x.size()));
    std::vector<double> out(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      const auto& r = param_ranges[k];
      out[k] = 2.0 * (x[k] - r.lo) / (r.hi - r.lo) - 1.0;
    }
    return out;
  }

  // Evidential field in normalized target units.
  EvidentialField predict(std::span<const double> x) const {
    return net.forward(normalize_input(x));
  }
};

// Mean, aleatoric and epistemic grids in original units.
struct FieldSummary {
  GridShape shape;
  std::vector<double> mean;
  std::vector<double> aleatoric;
  std::vector<double> epistemic;
};

inline FieldSummary summarize_field(const Checkpoint& ckpt, const EvidentialField& f) {
  FieldSummary s{f.shape, {}, {}, {}};
  s.mean.resize(f.size());
  s.aleatoric.resize(f.size());
  s.epistemic.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    s.mean[i] = ckpt.transform.denormalize(predict_mean(f.params[i]));
    s.aleatoric[i] = ckpt.transform.denormalize_var(aleatoric(f.params[i]));
    s.epistemic[i] = ckpt.transform.denormalize_var(epistemic(f.params[i]));
  }
  return s;
}

inline FieldSummary predict_summary(const Checkpoint& ckpt, std::span<const double> x) {
  return summarize_field(ckpt, ckpt.predict(x));
}

// Raw Student-t intervals per element, mapped to original units.
inline std::vector<RawInterval> raw_intervals(const Checkpoint& ckpt, const EvidentialField& f,
                                              double delta) {
  std::vector<RawInterval> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const RawInterval r = raw_interval(f.params[i], delta);
    out[i] = {ckpt.transform.denormalize(r.lo), ckpt.transform.denormalize(r.hi), r.confidence};
  }
  return out;
}

inline std::vector<RawInterval> predict_raw_intervals(const Checkpoint& ckpt,
                                                      std::span<const double> x, double delta) {
  return raw_intervals(ckpt, ckpt.predict(x), delta);
}

// ---------------------------------------------------------------------------
// Training loop

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline void check_finite(double v, std::size_t epoch, std::size_t batch,
                         std::span<const std::uint64_t> ids) {
  if (std::isfinite(v)) return;
  std::ostringstream os;
  os << "non-finite loss in epoch " << epoch << ", batch " << batch << " (members";
  for (auto id : ids) os << " " << id;
  os << ")";
  throw NumericalError(os.str());
}

}  // namespace detail

// Runs `train_config.epochs` further epochs on `ckpt`, appending to its
// history.  Used both for fresh fits and for resuming.
inline void continue_training(Checkpoint& ckpt, const EnsembleDataset& ds,
                              const EpochCallback& on_epoch = {}) {
  const TrainConfig& cfg = ckpt.train_config;
  if (!cfg.valid()) throw DomainError("invalid TrainConfig");
  const auto train = ds.members_in(Split::train);
  if (train.empty()) throw DataError("dataset has no training members");
  if (ds.grid_shape != ckpt.grid_shape())
    throw ShapeError("dataset grid " + ds.grid_shape.to_string() + " does not match network grid " +
                     ckpt.grid_shape().to_string());

  EvidentialNet& net = ckpt.net;
  const std::size_t n = net.grid_size();
  const std::size_t d = net.config().input_dim;
  const std::size_t members = train.size();

  // Inputs and normalized targets, one column per member.
  Eigen::MatrixXd inputs(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(members));
  Eigen::MatrixXd targets(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(members));
  std::vector<std::uint64_t> ids(members);
  for (std::size_t j = 0; j < members; ++j) {
    const auto xn = ckpt.normalize_input(train[j]->params);
    for (std::size_t k = 0; k < d; ++k) inputs(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = xn[k];
    for (std::size_t i = 0; i < n; ++i)
      targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = ckpt.transform.normalize(train[j]->field[i]);
    ids[j] = train[j]->member_id;
  }

  // Shuffle stream: independent of init randomness, advanced once per
  // epoch so a resumed run continues the same sequence.
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x5348554646ULL));
  shuffle_rng.discard(ckpt.history.size());

  std::vector<std::size_t> order(members);
  std::vector<double> grad(net.parameter_count());
  std::vector<double> member_nll, member_reg, member_u, member_tot;
  std::vector<double> el_nll(n), el_reg(n), el_u(n), el_tot(n);

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const std::uint64_t epoch = ckpt.history.size() + 1;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 epoch_rng(shuffle_rng());
    for (std::size_t i = members; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(epoch_rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    member_nll.clear();
    member_reg.clear();
    member_u.clear();
    member_tot.clear();

    for (std::size_t start = 0, batch = 0; start < members; start += cfg.batch_size, ++batch) {
      const std::size_t bsz = std::min(cfg.batch_size, members - start);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(bsz));
      std::vector<std::uint64_t> batch_ids(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        x.col(static_cast<Eigen::Index>(b)) = inputs.col(static_cast<Eigen::Index>(order[start + b]));
        batch_ids[b] = ids[order[start + b]];
      }
      EvidentialNet::Cache cache;
      const Eigen::MatrixXd z = net.forward_raw(x, &cache);
      Eigen::MatrixXd dz(z.rows(), z.cols());
      const double scale = 1.0 / static_cast<double>(n * bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto col = static_cast<Eigen::Index>(b);
        const auto tcol = static_cast<Eigen::Index>(order[start + b]);
        for (std::size_t i = 0; i < n; ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          const auto ni = static_cast<Eigen::Index>(n);
          const EvidentialParams m =
              apply_head(z(ii, col), z(ni + ii, col), z(2 * ni + ii, col), z(3 * ni + ii, col));
          const double y = targets(ii, tcol);
          // Overflowed heads (softplus underflow to 0, inf, nan) have no loss.
          if (!(std::isfinite(m.gamma) && m.nu > 0.0 && m.alpha_shape > 1.0 && m.beta_scale > 0.0 &&
                std::isfinite(m.nu) && std::isfinite(m.alpha_shape) && std::isfinite(m.beta_scale)))
            detail::check_finite(std::nan(""), epoch, batch, batch_ids);
          const LossTerms t = loss_terms(m, y, cfg.weights);
          el_nll[i] = t.nll;
          el_reg[i] = t.reg;
          el_u[i] = t.u;
          el_tot[i] = t.total;
          const ParamGrad g = loss_gradients(m, y, cfg.weights);
          for (Eigen::Index c = 0; c < 4; ++c) dz(c * ni + ii, col) = g[static_cast<std::size_t>(c)] * scale;
        }
        member_nll.push_back(mean(el_nll));
        member_reg.push_back(mean(el_reg));
        member_u.push_back(mean(el_u));
        member_tot.push_back(mean(el_tot));
        detail::check_finite(member_tot.back(), epoch, batch, batch_ids);
      }
      EvidentialNet::head_backward(z, dz, n);
      std::fill(grad.begin(), grad.end(), 0.0);
      net.backward_raw(cache, std::move(dz), grad);
      for (double g : grad)
        if (!std::isfinite(g)) detail::check_finite(g, epoch, batch, batch_ids);
      adam_step(net.parameters(), grad, ckpt.adam, cfg);
    }
    EpochRecord rec{epoch, mean(member_nll), mean(member_reg), mean(member_u), mean(member_tot)};
    ckpt.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
}

// Fresh fit on the training split.
inline Checkpoint fit(const EnsembleDataset& ds, NetConfig net_config,
                      const TrainConfig& train_config, const EpochCallback& on_epoch = {}) {
  const auto train = ds.members_in(Split::train);
  if (train.empty()) throw DataError("dataset has no training members");
  net_config.input_dim = ds.dim();
  net_config.grid_shape = ds.grid_shape;
  Checkpoint ckpt;
  ckpt.net = EvidentialNet::init(net_config);
  ckpt.transform = NormalizationTransform::fit(train);
  ckpt.train_config = train_config;
  ckpt.param_ranges = ds.param_ranges;
  for (const auto* m : train) ckpt.train_ids.push_back(m->member_id);
  ckpt.adam.reset(ckpt.net.parameter_count());
  continue_training(ckpt, ds, on_epoch);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: section-tagged container plus a "<path>.manifest" text
// sidecar describing the contents.

inline std::string encode_checkpoint(const Checkpoint& c) {
  container::Sections s;
  {
    const auto& nc = c.net.config();
    container::Writer w;
    w.u64(nc.input_dim);
    w.u64(nc.hidden_sizes.size());
    for (auto h : nc.hidden_sizes) w.u64(h);
    w.u64(nc.grid_shape.rank());
    for (auto dim : nc.grid_shape.dims) w.u64(dim);
    w.u64(nc.seed);
    s.add("NETCFG", w);
  }
  {
    container::Writer w;
    w.f64s(c.net.parameters());
    s.add("WEIGHTS", w);
  }
  {
    container::Writer w;
    w.f64(c.transform.y_min);
    w.f64(c.transform.y_max);
    s.add("NORM", w);
  }
  {
    container::Writer w;
    w.u64(c.param_ranges.size());
    for (const auto& r : c.param_ranges) {
      w.str(r.name);
      w.f64(r.lo);
      w.f64(r.hi);
    }
    s.add("PARAMS", w);
  }
  {
    const auto& t = c.train_config;
    container::Writer w;
    w.u64(t.epochs);
    w.u64(t.batch_size);
    w.f64(t.learning_rate);
    w.f64(t.weights.lambda_reg);
    w.f64(t.weights.xi_reg);
    w.u64(t.seed);
    w.f64(t.adam_beta1);
    w.f64(t.adam_beta2);
    w.f64(t.adam_eps);
    s.add("TRAINCFG", w);
  }
  {
    container::Writer w;
    w.u64(c.history.size());
    for (const auto& r : c.history) {
      w.u64(r.epoch);
      w.f64(r.nll);
      w.f64(r.reg);
      w.f64(r.u);
      w.f64(r.total);
    }
    s.add("HISTORY", w);
  }
  {
    container::Writer w;
    w.u64s(c.train_ids);
    s.add("TRAINIDS", w);
  }
  {
    container::Writer w;
    w.u64(c.adam.step);
    w.f64s(c.adam.m);
    w.f64s(c.adam.v);
    s.add("ADAM", w);
  }
  return container::encode(s);
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& path) {
  const auto s = container::decode(bytes, path);
  Checkpoint c;
  NetConfig nc;
  {
    container::Reader r(s.require("NETCFG", path), path + " NETCFG");
    nc.input_dim = r.u64();
    nc.hidden_sizes.resize(r.u64());
    for (auto& h : nc.hidden_sizes) h = r.u64();
    nc.grid_shape.dims.resize(r.u64());
    for (auto& dim : nc.grid_shape.dims) dim = r.u64();
    nc.seed = r.u64();
    r.expect_done();
  }
  {
    container::Reader r(s.require("WEIGHTS", path), path + " WEIGHTS");
    auto params = r.f64s();
    r.expect_done();
    try {
      c.net = EvidentialNet::from_parameters(nc, std::move(params));
    } catch (const std::exception& e) {
      throw DataError(path + ": " + e.what());
    }
  }
  {
    container::Reader r(s.require("NORM", path), path + " NORM");
    c.transform.y_min = r.f64();
    c.transform.y_max = r.f64();
    r.expect_done();
  }
  {
    container::Reader r(s.require("PARAMS", path), path + " PARAMS");
    c.param_ranges.resize(r.u64());
    for (auto& p : c.param_ranges) {
      p.name = r.str();
      p.lo = r.f64();
      p.hi = r.f64();
    }
    r.expect_done();
  }
  {
    container::Reader r(s.require("TRAINCFG", path), path + " TRAINCFG");
    auto& t = c.train_config;
    t.epochs = r.u64();
    t.batch_size = r.u64();
    t.learning_rate = r.f64();
    t.weights.lambda_reg = r.f64();
    t.weights.xi_reg = r.f64();
    t.seed = r.u64();
    t.adam_beta1 = r.f64();
    t.adam_beta2 = r.f64();
    t.adam_eps = r.f64();
    r.expect_done();
  }
  {
    container::Reader r(s.require("HISTORY", path), path + " HISTORY");
    c.history.resize(r.u64());
    for (auto& h : c.history) {
      h.epoch = r.u64();
      h.nll = r.f64();
      h.reg = r.f64();
      h.u = r.f64();
      h.total = r.f64();
    }
    r.expect_done();
  }
  {
    container::Reader r(s.require("TRAINIDS", path), path + " TRAINIDS");
    c.train_ids = r.u64s();
    r.expect_done();
  }
  {
    container::Reader r(s.require("ADAM", path), path + " ADAM");
    c.adam.step = r.u64();
    c.adam.m = r.f64s();
    c.adam.v = r.f64s();
    r.expect_done();
  }
  return c;
}

inline std::string checkpoint_manifest(const Checkpoint& c) {
  std::ostringstream os;
  const auto& nc = c.net.config();
  os << "# evisurro checkpoint\n";
  os << "format_version = " << container::kFormatVersion << "\n";
  os << "kind = checkpoint\n";
  os << "input_dim = " << nc.input_dim << "\n";
  os << "hidden_sizes =";
  for (auto h : nc.hidden_sizes) os << " " << h;
  os << "\n";
  os << "grid_shape = " << nc.grid_shape.to_string() << "\n";
  os << "net_seed = " << nc.seed << "\n";
  os << "parameter_count = " << c.net.parameter_count() << "\n";
  os << "y_min = " << detail::fmt17(c.transform.y_min) << "\n";
  os << "y_max = " << detail::fmt17(c.transform.y_max) << "\n";
  for (std::size_t k = 0; k < c.param_ranges.size(); ++k)
    os << "param." << k << " = " << c.param_ranges[k].name << " "
       << detail::fmt17(c.param_ranges[k].lo) << " " << detail::fmt17(c.param_ranges[k].hi) << "\n";
  const auto& t = c.train_config;
  os << "epochs_trained = " << c.history.size() << "\n";
  os << "batch_size = " << t.batch_size << "\n";
  os << "learning_rate = " << detail::fmt17(t.learning_rate) << "\n";
  os << "lambda = " << detail::fmt17(t.weights.lambda_reg) << "\n";
  os << "xi = " << detail::fmt17(t.weights.xi_reg) << "\n";
  os << "train_seed = " << t.seed << "\n";
  os << "train_members = " << c.train_ids.size() << "\n";
  if (!c.history.empty()) os << "final_loss = " << detail::fmt17(c.history.back().total) << "\n";
  return os.str();
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  container::write_file(path, encode_checkpoint(c));
  container::write_file(path.string() + ".manifest", checkpoint_manifest(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(container::read_file(path), path.string());
}

}  // namespace evisurro

#endif  // EVISURRO_TRAINING_HPP_
