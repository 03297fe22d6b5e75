#ifndef EVISURRO_CONFORMAL_HPP_
#define EVISURRO_CONFORMAL_HPP_

// Split conformal calibration of the evidential intervals.
//
// For every grid element and calibration member the raw interval [lo, hi]
// at confidence 1 - delta yields two scores
//   E_lo = lo - y,   E_hi = y - hi,
// which are kept sorted per element.  For a per-side miscoverage a_s the
// threshold is the k-th smallest score with k = ceil((n + 1)(1 - a_s)), and
// the calibrated interval is [lo - Q_lo, hi + Q_hi].
//
// Each threshold bounds only its own tail, so with a_s = a the two misses
// can add up to 2a.  The default rule splits the budget, a_s = a/2, which
// gives coverage in [1 - a, 1 - a + 2/(n + 1)] for exchangeable data with
// distinct scores.  TailRule::per_side keeps a_s = a on both sides.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evisurro/container.hpp"
#include "evisurro/data.hpp"
#include "evisurro/errors.hpp"
#include "evisurro/evidential.hpp"
#include "evisurro/numeric.hpp"
#include "evisurro/training.hpp"

namespace evisurro {

// Target miscoverage (the conformal alpha); unrelated to the NIG shape.
class MiscoverageLevel {
 public:
  explicit MiscoverageLevel(double value) : value_(value) {
    if (!(value > 0.0 && value < 1.0))
      throw DomainError("miscoverage level must lie in (0,1), got " + std::to_string(value));
  }
  double value() const { return value_; }
  double confidence() const { return 1.0 - value_; }

 private:
  double value_;
};

struct CalibratedInterval {
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.0;   // miscoverage
  bool clamped = false; // lo' > hi' collapsed to the midpoint
};

enum class TailRule { split, per_side };

inline const char* to_string(TailRule r) { return r == TailRule::split ? "split" : "per-side"; }

inline TailRule parse_tail_rule(const std::string& s) {
  if (s == "split") return TailRule::split;
  if (s == "per-side") return TailRule::per_side;
  throw DomainError("unknown tail rule '" + s + "' (expected split or per-side)");
}

struct CalibrationTable {
  GridShape shape;
  std::size_t n = 0;     // calibration members
  double delta = 0.1;    // raw interval level used for the scores
  bool pooled = false;   // single score pool shared by all elements
  TailRule tail_rule = TailRule::split;
  // Element-major: element i owns [i*n, (i+1)*n), each block sorted
  // ascending.  In pooled mode a single sorted block of n * N scores.
  std::vector<double> lo_scores;
  std::vector<double> hi_scores;
  std::vector<std::uint64_t> member_ids;  // calibration members, ascending

  std::size_t elements() const { return shape.size(); }
  std::size_t block_size() const { return pooled ? n * elements() : n; }

  std::span<const double> lo_block(std::size_t element) const {
    const std::size_t b = block_size();
    return std::span<const double>(lo_scores).subspan(pooled ? 0 : element * b, b);
  }
  std::span<const double> hi_block(std::size_t element) const {
    const std::size_t b = block_size();
    return std::span<const double>(hi_scores).subspan(pooled ? 0 : element * b, b);
  }

  // Miscoverage given to each side for a two-sided level.
  MiscoverageLevel side_level(const MiscoverageLevel& level) const {
    return tail_rule == TailRule::split ? MiscoverageLevel(0.5 * level.value()) : level;
  }

  // Highest confidence with finite thresholds: 1 - 2/(n_eff + 1) under the
  // split rule, 1 - 1/(n_eff + 1) per side.
  double max_attainable_confidence() const {
    return 1.0 - sides() / static_cast<double>(block_size() + 1);
  }

  // Upper end of the coverage band, 1 - a + sides/(n_eff + 1).
  double coverage_upper_bound(const MiscoverageLevel& level) const {
    return std::min(1.0, level.confidence() + sides() / static_cast<double>(block_size() + 1));
  }

 private:
  double sides() const { return tail_rule == TailRule::split ? 2.0 : 1.0; }
};

struct Scores {
  double lo;
  double hi;
};

inline Scores nonconformity_scores(const RawInterval& raw, double y) {
  return {raw.lo - y, y - raw.hi};
}

// Rank of the conformal threshold among n sorted scores.  A relative slack
// of 1e-12 absorbs representation error in (n+1)(1-a) when the product is
// mathematically an integer (e.g. n = 19, a = 0.1).
inline std::size_t conformal_rank(std::size_t n, const MiscoverageLevel& level) {
  const double target = static_cast<double>(n + 1) * (1.0 - level.value());
  const double k = std::ceil(target - 1e-12 * std::max(1.0, target));
  return static_cast<std::size_t>(std::max(1.0, k));
}

struct QuantileResult {
  double value = 0.0;
  std::size_t rank = 0;
  bool attainable = true;
};

inline constexpr double kUnattainable = std::numeric_limits<double>::infinity();

// k-th smallest score, or +inf (flagged) when k > n.
inline QuantileResult finite_sample_quantile(std::span<const double> sorted_scores,
                                             const MiscoverageLevel& level) {
  if (sorted_scores.empty()) throw DomainError("finite_sample_quantile: no scores");
  const std::size_t k = conformal_rank(sorted_scores.size(), level);
  if (k > sorted_scores.size()) return {kUnattainable, k, false};
  return {sorted_scores[k - 1], k, true};
}

inline CalibratedInterval calibrate(const RawInterval& raw, double q_lo, double q_hi,
                                    const MiscoverageLevel& level) {
  CalibratedInterval c{raw.lo - q_lo, raw.hi + q_hi, level.value(), false};
  if (c.lo > c.hi) {
    const double mid = 0.5 * (c.lo + c.hi);
    c.lo = c.hi = mid;
    c.clamped = true;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Split hygiene

inline void check_disjoint(const std::vector<std::uint64_t>& a, const char* a_name,
                           const std::vector<const EnsembleMember*>& b, const char* b_name) {
  const std::set<std::uint64_t> sa(a.begin(), a.end());
  for (const auto* m : b)
    if (sa.count(m->member_id))
      throw DataError(std::string("member ") + std::to_string(m->member_id) + " appears in both " +
                      a_name + " and " + b_name +
                      " splits; calibration data must be independent of training data");
}

struct TableOptions {
  bool pooled = false;
  TailRule tail_rule = TailRule::split;
};

// Scores every calibration member against the checkpoint's raw intervals.
inline CalibrationTable build_table(const Checkpoint& ckpt, const EnsembleDataset& ds,
                                    double delta, TableOptions opts = {}) {
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("build_table: delta must lie in (0,1)");
  const auto cal = ds.members_in(Split::calibration);
  if (cal.empty()) throw DataError("dataset has no calibration split");
  if (ds.grid_shape != ckpt.grid_shape())
    throw ShapeError("dataset grid does not match checkpoint grid");
  check_disjoint(ckpt.train_ids, "training", cal, "calibration");

  const std::size_t n = cal.size();
  const std::size_t N = ds.grid_shape.size();
  CalibrationTable t;
  t.shape = ds.grid_shape;
  t.n = n;
  t.delta = delta;
  t.pooled = opts.pooled;
  t.tail_rule = opts.tail_rule;
  t.lo_scores.assign(n * N, 0.0);
  t.hi_scores.assign(n * N, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const auto raw = predict_raw_intervals(ckpt, cal[j]->params, delta);
    for (std::size_t i = 0; i < N; ++i) {
      const Scores s = nonconformity_scores(raw[i], cal[j]->field[i]);
      t.lo_scores[i * n + j] = s.lo;
      t.hi_scores[i * n + j] = s.hi;
    }
    t.member_ids.push_back(cal[j]->member_id);
  }
  if (opts.pooled) {
    std::stable_sort(t.lo_scores.begin(), t.lo_scores.end());
    std::stable_sort(t.hi_scores.begin(), t.hi_scores.end());
  } else {
    for (std::size_t i = 0; i < N; ++i) {
      std::stable_sort(t.lo_scores.begin() + i * n, t.lo_scores.begin() + (i + 1) * n);
      std::stable_sort(t.hi_scores.begin() + i * n, t.hi_scores.begin() + (i + 1) * n);
    }
  }
  std::sort(t.member_ids.begin(), t.member_ids.end());
  return t;
}

// Per-element thresholds for one level.
struct LevelThresholds {
  std::vector<double> q_lo;
  std::vector<double> q_hi;
  std::size_t unattainable = 0;  // elements whose rank exceeds n
};

inline LevelThresholds thresholds(const CalibrationTable& t, const MiscoverageLevel& level) {
  LevelThresholds th;
  const std::size_t N = t.elements();
  th.q_lo.resize(N);
  th.q_hi.resize(N);
  const MiscoverageLevel side = t.side_level(level);
  for (std::size_t i = 0; i < N; ++i) {
    const auto lo = finite_sample_quantile(t.lo_block(i), side);
    const auto hi = finite_sample_quantile(t.hi_block(i), side);
    th.q_lo[i] = lo.value;
    th.q_hi[i] = hi.value;
    th.unattainable += !(lo.attainable && hi.attainable);
  }
  return th;
}

// Calibrated intervals for a whole field.
inline std::vector<CalibratedInterval> calibrate_field(const std::vector<RawInterval>& raw,
                                                       const LevelThresholds& th,
                                                       const MiscoverageLevel& level) {
  if (raw.size() != th.q_lo.size()) throw ShapeError("calibrate_field: size mismatch");
  std::vector<CalibratedInterval> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = calibrate(raw[i], th.q_lo[i], th.q_hi[i], level);
  return out;
}

// ---------------------------------------------------------------------------
// Coverage audit

enum class IntervalKind { calibrated, uncalibrated };

inline const char* to_string(IntervalKind k) {
  return k == IntervalKind::calibrated ? "C" : "NC";
}

struct LevelCoverage {
  double level = 0.0;  // miscoverage
  IntervalKind kind = IntervalKind::calibrated;
  double coverage_pooled = 0.0;        // over all (element, member) pairs
  double coverage_element_mean = 0.0;  // mean over elements of per-element coverage
  double coverage_member_mean = 0.0;   // mean over members of per-member coverage
  double mean_width = 0.0;
  double median_width = 0.0;
  std::size_t flagged_elements = 0;  // unattainable rank or clamped intervals
  std::vector<double> element_coverage;
};

struct CoverageReport {
  std::size_t calibration_size = 0;
  std::size_t test_members = 0;
  double delta = 0.0;
  std::optional<TailRule> tail_rule;
  std::size_t effective_size = 0;  // scores behind each threshold
  std::vector<LevelCoverage> rows;  // C and NC row per level
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

struct Tally {
  std::vector<double> element_hits;
  std::vector<double> member_cov;
  std::vector<double> widths;
  std::size_t clamped_or_flagged = 0;
  std::vector<char> flagged;

  explicit Tally(std::size_t N) : element_hits(N, 0.0), flagged(N, 0) {}

  LevelCoverage finish(double level, IntervalKind kind, std::size_t members) const {
    LevelCoverage r;
    r.level = level;
    r.kind = kind;
    const std::size_t N = element_hits.size();
    r.element_coverage.resize(N);
    for (std::size_t i = 0; i < N; ++i)
      r.element_coverage[i] = element_hits[i] / static_cast<double>(members);
    r.coverage_element_mean = mean(r.element_coverage);
    r.coverage_member_mean = mean(member_cov);
    r.coverage_pooled =
        pairwise_sum(element_hits) / static_cast<double>(N * members);
    r.mean_width = mean(widths);
    r.median_width = median(widths);
    r.flagged_elements = static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), 1));
    return r;
  }
};

}  // namespace detail

// Empirical coverage and width of calibrated and raw intervals over the
// test split.  Raw (NC) rows use delta = level, calibrated (C) rows use the
// table's raw intervals and thresholds at the level.  Without a table only
// NC rows are produced.
inline CoverageReport coverage_audit(const Checkpoint& ckpt, const CalibrationTable* table,
                                     const EnsembleDataset& ds,
                                     const std::vector<MiscoverageLevel>& levels) {
  const auto test = ds.members_in(Split::test);
  if (test.empty()) throw DataError("dataset has no test split; nothing to evaluate");
  if (ds.grid_shape != ckpt.grid_shape() || (table && table->shape != ckpt.grid_shape()))
    throw ShapeError("table, dataset and checkpoint grids disagree");
  check_disjoint(ckpt.train_ids, "training", test, "test");
  if (table) check_disjoint(table->member_ids, "calibration", test, "test");

  const std::size_t N = ds.grid_shape.size();
  CoverageReport rep;
  rep.calibration_size = table ? table->n : 0;
  rep.test_members = test.size();
  rep.delta = table ? table->delta : 0.0;
  if (table) {
    rep.tail_rule = table->tail_rule;
    rep.effective_size = table->block_size();
  }

  std::vector<LevelThresholds> ths;
  if (table)
    for (const auto& lv : levels) ths.push_back(thresholds(*table, lv));
  std::vector<detail::Tally> cal_tally(levels.size(), detail::Tally(N));
  std::vector<detail::Tally> raw_tally(levels.size(), detail::Tally(N));
  for (std::size_t l = 0; l < ths.size(); ++l) {
    for (std::size_t i = 0; i < N; ++i)
      cal_tally[l].flagged[i] = std::isinf(ths[l].q_lo[i]) || std::isinf(ths[l].q_hi[i]);
  }

  for (const auto* m : test) {
    const EvidentialField f = ckpt.predict(m->params);
    std::vector<RawInterval> table_raw;
    if (table) table_raw = raw_intervals(ckpt, f, table->delta);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto raw = raw_intervals(ckpt, f, levels[l].value());
      std::size_t raw_hits = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const double y = m->field[i];
        const bool r_in = y >= raw[i].lo && y <= raw[i].hi;
        raw_tally[l].element_hits[i] += r_in;
        raw_hits += r_in;
        raw_tally[l].widths.push_back(raw[i].hi - raw[i].lo);
      }
      raw_tally[l].member_cov.push_back(static_cast<double>(raw_hits) / static_cast<double>(N));
      if (!table) continue;

      const auto cal = calibrate_field(table_raw, ths[l], levels[l]);
      std::size_t cal_hits = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const double y = m->field[i];
        const bool c_in = y >= cal[i].lo && y <= cal[i].hi;
        cal_tally[l].element_hits[i] += c_in;
        cal_hits += c_in;
        cal_tally[l].widths.push_back(cal[i].hi - cal[i].lo);
        if (cal[i].clamped) cal_tally[l].flagged[i] = 1;
      }
      cal_tally[l].member_cov.push_back(static_cast<double>(cal_hits) / static_cast<double>(N));
    }
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (table)
      rep.rows.push_back(cal_tally[l].finish(levels[l].value(), IntervalKind::calibrated, test.size()));
    rep.rows.push_back(raw_tally[l].finish(levels[l].value(), IntervalKind::uncalibrated, test.size()));
  }
  return rep;
}

inline CoverageReport coverage_audit(const Checkpoint& ckpt, const CalibrationTable& table,
                                     const EnsembleDataset& ds,
                                     const std::vector<MiscoverageLevel>& levels) {
  return coverage_audit(ckpt, &table, ds, levels);
}

// One line per (level, kind, aggregation):
//   level=<a> kind=<C|NC> aggregation=<pooled|element|member> coverage=...
//   mean_width=... median_width=... flagged_elements=...
inline std::string coverage_records(const CoverageReport& rep) {
  std::ostringstream os;
  for (const auto& r : rep.rows) {
    const std::pair<const char*, double> aggs[] = {{"pooled", r.coverage_pooled},
                                                   {"element", r.coverage_element_mean},
                                                   {"member", r.coverage_member_mean}};
    for (const auto& [name, cov] : aggs)
      os << "level=" << detail::fmt17(r.level) << " kind=" << to_string(r.kind)
         << " aggregation=" << name << " coverage=" << detail::fmt17(cov)
         << " mean_width=" << detail::fmt17(r.mean_width)
         << " median_width=" << detail::fmt17(r.median_width)
         << " flagged_elements=" << r.flagged_elements << "\n";
  }
  return os.str();
}

inline std::string coverage_summary(const CoverageReport& rep) {
  std::ostringstream os;
  char buf[200];
  os << "calibration size n = " << rep.calibration_size << ", test members = " << rep.test_members
     << ", score delta = " << rep.delta;
  if (rep.tail_rule) os << ", tail rule = " << to_string(*rep.tail_rule);
  os << "\n";
  std::snprintf(buf, sizeof buf, "%-8s %-6s %-10s %-12s %-12s %-12s %s\n", "1-alpha", "kind",
                "coverage", "bound", "mean_width", "median_width", "flagged");
  os << buf;
  for (const auto& r : rep.rows) {
    const double sides = rep.tail_rule == TailRule::split ? 2.0 : 1.0;
    const double upper = 1.0 - r.level + sides / static_cast<double>(rep.effective_size + 1);
    char bound[40];
    if (r.kind == IntervalKind::calibrated)
      std::snprintf(bound, sizeof bound, "[%.3f,%.3f]", 1.0 - r.level, std::min(1.0, upper));
    else
      std::snprintf(bound, sizeof bound, "-");
    std::snprintf(buf, sizeof buf, "%-8.3f %-6s %-10.4f %-12s %-12.5g %-12.5g %zu\n",
                  1.0 - r.level, to_string(r.kind), r.coverage_pooled, bound, r.mean_width,
                  r.median_width, r.flagged_elements);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Table I/O (same container as checkpoints, "CALTABLE" section)

inline std::string encode_table(const CalibrationTable& t) {
  container::Sections s;
  container::Writer w;
  w.u64(t.shape.rank());
  for (auto d : t.shape.dims) w.u64(d);
  w.u64(t.n);
  w.f64(t.delta);
  w.u64(t.pooled ? 1 : 0);
  w.u64(t.tail_rule == TailRule::split ? 0 : 1);
  w.u64s(t.member_ids);
  w.f64s(t.lo_scores);
  w.f64s(t.hi_scores);
  s.add("CALTABLE", w);
  return container::encode(s);
}

inline CalibrationTable decode_table(std::string_view bytes, const std::string& path) {
  const auto s = container::decode(bytes, path);
  container::Reader r(s.require("CALTABLE", path), path + " CALTABLE");
  CalibrationTable t;
  t.shape.dims.resize(r.u64());
  for (auto& d : t.shape.dims) d = r.u64();
  t.n = r.u64();
  t.delta = r.f64();
  t.pooled = r.u64() != 0;
  const auto rule = r.u64();
  if (rule > 1) throw DataError(path + ": unknown tail rule code " + std::to_string(rule));
  t.tail_rule = rule == 0 ? TailRule::split : TailRule::per_side;
  t.member_ids = r.u64s();
  t.lo_scores = r.f64s();
  t.hi_scores = r.f64s();
  r.expect_done();
  if (t.n == 0 || t.lo_scores.size() != t.n * t.shape.size() ||
      t.hi_scores.size() != t.lo_scores.size() || t.member_ids.size() != t.n)
    throw DataError(path + ": calibration table sizes are inconsistent");
  return t;
}

inline void save_table(const CalibrationTable& t, const std::filesystem::path& path) {
  container::write_file(path, encode_table(t));
  std::ostringstream man;
  man << "# evisurro calibration table\n"
      << "format_version = " << container::kFormatVersion << "\n"
      << "kind = calibration_table\n"
      << "grid_shape = " << t.shape.to_string() << "\n"
      << "n = " << t.n << "\n"
      << "delta = " << detail::fmt17(t.delta) << "\n"
      << "pooled = " << (t.pooled ? "true" : "false") << "\n"
      << "tail_rule = " << to_string(t.tail_rule) << "\n"
      << "max_attainable_confidence = " << detail::fmt17(t.max_attainable_confidence()) << "\n";
  container::write_file(path.string() + ".manifest", man.str());
}

inline CalibrationTable load_table(const std::filesystem::path& path) {
  return decode_table(container::read_file(path), path.string());
}

}  // namespace evisurro

#endif  // EVISURRO_CONFORMAL_HPP_
