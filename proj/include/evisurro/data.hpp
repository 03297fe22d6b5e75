#ifndef EVISURRO_DATA_HPP_
#define EVISURRO_DATA_HPP_

// Synthetic ensemble simulators with known noise, dataset persistence and
// train / calibration / test splitting.
//
// The default "bumps" generator produces a sum of two smooth Gaussian bumps
// on the unit square (or cube) whose centers, widths and amplitudes move with
// a 3-dimensional parameter vector in [0,1]^3.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evisurro/container.hpp"
#include "evisurro/errors.hpp"
#include "evisurro/numeric.hpp"

namespace evisurro {

struct ParamRange {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  friend bool operator==(const ParamRange&, const ParamRange&) = default;
};

enum class Split { train, calibration, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::calibration: return "calibration";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "calibration") return Split::calibration;
  if (s == "test") return Split::test;
  throw DataError("unknown split label '" + s + "'");
}

enum class NoiseModel { none, heteroscedastic, parameter_perturbation, resolution_variants };

inline const char* to_string(NoiseModel m) {
  switch (m) {
    case NoiseModel::none: return "none";
    case NoiseModel::heteroscedastic: return "heteroscedastic";
    case NoiseModel::parameter_perturbation: return "parameter-perturbation";
    case NoiseModel::resolution_variants: return "resolution-variants";
  }
  return "?";
}

inline NoiseModel parse_noise_model(const std::string& s) {
  if (s == "none") return NoiseModel::none;
  if (s == "heteroscedastic") return NoiseModel::heteroscedastic;
  if (s == "parameter-perturbation") return NoiseModel::parameter_perturbation;
  if (s == "resolution-variants") return NoiseModel::resolution_variants;
  throw DomainError("unknown noise model '" + s + "'");
}

struct EnsembleMember {
  std::uint64_t member_id = 0;
  std::vector<double> params;
  std::vector<double> field;
  std::optional<std::vector<double>> truth_noise_var;

  friend bool operator==(const EnsembleMember&, const EnsembleMember&) = default;
};

struct SimulatorSpec {
  std::string name = "bumps";
  std::size_t d = 3;
  GridShape grid_shape{{32, 32}};
  NoiseModel noise_model = NoiseModel::heteroscedastic;
  std::uint64_t seed = 0;
};

// Axis-aligned slab lo <= x[dim] <= hi kept out of the training split.
struct SparseRegion {
  std::size_t dim = 0;
  double lo = 0.0;
  double hi = 0.0;

  bool contains(std::span<const double> x) const { return x[dim] >= lo && x[dim] <= hi; }
  friend bool operator==(const SparseRegion&, const SparseRegion&) = default;
};

struct EnsembleDataset {
  std::string simulator = "bumps";
  NoiseModel noise_model = NoiseModel::heteroscedastic;
  std::uint64_t seed = 0;
  GridShape grid_shape;
  std::vector<ParamRange> param_ranges;
  std::vector<EnsembleMember> members;
  std::map<std::uint64_t, Split> split_labels;
  std::optional<SparseRegion> sparse_region;

  std::size_t dim() const { return param_ranges.size(); }

  Split split_of(std::uint64_t id) const {
    auto it = split_labels.find(id);
    if (it == split_labels.end())
      throw DataError("member " + std::to_string(id) + " has no split label");
    return it->second;
  }

  std::vector<const EnsembleMember*> members_in(Split s) const {
    std::vector<const EnsembleMember*> out;
    for (const auto& m : members)
      if (split_of(m.member_id) == s) out.push_back(&m);
    return out;
  }

  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (const auto& [id, label] : split_labels) n += label == s;
    return n;
  }

  // Labels partition the member ids, shapes and ranges are consistent.
  void validate() const {
    std::set<std::uint64_t> ids;
    for (const auto& m : members) {
      if (!ids.insert(m.member_id).second)
        throw DataError("duplicate member id " + std::to_string(m.member_id));
      if (m.field.size() != grid_shape.size())
        throw DataError("member " + std::to_string(m.member_id) + ": field size mismatch");
      if (m.params.size() != param_ranges.size())
        throw DataError("member " + std::to_string(m.member_id) + ": parameter count mismatch");
      if (m.truth_noise_var && m.truth_noise_var->size() != grid_shape.size())
        throw DataError("member " + std::to_string(m.member_id) + ": noise grid size mismatch");
    }
    if (split_labels.size() != ids.size())
      throw DataError("split labels do not cover exactly the member ids");
    for (const auto& [id, label] : split_labels)
      if (!ids.count(id)) throw DataError("split label for unknown member " + std::to_string(id));
  }

  friend bool operator==(const EnsembleDataset&, const EnsembleDataset&) = default;
};

// ---------------------------------------------------------------------------
// Simulator

namespace detail {

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Cell-center coordinates in [0,1] along each axis for flat index i.
inline std::vector<double> cell_coords(const GridShape& g, std::size_t i) {
  std::vector<double> c(g.rank());
  for (std::size_t k = g.rank(); k-- > 0;) {
    const std::size_t n = g.dims[k];
    c[k] = (static_cast<double>(i % n) + 0.5) / static_cast<double>(n);
    i /= n;
  }
  return c;
}

}  // namespace detail

inline std::vector<ParamRange> default_param_ranges() {
  return {{"shift", 0.0, 1.0}, {"spread", 0.0, 1.0}, {"balance", 0.0, 1.0}};
}

// Noise-free output of the bumps generator.
inline std::vector<double> bumps_mean_field(const GridShape& g, std::span<const double> x) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const std::size_t r = g.rank();
  std::vector<double> c1(r), c2(r);
  for (std::size_t k = 0; k < r; ++k) {
    c1[k] = 0.30 + 0.25 * x[0] + 0.06 * std::sin(two_pi * (x[1] + k / 3.0));
    c2[k] = 0.70 - 0.25 * x[1] + 0.06 * std::sin(two_pi * (x[2] + k / 5.0));
  }
  const double w1 = 0.10 + 0.08 * x[2];
  const double w2 = 0.14 - 0.06 * x[0] + 0.02 * std::sin(two_pi * x[1]);
  const double a1 = 1.0 + 0.5 * x[1];
  const double a2 = 0.6 + 0.4 * std::sin(std::numbers::pi * x[2]) + 0.2 * x[0];

  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto s = detail::cell_coords(g, i);
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      d1 += (s[k] - c1[k]) * (s[k] - c1[k]);
      d2 += (s[k] - c2[k]) * (s[k] - c2[k]);
    }
    out[i] = a1 * std::exp(-d1 / (2 * w1 * w1)) + a2 * std::exp(-d2 / (2 * w2 * w2));
  }
  return out;
}

// sigma(s; x) = 0.05 + 0.15 b(s), b = mean field scaled to max 1.
inline std::vector<double> heteroscedastic_std(std::span<const double> mean_field) {
  const double peak = *std::max_element(mean_field.begin(), mean_field.end());
  std::vector<double> sd(mean_field.size());
  for (std::size_t i = 0; i < sd.size(); ++i)
    sd[i] = 0.05 + 0.15 * (peak > 0.0 ? mean_field[i] / peak : 0.0);
  return sd;
}

struct ResolutionVariants {
  GridShape reduced;
  // linear (bilinear / trilinear at block centers), nearest (block origin),
  // max pooling, min pooling.
  std::array<std::vector<double>, 4> fields;
  // Population variance across the four variants, per reduced element.
  std::vector<double> variance;
};

inline ResolutionVariants resolution_variants(std::span<const double> field,
                                              const GridShape& shape, std::size_t factor) {
  if (factor == 0) throw DomainError("resolution_variants: factor must be positive");
  if (field.size() != shape.size()) throw ShapeError("resolution_variants: field size mismatch");
  for (auto d : shape.dims)
    if (d % factor != 0)
      throw DomainError("resolution_variants: grid " + shape.to_string() +
                        " not divisible by factor " + std::to_string(factor));
  const std::size_t r = shape.rank();
  ResolutionVariants out;
  for (auto d : shape.dims) out.reduced.dims.push_back(d / factor);
  const std::size_t n = out.reduced.size();
  for (auto& f : out.fields) f.assign(n, 0.0);
  out.variance.assign(n, 0.0);

  std::vector<std::size_t> strides(r, 1);
  for (std::size_t k = r - 1; k-- > 0;) strides[k] = strides[k + 1] * shape.dims[k + 1];

  std::vector<std::size_t> block(r);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t rem = j;
    for (std::size_t k = r; k-- > 0;) {
      block[k] = rem % out.reduced.dims[k];
      rem /= out.reduced.dims[k];
    }
    // Nearest: block origin.
    std::size_t origin = 0;
    for (std::size_t k = 0; k < r; ++k) origin += block[k] * factor * strides[k];
    out.fields[1][j] = field[origin];

    // Max / min over the block.
    double mx = -INFINITY, mn = INFINITY;
    const std::size_t cells = static_cast<std::size_t>(std::pow(factor, r));
    for (std::size_t c = 0; c < cells; ++c) {
      std::size_t cr = c, idx = origin;
      for (std::size_t k = r; k-- > 0;) {
        idx += (cr % factor) * strides[k];
        cr /= factor;
      }
      mx = std::max(mx, field[idx]);
      mn = std::min(mn, field[idx]);
    }
    out.fields[2][j] = mx;
    out.fields[3][j] = mn;

    // Multilinear interpolation at the block center, (factor-1)/2 from the origin.
    const double offset = 0.5 * static_cast<double>(factor - 1);
    const std::size_t base = static_cast<std::size_t>(std::floor(offset));
    const double frac = offset - static_cast<double>(base);
    double acc = 0.0;
    for (std::size_t corner = 0; corner < (std::size_t{1} << r); ++corner) {
      double wgt = 1.0;
      std::size_t idx = origin;
      for (std::size_t k = 0; k < r; ++k) {
        const bool up = (corner >> k) & 1;
        if (up && frac == 0.0) {
          wgt = 0.0;
          break;
        }
        wgt *= up ? frac : 1.0 - frac;
        idx += (base + (up ? 1 : 0)) * strides[k];
      }
      if (wgt != 0.0) acc += wgt * field[idx];
    }
    out.fields[0][j] = acc;

    double m = 0.0;
    for (const auto& f : out.fields) m += f[j];
    m /= 4.0;
    double v = 0.0;
    for (const auto& f : out.fields) v += (f[j] - m) * (f[j] - m);
    out.variance[j] = v / 4.0;
  }
  return out;
}

inline ResolutionVariants resolution_variants(const EnsembleMember& member,
                                              const GridShape& shape, std::size_t factor) {
  return resolution_variants(member.field, shape, factor);
}

inline void check_params(const SimulatorSpec& spec, std::span<const double> x,
                         const std::vector<ParamRange>& ranges) {
  if (spec.name != "bumps") throw DomainError("unknown simulator '" + spec.name + "'");
  if (x.size() != spec.d || spec.d != ranges.size())
    throw DomainError("simulate_member: expected " + std::to_string(spec.d) + " parameters");
  for (std::size_t k = 0; k < x.size(); ++k)
    if (!ranges[k].contains(x[k]))
      throw DomainError("simulate_member: parameter '" + ranges[k].name + "' = " +
                        std::to_string(x[k]) + " outside [" + std::to_string(ranges[k].lo) +
                        ", " + std::to_string(ranges[k].hi) + "]");
}

inline constexpr std::size_t kPerturbationReplicas = 8;
inline constexpr double kPerturbationFraction = 1e-3;

namespace detail {

inline std::vector<std::vector<double>> perturbed_replicas(const SimulatorSpec& spec,
                                                           std::span<const double> x,
                                                           std::mt19937_64& rng) {
  const auto ranges = default_param_ranges();
  std::vector<std::vector<double>> reps;
  std::vector<double> xp(x.begin(), x.end());
  for (std::size_t r = 0; r < kPerturbationReplicas; ++r) {
    for (std::size_t k = 0; k < x.size(); ++k)
      xp[k] = x[k] + (2.0 * uniform01(rng) - 1.0) * kPerturbationFraction *
                         (ranges[k].hi - ranges[k].lo);
    reps.push_back(bumps_mean_field(spec.grid_shape, xp));
  }
  return reps;
}

}  // namespace detail

// One member at parameters x.  Deterministic in (spec, x, member_seed).
inline EnsembleMember simulate_member(const SimulatorSpec& spec, std::span<const double> x,
                                      std::uint64_t member_seed, std::uint64_t member_id = 0) {
  check_params(spec, x, default_param_ranges());
  EnsembleMember m;
  m.member_id = member_id;
  m.params.assign(x.begin(), x.end());
  const auto mean = bumps_mean_field(spec.grid_shape, x);
  const std::size_t n = mean.size();
  std::mt19937_64 rng(member_seed);

  switch (spec.noise_model) {
    case NoiseModel::none:
      m.field = mean;
      m.truth_noise_var = std::vector<double>(n, 0.0);
      break;
    case NoiseModel::heteroscedastic: {
      const auto sd = heteroscedastic_std(mean);
      std::normal_distribution<double> normal(0.0, 1.0);
      m.field.resize(n);
      m.truth_noise_var = std::vector<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        m.field[i] = mean[i] + sd[i] * normal(rng);
        (*m.truth_noise_var)[i] = sd[i] * sd[i];
      }
      break;
    }
    case NoiseModel::parameter_perturbation: {
      // Member output is the first perturbed replica; the noise grid is the
      // per-element population variance across all replicas.
      const auto reps = detail::perturbed_replicas(spec, x, rng);
      m.field = reps.front();
      std::vector<double> var(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (const auto& r : reps) mu += r[i];
        mu /= static_cast<double>(reps.size());
        for (const auto& r : reps) var[i] += (r[i] - mu) * (r[i] - mu);
        var[i] /= static_cast<double>(reps.size());
      }
      m.truth_noise_var = std::move(var);
      break;
    }
    case NoiseModel::resolution_variants: {
      // Clean output; noise grid = variance across the four factor-2
      // downsampling schemes, expanded back to full resolution.
      m.field = mean;
      const auto rv = resolution_variants(mean, spec.grid_shape, 2);
      std::vector<double> var(n);
      const std::size_t r = spec.grid_shape.rank();
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, j = 0, mult = 1;
        for (std::size_t k = r; k-- > 0;) {
          const std::size_t idx = rem % spec.grid_shape.dims[k];
          rem /= spec.grid_shape.dims[k];
          j += (idx / 2) * mult;
          mult *= rv.reduced.dims[k];
        }
        var[i] = rv.variance[j];
      }
      m.truth_noise_var = std::move(var);
      break;
    }
  }
  return m;
}

// Member-level numerical-error reference: mean over elements of the mean
// absolute deviation across the perturbed replicas.
inline double perturbation_reference(const SimulatorSpec& spec, std::span<const double> x,
                                     std::uint64_t member_seed) {
  check_params(spec, x, default_param_ranges());
  std::mt19937_64 rng(member_seed);
  const auto reps = detail::perturbed_replicas(spec, x, rng);
  const std::size_t n = reps.front().size();
  std::vector<double> mad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (const auto& r : reps) mu += r[i];
    mu /= static_cast<double>(reps.size());
    for (const auto& r : reps) mad[i] += std::fabs(r[i] - mu);
    mad[i] /= static_cast<double>(reps.size());
  }
  return mean(mad);
}

// Parameters for all splits come from one i.i.d. stream, in the order
// train, calibration, test.  With a sparse region, training draws that fall
// inside it are discarded and redrawn; other splits are unaffected.
inline EnsembleDataset generate_dataset(const SimulatorSpec& spec, std::size_t n_train,
                                        std::size_t n_cal, std::size_t n_test,
                                        std::uint64_t seed,
                                        std::optional<SparseRegion> sparse = std::nullopt) {
  if (n_train < 1) throw DomainError("generate_dataset: need at least one training member");
  EnsembleDataset ds;
  ds.simulator = spec.name;
  ds.noise_model = spec.noise_model;
  ds.seed = seed;
  ds.grid_shape = spec.grid_shape;
  ds.param_ranges = default_param_ranges();
  ds.sparse_region = sparse;
  if (spec.d != ds.param_ranges.size())
    throw DomainError("bumps simulator has d = " + std::to_string(ds.param_ranges.size()));
  if (sparse && sparse->dim >= spec.d) throw DomainError("sparse region dimension out of range");

  const std::uint64_t base = mix_seed(spec.seed, seed);
  std::mt19937_64 param_rng(mix_seed(base, 0));
  auto draw = [&] {
    std::vector<double> x(spec.d);
    for (std::size_t k = 0; k < spec.d; ++k) {
      const auto& r = ds.param_ranges[k];
      x[k] = r.lo + (r.hi - r.lo) * detail::uniform01(param_rng);
    }
    return x;
  };

  std::uint64_t id = 0;
  auto add = [&](Split split, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      auto x = draw();
      if (split == Split::train && sparse) {
        std::size_t tries = 0;
        while (sparse->contains(x)) {
          if (++tries > 100000) throw DomainError("sparse region covers the parameter space");
          x = draw();
        }
      }
      ds.split_labels[id] = split;
      ds.members.push_back(simulate_member(spec, x, mix_seed(base, id + 1), id));
      ++id;
    }
  };
  add(Split::train, n_train);
  add(Split::calibration, n_cal);
  add(Split::test, n_test);
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence
//
// <dir>/manifest.txt        key = value header, then a [members] table
// <dir>/member_XXXXXX.f32   field, little-endian float32, row-major
// <dir>/noise_XXXXXX.f32    truth noise variance (optional)

inline constexpr int kDatasetSchemaVersion = 1;

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string member_file(const char* prefix, std::uint64_t id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06llu.f32", prefix, static_cast<unsigned long long>(id));
  return buf;
}

inline void write_f32(const std::filesystem::path& p, std::span<const double> v) {
  std::string bytes(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    std::memcpy(bytes.data() + 4 * i, &f, 4);
  }
  container::write_file(p, bytes);
}

inline std::vector<double> read_f32(const std::filesystem::path& p, std::size_t n,
                                    std::uint64_t member_id) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(p, ec);
  if (ec) throw DataError("member " + std::to_string(member_id) + ": missing file " + p.string());
  if (size != n * 4)
    throw DataError("member " + std::to_string(member_id) + ": size mismatch in " +
                    p.filename().string() + " (expected " + std::to_string(n * 4) +
                    " bytes, found " + std::to_string(size) + ")");
  const auto bytes = container::read_file(p);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 4 * i, 4);
    v[i] = f;
  }
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void save_dataset(const EnsembleDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  std::ostringstream man;
  man << "# evisurro ensemble dataset\n";
  man << "schema_version = " << kDatasetSchemaVersion << "\n";
  man << "simulator = " << ds.simulator << "\n";
  man << "noise_model = " << to_string(ds.noise_model) << "\n";
  man << "seed = " << ds.seed << "\n";
  man << "d = " << ds.dim() << "\n";
  man << "grid_shape = " << ds.grid_shape.to_string() << "\n";
  for (std::size_t k = 0; k < ds.param_ranges.size(); ++k) {
    const auto& r = ds.param_ranges[k];
    man << "param." << k << " = " << r.name << " " << detail::fmt17(r.lo) << " "
        << detail::fmt17(r.hi) << "\n";
  }
  if (ds.sparse_region)
    man << "sparse_region = " << ds.sparse_region->dim << " "
        << detail::fmt17(ds.sparse_region->lo) << " " << detail::fmt17(ds.sparse_region->hi)
        << "\n";
  man << "members = " << ds.members.size() << "\n";
  man << "[members]\n";
  man << "# id split params... field_file noise_file\n";
  for (const auto& m : ds.members) {
    man << m.member_id << " " << to_string(ds.split_of(m.member_id));
    for (double p : m.params) man << " " << detail::fmt17(p);
    const auto field_name = detail::member_file("member", m.member_id);
    const auto noise_name =
        m.truth_noise_var ? detail::member_file("noise", m.member_id) : std::string("-");
    man << " " << field_name << " " << noise_name << "\n";
    detail::write_f32(dir / field_name, m.field);
    if (m.truth_noise_var) detail::write_f32(dir / noise_name, *m.truth_noise_var);
  }
  container::write_file(dir / "manifest.txt", man.str());
}

namespace detail {

inline EnsembleDataset load_dataset_unchecked(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest_path))
    throw DataError("no dataset manifest at " + manifest_path.string());
  std::istringstream in(container::read_file(manifest_path));
  EnsembleDataset ds;
  ds.param_ranges.clear();
  std::map<std::string, std::string> kv;
  std::string line;
  bool in_members = false;
  std::size_t d = 0;
  std::optional<std::size_t> declared_members;
  std::vector<std::pair<std::string, std::string>> files;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line == "[members]") {
      if (!kv.count("schema_version"))
        throw DataError(manifest_path.string() + ": missing schema_version");
      if (std::stoi(kv["schema_version"]) != kDatasetSchemaVersion)
        throw VersionError(manifest_path.string() + ": manifest schema " + kv["schema_version"] +
                           ", expected " + std::to_string(kDatasetSchemaVersion));
      for (const char* key : {"simulator", "noise_model", "seed", "d", "grid_shape"})
        if (!kv.count(key))
          throw DataError(manifest_path.string() + ": missing key '" + key + "'");
      ds.simulator = kv["simulator"];
      ds.noise_model = parse_noise_model(kv["noise_model"]);
      ds.seed = std::stoull(kv["seed"]);
      d = std::stoul(kv["d"]);
      ds.grid_shape = GridShape::parse(kv["grid_shape"]);
      for (std::size_t k = 0; k < d; ++k) {
        auto it = kv.find("param." + std::to_string(k));
        if (it == kv.end())
          throw DataError(manifest_path.string() + ": missing param." + std::to_string(k));
        std::istringstream ps(it->second);
        ParamRange r;
        if (!(ps >> r.name >> r.lo >> r.hi))
          throw DataError(manifest_path.string() + ": malformed param." + std::to_string(k));
        ds.param_ranges.push_back(r);
      }
      if (auto it = kv.find("sparse_region"); it != kv.end()) {
        std::istringstream ss(it->second);
        SparseRegion sr;
        if (!(ss >> sr.dim >> sr.lo >> sr.hi))
          throw DataError(manifest_path.string() + ": malformed sparse_region");
        ds.sparse_region = sr;
      }
      if (auto it = kv.find("members"); it != kv.end()) declared_members = std::stoul(it->second);
      in_members = true;
      continue;
    }
    if (!in_members) {
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError(manifest_path.string() + ": malformed line '" + line + "'");
      kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
      continue;
    }
    std::istringstream row(line);
    EnsembleMember m;
    std::string split, field_file, noise_file;
    if (!(row >> m.member_id >> split))
      throw DataError(manifest_path.string() + ": malformed member row '" + line + "'");
    m.params.resize(d);
    for (auto& p : m.params)
      if (!(row >> p))
        throw DataError(manifest_path.string() + ": malformed member row '" + line + "'");
    if (!(row >> field_file >> noise_file))
      throw DataError(manifest_path.string() + ": malformed member row '" + line + "'");
    if (ds.split_labels.count(m.member_id))
      throw DataError("duplicate member id " + std::to_string(m.member_id));
    ds.split_labels[m.member_id] = parse_split(split);
    const std::size_t n = ds.grid_shape.size();
    m.field = detail::read_f32(dir / field_file, n, m.member_id);
    if (noise_file != "-") m.truth_noise_var = detail::read_f32(dir / noise_file, n, m.member_id);
    ds.members.push_back(std::move(m));
  }
  if (!in_members) throw DataError(manifest_path.string() + ": missing [members] table");
  if (declared_members && *declared_members != ds.members.size())
    throw DataError(manifest_path.string() + ": manifest declares " +
                    std::to_string(*declared_members) + " members, table has " +
                    std::to_string(ds.members.size()));
  ds.validate();
  return ds;
}

}  // namespace detail

// Malformed manifest values surface as DataError, whatever the parser threw.
inline EnsembleDataset load_dataset(const std::filesystem::path& dir) {
  try {
    return detail::load_dataset_unchecked(dir);
  } catch (const DataError&) {
    throw;
  } catch (const std::logic_error& e) {
    throw DataError((dir / "manifest.txt").string() + ": " + e.what());
  }
}

}  // namespace evisurro

#endif  // EVISURRO_DATA_HPP_
