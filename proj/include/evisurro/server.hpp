#ifndef EVISURRO_SERVER_HPP_
#define EVISURRO_SERVER_HPP_

// Stateless HTTP service over an immutable model bundle.
//
//   GET  /meta      parameter names/ranges, grid shape, calibration size
//   POST /predict   {"params": [...]} -> mean / aleatoric / epistemic grids
//   POST /interval  {"params": [...], "level": c, "calibrated": bool}
//                   -> lo / hi / width grids
//
// Grids are flat row-major arrays next to a "shape" array, in original
// (denormalized) units.  Handlers are pure functions of (bundle, body); the
// httplib wiring only moves bytes.

// Eigen before httplib: <resolv.h> (pulled in by httplib) defines a `_res`
// macro that collides with Eigen parameter names.
#include "evisurro/conformal.hpp"
#include "evisurro/training.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace evisurro {

struct ModelBundle {
  Checkpoint checkpoint;
  std::optional<CalibrationTable> table;

  ModelBundle(Checkpoint c, std::optional<CalibrationTable> t)
      : checkpoint(std::move(c)), table(std::move(t)) {
    if (table && table->shape != checkpoint.grid_shape())
      throw ShapeError("calibration table grid " + table->shape.to_string() +
                       " does not match checkpoint grid " + checkpoint.grid_shape().to_string());
  }

  static ModelBundle load(const std::filesystem::path& checkpoint_path,
                          const std::optional<std::filesystem::path>& table_path) {
    auto c = load_checkpoint(checkpoint_path);
    std::optional<CalibrationTable> t;
    if (table_path) t = load_table(*table_path);
    return ModelBundle(std::move(c), std::move(t));
  }
};

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

namespace detail {

inline nlohmann::json error_body(const std::string& message,
                                 nlohmann::json detail = nlohmann::json::array()) {
  return {{"error", message}, {"detail", std::move(detail)}};
}

inline nlohmann::json shape_json(const GridShape& g) {
  nlohmann::json a = nlohmann::json::array();
  for (auto d : g.dims) a.push_back(d);
  return a;
}

// Validates {"params": [...]} against the bundle's ranges (inclusive).
inline std::optional<HttpResult> parse_params(const ModelBundle& b, const nlohmann::json& req,
                                              std::vector<double>& out) {
  const auto& ranges = b.checkpoint.param_ranges;
  const std::size_t d = ranges.size();
  if (!req.is_object() || !req.contains("params") || !req["params"].is_array())
    return HttpResult{422, error_body("'params' must be an array of " + std::to_string(d) +
                                      " numbers")};
  const auto& p = req["params"];
  if (p.size() != d)
    return HttpResult{422, error_body("expected " + std::to_string(d) + " params, got " +
                                          std::to_string(p.size()),
                                      {{{"field", "params"}, {"expected_length", d}}})};
  nlohmann::json problems = nlohmann::json::array();
  out.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const std::string field = "params[" + std::to_string(k) + "]";
    if (!p[k].is_number()) {
      problems.push_back({{"field", field}, {"name", ranges[k].name}, {"message", "not a number"}});
      continue;
    }
    out[k] = p[k].get<double>();
    if (!std::isfinite(out[k]) || !ranges[k].contains(out[k]))
      problems.push_back({{"field", field},
                          {"name", ranges[k].name},
                          {"message", "outside range"},
                          {"min", ranges[k].lo},
                          {"max", ranges[k].hi},
                          {"value", out[k]}});
  }
  if (!problems.empty()) return HttpResult{422, error_body("invalid params", problems)};
  return std::nullopt;
}

}  // namespace detail

inline HttpResult meta_response(const ModelBundle& b) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& r : b.checkpoint.param_ranges)
    params.push_back({{"name", r.name}, {"min", r.lo}, {"max", r.hi}});
  nlohmann::json body = {{"params", params},
                         {"grid_shape", detail::shape_json(b.checkpoint.grid_shape())},
                         {"has_calibration", b.table.has_value()}};
  if (b.table) {
    body["calibration_size"] = b.table->n;
    body["calibration_delta"] = b.table->delta;
    body["calibration_pooled"] = b.table->pooled;
    body["calibration_tail_rule"] = to_string(b.table->tail_rule);
    body["max_attainable_confidence"] = b.table->max_attainable_confidence();
  } else {
    body["calibration_size"] = nullptr;
    body["calibration_delta"] = nullptr;
    body["calibration_pooled"] = nullptr;
    body["calibration_tail_rule"] = nullptr;
    body["max_attainable_confidence"] = nullptr;
  }
  return {200, body};
}

inline HttpResult predict_response(const ModelBundle& b, const nlohmann::json& req) {
  std::vector<double> x;
  if (auto err = detail::parse_params(b, req, x)) return *err;
  const FieldSummary s = predict_summary(b.checkpoint, x);
  return {200,
          {{"shape", detail::shape_json(s.shape)},
           {"mean", s.mean},
           {"aleatoric", s.aleatoric},
           {"epistemic", s.epistemic}}};
}

// Interval grids at confidence `level`.  Calibrated bands shift the
// table-level raw interval by per-element thresholds at miscoverage
// 1 - level; raw bands use delta = 1 - level directly.
inline HttpResult interval_response(const ModelBundle& b, const nlohmann::json& req) {
  std::vector<double> x;
  if (auto err = detail::parse_params(b, req, x)) return *err;
  if (!req.contains("level") || !req["level"].is_number())
    return {422, detail::error_body("'level' must be a number in (0,1)")};
  const double level = req["level"].get<double>();
  if (!(level > 0.0 && level < 1.0))
    return {422, detail::error_body("'level' must lie in (0,1)")};
  bool calibrated = false;
  if (req.contains("calibrated")) {
    if (!req["calibrated"].is_boolean())
      return {422, detail::error_body("'calibrated' must be a boolean")};
    calibrated = req["calibrated"].get<bool>();
  }

  const MiscoverageLevel miscoverage(1.0 - level);
  const EvidentialField f = b.checkpoint.predict(x);
  std::vector<double> lo(f.size()), hi(f.size()), width(f.size());
  nlohmann::json bound = nullptr;
  if (calibrated) {
    if (!b.table) return {409, detail::error_body("calibrated interval requested but no calibration table is loaded")};
    const CalibrationTable& t = *b.table;
    const std::size_t n_eff = t.block_size();
    if (conformal_rank(n_eff, t.side_level(miscoverage)) > n_eff)
      return {422, detail::error_body(
                       "level unattainable with calibration size " + std::to_string(n_eff),
                       {{{"field", "level"},
                         {"max_attainable", t.max_attainable_confidence()}}})};
    const auto raw = raw_intervals(b.checkpoint, f, t.delta);
    const auto cal = calibrate_field(raw, thresholds(t, miscoverage), miscoverage);
    for (std::size_t i = 0; i < f.size(); ++i) {
      lo[i] = cal[i].lo;
      hi[i] = cal[i].hi;
      width[i] = hi[i] - lo[i];
    }
    bound = t.coverage_upper_bound(miscoverage);
  } else {
    const auto raw = raw_intervals(b.checkpoint, f, miscoverage.value());
    for (std::size_t i = 0; i < f.size(); ++i) {
      lo[i] = raw[i].lo;
      hi[i] = raw[i].hi;
      width[i] = hi[i] - lo[i];
    }
  }
  return {200,
          {{"shape", detail::shape_json(f.shape)},
           {"level", level},
           {"calibrated", calibrated},
           {"lo", lo},
           {"hi", hi},
           {"width", width},
           {"achieved_level_bound", bound}}};
}

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::string> cors_origin;
};

// Owns every bundle it has published; requests before the first publish get
// 503.  Earlier bundles stay alive so in-flight requests never dangle.
class Service {
 public:
  Service() = default;
  explicit Service(ModelBundle bundle) { publish(std::move(bundle)); }

  void publish(ModelBundle bundle) {
    std::lock_guard lock(publish_mutex_);
    owned_.push_back(std::make_unique<const ModelBundle>(std::move(bundle)));
    bundle_.store(owned_.back().get(), std::memory_order_release);
  }
  const ModelBundle* bundle() const { return bundle_.load(std::memory_order_acquire); }

  HttpResult meta() const {
    const auto* b = bundle();
    if (!b) return not_loaded();
    return meta_response(*b);
  }
  HttpResult predict(const std::string& body) const { return with_body(body, &predict_response); }
  HttpResult interval(const std::string& body) const { return with_body(body, &interval_response); }

  void mount(httplib::Server& srv, const ServerOptions& opts) const {
    auto send = [opts](httplib::Response& res, const HttpResult& r) {
      res.status = r.status;
      if (opts.cors_origin) res.set_header("Access-Control-Allow-Origin", *opts.cors_origin);
      res.set_content(r.body.dump(), "application/json");
    };
    srv.Get("/meta", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, meta());
    });
    srv.Post("/predict", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, predict(req.body));
    });
    srv.Post("/interval", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, interval(req.body));
    });
    if (opts.cors_origin) {
      srv.Options(R"(/.*)", [opts](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", *opts.cors_origin);
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
      });
    }
  }

 private:
  static HttpResult not_loaded() { return {503, detail::error_body("model bundle not loaded yet")}; }

  template <typename Handler>
  HttpResult with_body(const std::string& body, Handler handler) const {
    const auto* b = bundle();
    if (!b) return not_loaded();
    nlohmann::json req = nlohmann::json::parse(body, nullptr, false);
    if (req.is_discarded()) return {400, detail::error_body("request body is not valid JSON")};
    try {
      return handler(*b, req);
    } catch (const std::exception& e) {
      return {500, detail::error_body(e.what())};
    }
  }

  std::mutex publish_mutex_;
  std::vector<std::unique_ptr<const ModelBundle>> owned_;
  std::atomic<const ModelBundle*> bundle_{nullptr};
};

}  // namespace evisurro

#endif  // EVISURRO_SERVER_HPP_
