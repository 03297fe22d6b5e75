#include <catch_amalgamated.hpp>

#include <thread>
#include <vector>

#include "evisurro/server.hpp"

using namespace evisurro;
using nlohmann::json;

namespace {

struct Fixture {
  EnsembleDataset ds;
  Checkpoint ckpt;
  CalibrationTable table;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    SimulatorSpec spec;
    spec.grid_shape = GridShape{{4, 6}};
    Fixture x;
    x.ds = generate_dataset(spec, 16, 40, 4, 8);
    NetConfig nc;
    nc.hidden_sizes = {8, 8};
    TrainConfig tc;
    tc.epochs = 20;
    tc.batch_size = 4;
    x.ckpt = fit(x.ds, nc, tc);
    x.table = build_table(x.ckpt, x.ds, 0.1);
    return x;
  }();
  return f;
}

ModelBundle bundle(bool with_table) {
  const auto& f = fixture();
  return ModelBundle(f.ckpt, with_table ? std::optional<CalibrationTable>(f.table) : std::nullopt);
}

json body_of(double a, double b, double c) { return {{"params", {a, b, c}}}; }

}  // namespace

TEST_CASE("meta describes the bundle") {
  const auto with = meta_response(bundle(true));
  REQUIRE(with.status == 200);
  CHECK(with.body["grid_shape"] == json::array({4, 6}));
  CHECK(with.body["params"].size() == 3u);
  CHECK(with.body["params"][0]["name"] == "shift");
  CHECK(with.body["params"][0]["min"] == 0.0);
  CHECK(with.body["params"][0]["max"] == 1.0);
  CHECK(with.body["has_calibration"] == true);
  CHECK(with.body["calibration_size"] == 40);
  CHECK(with.body["max_attainable_confidence"].get<double>() == 1.0 - 2.0 / 41.0);
  CHECK(with.body["calibration_tail_rule"] == "split");

  const auto without = meta_response(bundle(false));
  CHECK(without.body["has_calibration"] == false);
  CHECK(without.body["calibration_size"].is_null());
  CHECK(without.body["max_attainable_confidence"].is_null());
}

TEST_CASE("predict returns flat grids in original units") {
  const auto b = bundle(false);
  const auto r = predict_response(b, body_of(0.2, 0.5, 0.8));
  REQUIRE(r.status == 200);
  CHECK(r.body["shape"] == json::array({4, 6}));
  for (const char* k : {"mean", "aleatoric", "epistemic"}) CHECK(r.body[k].size() == 24u);
  const auto s = predict_summary(b.checkpoint, std::vector<double>{0.2, 0.5, 0.8});
  CHECK(r.body["mean"].get<std::vector<double>>() == s.mean);
  CHECK(r.body["epistemic"].get<std::vector<double>>() == s.epistemic);
  for (double v : r.body["aleatoric"].get<std::vector<double>>()) CHECK(v > 0.0);

  // Range ends are inclusive.
  CHECK(predict_response(b, body_of(0.0, 1.0, 0.0)).status == 200);
  CHECK(predict_response(b, body_of(1.0, 0.0, 1.0)).status == 200);
}

TEST_CASE("predict validation errors") {
  const auto b = bundle(false);
  const auto short_req = predict_response(b, json{{"params", {0.1, 0.2}}});
  CHECK(short_req.status == 422);
  CHECK(short_req.body["error"].get<std::string>().find("expected 3") != std::string::npos);
  CHECK(short_req.body["detail"][0]["expected_length"] == 3);

  const auto out = predict_response(b, body_of(0.1, 1.2, -0.5));
  REQUIRE(out.status == 422);
  REQUIRE(out.body["detail"].size() == 2u);
  CHECK(out.body["detail"][0]["field"] == "params[1]");
  CHECK(out.body["detail"][0]["name"] == "spread");
  CHECK(out.body["detail"][1]["field"] == "params[2]");

  CHECK(predict_response(b, json{{"x", 1}}).status == 422);
  CHECK(predict_response(b, json{{"params", {0.1, "a", 0.3}}}).status == 422);
}

TEST_CASE("raw intervals") {
  const auto b = bundle(false);
  json req = body_of(0.3, 0.3, 0.6);
  req["level"] = 0.95;
  const auto r = interval_response(b, req);
  REQUIRE(r.status == 200);
  CHECK(r.body["calibrated"] == false);
  CHECK(r.body["achieved_level_bound"].is_null());
  const auto lo = r.body["lo"].get<std::vector<double>>();
  const auto hi = r.body["hi"].get<std::vector<double>>();
  const auto width = r.body["width"].get<std::vector<double>>();
  const auto mean = predict_response(b, req).body["mean"].get<std::vector<double>>();
  for (std::size_t i = 0; i < lo.size(); ++i) {
    CHECK(width[i] == hi[i] - lo[i]);
    CHECK_THAT(0.5 * (lo[i] + hi[i]), Catch::Matchers::WithinAbs(mean[i], 1e-12));
  }
  CHECK(interval_response(b, req).body.dump() == r.body.dump());

  req["level"] = 1.0;
  CHECK(interval_response(b, req).status == 422);
  req.erase("level");
  CHECK(interval_response(b, req).status == 422);
}

TEST_CASE("calibrated intervals") {
  const auto& f = fixture();
  json req = body_of(0.6, 0.1, 0.4);
  req["level"] = 0.9;
  req["calibrated"] = true;

  CHECK(interval_response(bundle(false), req).status == 409);

  const auto b = bundle(true);
  const auto r = interval_response(b, req);
  REQUIRE(r.status == 200);
  CHECK(r.body["calibrated"] == true);
  CHECK(r.body["achieved_level_bound"].get<double>() == std::min(1.0, 0.9 + 2.0 / 41.0));

  // Offline recomputation through the library gives the same numbers.
  const std::vector<double> x{0.6, 0.1, 0.4};
  const MiscoverageLevel a(1.0 - 0.9);
  const auto raw = predict_raw_intervals(f.ckpt, x, f.table.delta);
  const auto cal = calibrate_field(raw, thresholds(f.table, a), a);
  const auto lo = r.body["lo"].get<std::vector<double>>();
  const auto hi = r.body["hi"].get<std::vector<double>>();
  const auto width = r.body["width"].get<std::vector<double>>();
  for (std::size_t i = 0; i < cal.size(); ++i) {
    CHECK(lo[i] == cal[i].lo);
    CHECK(hi[i] == cal[i].hi);
    CHECK(width[i] == hi[i] - lo[i]);
  }

  // n = 40: the split rule needs ceil(41 * (1 - a/2)) <= 40, i.e. a >= 2/41.
  req["level"] = 0.97;
  const auto bad = interval_response(b, req);
  REQUIRE(bad.status == 422);
  CHECK(bad.body["detail"][0]["max_attainable"].get<double>() == 1.0 - 2.0 / 41.0);
  req["level"] = 0.95;
  CHECK(interval_response(b, req).status == 200);

  req["calibrated"] = "yes";
  CHECK(interval_response(b, req).status == 422);
}

TEST_CASE("service lifecycle and body parsing") {
  Service svc;
  CHECK(svc.meta().status == 503);
  CHECK(svc.predict(body_of(0.1, 0.1, 0.1).dump()).status == 503);
  svc.publish(bundle(true));
  CHECK(svc.meta().status == 200);
  CHECK(svc.predict("{not json").status == 400);
  CHECK(svc.interval("").status == 400);
  CHECK(svc.predict(body_of(0.1, 0.1, 0.1).dump()).status == 200);
  svc.publish(bundle(false));
  CHECK(svc.meta().body["has_calibration"] == false);
}

TEST_CASE("http endpoints") {
  Service svc(bundle(true));
  httplib::Server srv;
  svc.mount(srv, ServerOptions{"127.0.0.1", 0, std::string("http://localhost:5173")});
  const int port = srv.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto meta = cli.Get("/meta");
  REQUIRE(meta);
  CHECK(meta->status == 200);
  CHECK(meta->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
  CHECK(json::parse(meta->body) == svc.meta().body);

  auto missing = cli.Get("/nope");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  auto bad = cli.Post("/predict", "{", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  auto pre = cli.Options("/interval");
  REQUIRE(pre);
  CHECK(pre->status == 204);

  json req = body_of(0.4, 0.7, 0.2);
  req["level"] = 0.8;
  req["calibrated"] = true;
  const std::string payload = req.dump();
  const std::string expected = svc.interval(payload).body.dump();
  std::vector<std::string> got(16);
  std::vector<int> status(16, 0);
  std::vector<std::thread> clients;
  for (int i = 0; i < 16; ++i)
    clients.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      if (auto res = c.Post("/interval", payload, "application/json")) {
        status[i] = res->status;
        got[i] = res->body;
      }
    });
  for (auto& c : clients) c.join();
  for (int i = 0; i < 16; ++i) {
    CHECK(status[i] == 200);
    CHECK(got[i] == expected);
  }

  srv.stop();
  th.join();
}
