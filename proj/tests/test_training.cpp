#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "evisurro/training.hpp"
#include "test_util.hpp"

using namespace evisurro;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

EnsembleDataset small_dataset(std::size_t n_train = 16, std::uint64_t seed = 1) {
  SimulatorSpec spec;
  spec.grid_shape = GridShape{{8, 8}};
  return generate_dataset(spec, n_train, 4, 4, seed);
}

NetConfig small_net() {
  NetConfig c;
  c.hidden_sizes = {16, 16};
  c.seed = 3;
  return c;
}

TrainConfig short_run(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.seed = 9;
  return t;
}

}  // namespace

TEST_CASE("normalization maps the training range onto [-1, 1]") {
  const auto ds = small_dataset();
  const auto train = ds.members_in(Split::train);
  const auto tf = NormalizationTransform::fit(train);
  double lo = 1e300, hi = -1e300;
  for (const auto* m : train)
    for (double v : m->field) {
      const double z = tf.normalize(v);
      CHECK(z >= -1.0 - 1e-15);
      CHECK(z <= 1.0 + 1e-15);
      CHECK_THAT(tf.denormalize(z), WithinAbs(v, 1e-12));
      lo = std::min(lo, z);
      hi = std::max(hi, z);
    }
  CHECK_THAT(lo, WithinAbs(-1.0, 1e-15));
  CHECK_THAT(hi, WithinAbs(1.0, 1e-15));
  CHECK(tf.denormalize_var(4.0) == 4.0 * tf.half_range() * tf.half_range());

  EnsembleMember flat{0, {0.5, 0.5, 0.5}, std::vector<double>(4, 2.0), std::nullopt};
  CHECK_THROWS_AS(NormalizationTransform::fit({&flat}), DataError);
}

TEST_CASE("adam step arithmetic") {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  std::vector<double> p{1.0, -2.0};
  AdamState st;

  std::vector<double> zero{0.0, 0.0};
  auto q = p;
  adam_step(q, zero, st, cfg);
  CHECK(q == p);

  st = {};
  std::vector<double> g1{0.5, -0.1}, g2{-0.2, 0.3};
  adam_step(p, g1, st, cfg);
  CHECK_THAT(p[0], WithinAbs(0.900000002, 1e-15));
  CHECK_THAT(p[1], WithinAbs(-1.90000001, 1e-14));
  adam_step(p, g2, st, cfg);
  CHECK_THAT(p[0], WithinAbs(0.8654394181165108, 1e-14));
  CHECK_THAT(p[1], WithinAbs(-1.9494189911200654, 1e-14));
  CHECK(st.step == 2u);

  std::vector<double> wrong{1.0};
  CHECK_THROWS_AS(adam_step(p, wrong, st, cfg), ShapeError);
}

TEST_CASE("adam update approaches lr * sign(g) under a constant gradient") {
  TrainConfig cfg;
  std::vector<double> p{0.0, 0.0};
  std::vector<double> g{3.0, -0.02};
  AdamState st;
  for (int i = 0; i < 5000; ++i) adam_step(p, g, st, cfg);
  const auto before = p;
  adam_step(p, g, st, cfg);
  CHECK_THAT(p[0] - before[0], WithinRel(-cfg.learning_rate, 1e-6));
  CHECK_THAT(p[1] - before[1], WithinRel(cfg.learning_rate, 1e-5));
}

TEST_CASE("training config validation") {
  TrainConfig t;
  CHECK(t.valid());
  CHECK(t.adam_beta1 == 0.9);
  CHECK(t.adam_beta2 == 0.999);
  CHECK(t.adam_eps == 1e-8);
  CHECK(t.learning_rate == 1e-3);
  t.adam_beta1 = 1.0;
  CHECK_FALSE(t.valid());
  t = {};
  t.learning_rate = 0.0;
  CHECK_FALSE(t.valid());
  t = {};
  t.weights.lambda_reg = -1.0;
  CHECK_FALSE(t.valid());
}

TEST_CASE("fit is deterministic and reduces the loss") {
  const auto ds = small_dataset();
  const auto a = fit(ds, small_net(), short_run(40));
  const auto b = fit(ds, small_net(), short_run(40));
  CHECK(a.loss_history() == b.loss_history());
  CHECK(encode_checkpoint(a) == encode_checkpoint(b));
  REQUIRE(a.history.size() == 40u);
  CHECK(a.history.back().total < a.history.front().total);
  for (const auto& r : a.history) {
    CHECK(std::isfinite(r.total));
    CHECK_THAT(r.total, WithinRel(r.nll + 0.01 * r.reg + 0.05 * r.u, 1e-12));
  }
  for (const auto* m : ds.members_in(Split::test)) CHECK(a.predict(m->params).valid());

  auto other = short_run(40);
  other.seed = 10;
  CHECK(fit(ds, small_net(), other).loss_history() != a.loss_history());
}

TEST_CASE("resumed training continues the same trajectory") {
  testutil::TempDir dir("resume");
  const auto ds = small_dataset();
  const auto full = fit(ds, small_net(), short_run(12));
  auto part = fit(ds, small_net(), short_run(7));
  save_checkpoint(part, dir / "part.ckpt");
  auto resumed = load_checkpoint(dir / "part.ckpt");
  resumed.train_config.epochs = 5;
  continue_training(resumed, ds);
  REQUIRE(resumed.history.size() == 12u);
  CHECK(resumed.loss_history() == full.loss_history());
  resumed.train_config.epochs = full.train_config.epochs;
  CHECK(encode_checkpoint(resumed) == encode_checkpoint(full));
}

TEST_CASE("pure NLL run") {
  const auto ds = small_dataset();
  auto cfg = short_run(5);
  cfg.weights = {0.0, 0.0};
  const auto c = fit(ds, small_net(), cfg);
  for (const auto& r : c.history) CHECK(r.total == r.nll);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto ds = small_dataset();
  auto cfg = short_run(50);
  cfg.learning_rate = 1e300;
  try {
    (void)fit(ds, small_net(), cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("members") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  testutil::TempDir dir("ckpt");
  const auto ds = small_dataset();
  const auto c = fit(ds, small_net(), short_run(6));
  save_checkpoint(c, dir / "model.ckpt");
  CHECK(std::filesystem::exists(dir.path() / "model.ckpt.manifest"));
  const auto bytes = testutil::slurp(dir / "model.ckpt");
  CHECK(bytes.substr(0, 9) == "EVISURRO1");
  const auto r = load_checkpoint(dir / "model.ckpt");
  CHECK(encode_checkpoint(r) == bytes);
  CHECK(r.loss_history() == c.loss_history());
  CHECK(r.train_ids == c.train_ids);
  for (const auto* m : ds.members_in(Split::test)) {
    const auto fa = c.predict(m->params), fb = r.predict(m->params);
    for (std::size_t i = 0; i < fa.size(); ++i) {
      CHECK(fa.params[i].gamma == fb.params[i].gamma);
      CHECK(fa.params[i].nu == fb.params[i].nu);
      CHECK(fa.params[i].alpha_shape == fb.params[i].alpha_shape);
      CHECK(fa.params[i].beta_scale == fb.params[i].beta_scale);
    }
  }
}

TEST_CASE("corrupt and mismatched checkpoint files") {
  testutil::TempDir dir("badckpt");
  const auto c = fit(small_dataset(), small_net(), short_run(2));
  const std::string bytes = encode_checkpoint(c);

  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{20}, std::size_t{5}}) {
    testutil::spit(dir / "t.ckpt", bytes.substr(0, cut));
    INFO("cut at " << cut);
    CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), DataError);
  }
  try {
    testutil::spit(dir / "t.ckpt", bytes.substr(0, bytes.size() - 3));
    (void)load_checkpoint(dir / "t.ckpt");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("corrupt") != std::string::npos);
  }

  std::string v2 = bytes;
  const std::uint32_t two = 2;
  std::memcpy(v2.data() + 9, &two, 4);
  testutil::spit(dir / "v.ckpt", v2);
  CHECK_THROWS_AS(load_checkpoint(dir / "v.ckpt"), VersionError);

  std::string magic = bytes;
  magic[0] = 'X';
  testutil::spit(dir / "m.ckpt", magic);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST_CASE("single-member overfit drives gamma onto the target") {
  SimulatorSpec spec;
  spec.grid_shape = GridShape{{8, 8}};
  const auto ds = generate_dataset(spec, 1, 0, 0, 4);
  NetConfig nc = small_net();
  auto cfg = short_run(2000);
  cfg.batch_size = 1;
  cfg.weights = {0.0, 0.0};
  const auto c = fit(ds, nc, cfg);
  const auto& m = ds.members.front();
  const auto f = c.predict(m.params);
  double se = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double d = f.params[i].gamma - c.transform.normalize(m.field[i]);
    se += d * d;
  }
  CHECK(std::sqrt(se / static_cast<double>(f.size())) < 0.02);
  CHECK(c.history.back().nll < c.history.front().nll);
}

TEST_CASE("summaries are reported in original units") {
  const auto ds = small_dataset();
  const auto c = fit(ds, small_net(), short_run(3));
  const auto& x = ds.members.front().params;
  const auto f = c.predict(x);
  const auto s = predict_summary(c, x);
  const double h = c.transform.half_range();
  for (std::size_t i = 0; i < f.size(); ++i) {
    CHECK_THAT(s.mean[i], WithinAbs(c.transform.denormalize(f.params[i].gamma), 1e-12));
    CHECK_THAT(s.aleatoric[i], WithinRel(aleatoric(f.params[i]) * h * h, 1e-12));
    CHECK_THAT(s.epistemic[i], WithinRel(epistemic(f.params[i]) * h * h, 1e-12));
  }
  const auto raw = predict_raw_intervals(c, x, 0.1);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto iv = raw_interval(f.params[i], 0.1);
    CHECK_THAT(raw[i].lo, WithinAbs(c.transform.denormalize(iv.lo), 1e-12));
    CHECK_THAT(raw[i].hi, WithinAbs(c.transform.denormalize(iv.hi), 1e-12));
  }
}
