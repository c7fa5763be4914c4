#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "dseb/harness.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using dseb::Checkpoint;
using dseb::EnergyNetConfig;
using dseb::EnergyNetParams;
using dseb::ImagePair;
using dseb::Tensor;
using dseb::real;

namespace {

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Tensor random_image(std::mt19937_64& rng, const dseb::Shape& shape, real lo = 0, real hi = 1) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  std::vector<real> v(static_cast<std::size_t>(n));
  for (real& x : v) x = oracle::uniform(rng, lo, hi);
  return Tensor(shape, std::move(v));
}

EnergyNetParams randomized_params(const EnergyNetConfig& cfg, std::mt19937_64& rng) {
  EnergyNetParams p = dseb::init_params(cfg, rng());
  // Biases initialize to zero; fill everything with noise so round trips
  // exercise nontrivial bytes in every tensor.
  dseb::for_each_param(p, [&](const std::string&, Tensor& t) {
    std::vector<real> v(t.values().size());
    for (real& x : v) x = oracle::uniform(rng, -2, 2);
    t = Tensor(t.shape(), std::move(v));
  });
  return p;
}

EnergyNetParams zero_params(const EnergyNetConfig& cfg) {
  EnergyNetParams p = dseb::init_params(cfg, 0);
  dseb::for_each_param(p, [&](const std::string&, Tensor& t) {
    t = Tensor::zeros(t.shape());
  });
  return p;
}

bool params_equal(const EnergyNetParams& a, const EnergyNetParams& b) {
  if (a.config != b.config) return false;
  bool ok = true;
  const auto la = testutil::param_list(a), lb = testutil::param_list(b);
  if (la.size() != lb.size()) return false;
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (la[i].name != lb[i].name || la[i].tensor.shape() != lb[i].tensor.shape()) return false;
    const auto va = la[i].tensor.values(), vb = lb[i].tensor.values();
    for (std::size_t k = 0; k < va.size(); ++k)
      if (va[k] != vb[k]) ok = false;
  }
  return ok;
}

}  // namespace

TEST_CASE("mse255 frozen values and oracle agreement") {
  const Tensor a = Tensor::full({1, 1, 3, 3}, real(0.4));
  CHECK(dseb::mse255(a, a) == real(0));

  CHECK(dseb::mse255(Tensor::full({1, 1, 2, 2}, real(1)), Tensor::zeros({1, 1, 2, 2})) ==
        real(65025));

  std::mt19937_64 rng(41);
  const Tensor p = random_image(rng, {1, 1, 5, 5});
  const Tensor q = random_image(rng, {1, 1, 5, 5});
  real want = 0;
  for (std::size_t k = 0; k < 25; ++k) {
    const real d = (p.values()[k] - q.values()[k]) * 255;
    want += d * d;
  }
  want /= 25;
  CHECK(dseb::mse255(p, q) == doctest::Approx(want).epsilon(1e-9));
  CHECK_THROWS_AS(dseb::mse255(p, Tensor::zeros({1, 1, 5, 6})), std::invalid_argument);
}

TEST_CASE("psnr frozen values") {
  CHECK(dseb::psnr_from_mse(real(65025)) == doctest::Approx(0).epsilon(1e-12));
  CHECK(dseb::psnr_from_mse(real(650.25)) == doctest::Approx(20).epsilon(1e-12));
  CHECK(dseb::psnr_from_mse(real(497.35)) == doctest::Approx(21.164).epsilon(1e-4));
  CHECK(std::isinf(dseb::psnr_from_mse(real(0))));
  CHECK_THROWS_AS(dseb::psnr_from_mse(real(-1)), std::invalid_argument);

  // Strictly decreasing in the error.
  real last = std::numeric_limits<real>::infinity();
  for (real mse : {real(1), real(10), real(650.25), real(5000), real(65025)}) {
    const real db = dseb::psnr_from_mse(mse);
    CHECK(db < last);
    last = db;
  }

  const Tensor a = Tensor::full({1, 1, 2, 2}, real(0.5));
  CHECK(std::isinf(dseb::psnr(a, a)));
}

TEST_CASE("checkpoint round trip is bit exact with and without optimizer state") {
  testutil::TempDir dir;
  std::mt19937_64 rng(42);

  EnergyNetConfig cfg;
  cfg.num_conv_layers = 2;
  cfg.feature_maps = 3;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 8;

  Checkpoint ckpt;
  ckpt.params = randomized_params(cfg, rng);
  ckpt.mean_image = random_image(rng, {1, 1, 8, 8});

  dseb::save_checkpoint(dir.file("plain.ckpt"), ckpt);
  const Checkpoint back = dseb::load_checkpoint(dir.file("plain.ckpt"));
  CHECK(params_equal(back.params, ckpt.params));
  CHECK(!back.adam.has_value());
  for (std::size_t k = 0; k < 64; ++k)
    CHECK(back.mean_image.values()[k] == ckpt.mean_image.values()[k]);

  // Re-serializing the loaded checkpoint reproduces the file byte for byte.
  dseb::save_checkpoint(dir.file("again.ckpt"), back);
  CHECK(slurp(dir.file("plain.ckpt")) == slurp(dir.file("again.ckpt")));

  // Now with Adam state attached.
  dseb::AdamState adam = dseb::init_adam(ckpt.params);
  adam.t = 17;
  for (Tensor& t : adam.m) t = random_image(rng, t.shape(), -1, 1);
  for (Tensor& t : adam.v) t = random_image(rng, t.shape(), 0, 1);
  ckpt.adam = adam;

  dseb::save_checkpoint(dir.file("adam.ckpt"), ckpt);
  const Checkpoint back2 = dseb::load_checkpoint(dir.file("adam.ckpt"));
  REQUIRE(back2.adam.has_value());
  CHECK(*back2.adam == adam);
}

TEST_CASE("checkpoint round trip fuzz over config shapes") {
  testutil::TempDir dir;
  std::mt19937_64 rng(43);
  for (int it = 0; it < 12; ++it) {
    EnergyNetConfig cfg;
    cfg.num_conv_layers = 1 + static_cast<int>(rng() % 3);
    cfg.feature_maps = 1 + static_cast<int>(rng() % 4);
    cfg.kernel = 1 + 2 * static_cast<int>(rng() % 3);
    cfg.stride = 1 + static_cast<int>(rng() % 2);
    cfg.input_channels = rng() % 2 ? 1 : 3;
    int side = 1;
    for (int l = 0; l < cfg.num_conv_layers; ++l) side *= cfg.stride;
    cfg.image_side = side * (1 + static_cast<int>(rng() % 3));

    Checkpoint ckpt;
    ckpt.params = randomized_params(cfg, rng);
    ckpt.mean_image =
        random_image(rng, {1, cfg.input_channels, cfg.image_side, cfg.image_side});
    if (rng() % 2) {
      ckpt.adam = dseb::init_adam(ckpt.params);
      ckpt.adam->t = static_cast<std::int64_t>(rng() % 1000);
      for (Tensor& t : ckpt.adam->m) t = random_image(rng, t.shape(), -1, 1);
      for (Tensor& t : ckpt.adam->v) t = random_image(rng, t.shape(), 0, 1);
    }

    const std::string path = dir.file("fuzz" + std::to_string(it) + ".ckpt");
    dseb::save_checkpoint(path, ckpt);
    const Checkpoint back = dseb::load_checkpoint(path);
    CHECK(params_equal(back.params, ckpt.params));
    CHECK(back.adam.has_value() == ckpt.adam.has_value());
    if (back.adam) CHECK(*back.adam == *ckpt.adam);
  }
}

TEST_CASE("checkpoint loader rejects damage with precise errors") {
  testutil::TempDir dir;
  std::mt19937_64 rng(44);
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 1;
  cfg.feature_maps = 2;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 4;

  Checkpoint ckpt;
  ckpt.params = randomized_params(cfg, rng);
  ckpt.mean_image = random_image(rng, {1, 1, 4, 4});
  const std::string path = dir.file("ok.ckpt");
  dseb::save_checkpoint(path, ckpt);
  auto bytes = slurp(path);

  auto write_variant = [&](const std::string& name, std::vector<unsigned char> v) {
    std::ofstream f(dir.file(name), std::ios::binary);
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size()));
  };

  // Truncation at several depths, all named.
  for (std::size_t cut : {std::size_t(2), std::size_t(9), bytes.size() - 3}) {
    write_variant("cut.ckpt", {bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)});
    try {
      dseb::load_checkpoint(dir.file("cut.ckpt"));
      FAIL("expected truncation error at cut " << cut);
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write_variant("magic.ckpt", bad_magic);
  CHECK_THROWS_AS(dseb::load_checkpoint(dir.file("magic.ckpt")), std::runtime_error);

  auto bad_version = bytes;
  bad_version[4] = 9;
  write_variant("version.ckpt", bad_version);
  try {
    dseb::load_checkpoint(dir.file("version.ckpt"));
    FAIL("expected version error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("version 9") != std::string::npos);
  }

  auto trailing = bytes;
  trailing.push_back(0);
  write_variant("trailing.ckpt", trailing);
  CHECK_THROWS_AS(dseb::load_checkpoint(dir.file("trailing.ckpt")), std::runtime_error);
}

TEST_CASE("evaluate with zero weights reproduces the mean-image baseline exactly") {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 2;
  cfg.feature_maps = 2;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 8;

  std::mt19937_64 rng(45);
  std::vector<ImagePair> testset;
  for (int i = 0; i < 5; ++i)
    testset.push_back(dseb::apply_center_mask(random_image(rng, {1, 1, 8, 8}), real(0.25)));

  Checkpoint ckpt;
  ckpt.params = zero_params(cfg);
  ckpt.mean_image = random_image(rng, {1, 1, 8, 8});

  dseb::InferenceConfig ic;
  ic.T = 10;
  const dseb::EvalReport report = dseb::evaluate(ckpt, testset, ic);

  REQUIRE(report.psnr.size() == 5);
  real mean_psnr = 0, mean_mse = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    // Zero weights make the energy constant, so inference never moves off
    // the mean image and the score is the baseline, bit for bit.
    CHECK(report.psnr[i] == dseb::psnr(ckpt.mean_image, testset[i].y));
    mean_psnr += report.psnr[i];
    mean_mse += report.mse[i];
  }
  CHECK(report.infinite_count == 0);
  CHECK(report.mean_psnr == doctest::Approx(mean_psnr / 5).epsilon(1e-12));
  CHECK(report.mean_mse == doctest::Approx(mean_mse / 5).epsilon(1e-12));
}

TEST_CASE("evaluate composite pastes the known pixels back") {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 1;
  cfg.feature_maps = 2;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 4;

  std::mt19937_64 rng(46);
  const Tensor y = random_image(rng, {1, 1, 4, 4}, real(0.2), real(0.9));
  std::vector<ImagePair> testset = {dseb::apply_half_mask(y)};

  Checkpoint ckpt;
  ckpt.params = zero_params(cfg);
  ckpt.mean_image = Tensor::full({1, 1, 4, 4}, real(0.5));

  dseb::InferenceConfig ic;
  ic.T = 3;
  const dseb::EvalReport plain = dseb::evaluate(ckpt, testset, ic, false);
  const dseb::EvalReport pasted = dseb::evaluate(ckpt, testset, ic, true);

  // Composite output differs from the truth only inside the mask, where it
  // still holds the mean value 0.5.
  real want = 0;
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 2; ++w) {
      const real d = (real(0.5) - y.values()[static_cast<std::size_t>(h * 4 + w)]) * 255;
      want += d * d;
    }
  want /= 16;
  CHECK(pasted.mse[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK(pasted.mse[0] < plain.mse[0]);
}

TEST_CASE("evaluate is stable across thread counts and checks shapes") {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 2;
  cfg.feature_maps = 2;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 8;

  std::mt19937_64 rng(47);
  std::vector<ImagePair> testset;
  for (int i = 0; i < 9; ++i)
    testset.push_back(dseb::apply_center_mask(random_image(rng, {1, 1, 8, 8}), real(0.25)));

  Checkpoint ckpt;
  ckpt.params = dseb::init_params(cfg, 7);
  ckpt.mean_image = Tensor::full({1, 1, 8, 8}, real(0.5));

  dseb::InferenceConfig ic;
  ic.T = 4;
  const dseb::EvalReport serial = dseb::evaluate(ckpt, testset, ic, false, 1);
  const dseb::EvalReport parallel = dseb::evaluate(ckpt, testset, ic, false, 4);
  for (std::size_t i = 0; i < testset.size(); ++i) {
    CHECK(serial.mse[i] == parallel.mse[i]);
    CHECK(serial.psnr[i] == parallel.psnr[i]);
  }
  CHECK(serial.mean_psnr == parallel.mean_psnr);

  std::vector<ImagePair> bad = testset;
  bad[3] = dseb::apply_half_mask(random_image(rng, {1, 1, 4, 4}));
  try {
    dseb::evaluate(ckpt, bad, ic);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("image 3") != std::string::npos);
  }
  CHECK_THROWS_AS(dseb::evaluate(ckpt, {}, ic), std::invalid_argument);
}

TEST_CASE("grid export layout") {
  testutil::TempDir dir;
  std::mt19937_64 rng(48);
  const Tensor y = random_image(rng, {1, 1, 4, 4});
  const Tensor x = random_image(rng, {1, 1, 4, 4});
  const Tensor out = random_image(rng, {1, 1, 4, 4});

  dseb::export_grid(dir.file("one.pgm"), {{y, x, out}});
  const Tensor grid = dseb::load_pgm(dir.file("one.pgm"));
  REQUIRE(grid.shape() == dseb::Shape{1, 1, 4, 16});

  // Quantization matches the savers' rounding, so tiles compare exactly
  // against a re-quantized source.
  auto q = [](real v) { return real(std::llround(std::clamp(v, real(0), real(1)) * 255)) / 255; };
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) {
      const auto k = static_cast<std::size_t>(h * 16 + w);
      CHECK(grid.values()[k] == q(y.values()[static_cast<std::size_t>(h * 4 + w)]));
      CHECK(grid.values()[k + 6] == q(x.values()[static_cast<std::size_t>(h * 4 + w)]));
      CHECK(grid.values()[k + 12] == q(out.values()[static_cast<std::size_t>(h * 4 + w)]));
      // Separator columns are white.
      CHECK(grid.values()[static_cast<std::size_t>(h * 16 + 4)] == real(1));
      CHECK(grid.values()[static_cast<std::size_t>(h * 16 + 5)] == real(1));
      CHECK(grid.values()[static_cast<std::size_t>(h * 16 + 10)] == real(1));
      CHECK(grid.values()[static_cast<std::size_t>(h * 16 + 11)] == real(1));
    }

  // Two rows: 4+2+4 tall; identical triples give three identical tiles.
  dseb::export_grid(dir.file("two.png"), {{y, y, y}, {x, x, x}});
  const Tensor grid2 = dseb::load_png(dir.file("two.png"), 1);
  REQUIRE(grid2.shape() == dseb::Shape{1, 1, 10, 16});
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) {
      const real tile = grid2.values()[static_cast<std::size_t>(h * 16 + w)];
      CHECK(grid2.values()[static_cast<std::size_t>(h * 16 + 6 + w)] == tile);
      CHECK(grid2.values()[static_cast<std::size_t>(h * 16 + 12 + w)] == tile);
    }
  // Values outside [0,1] clamp instead of wrapping.
  dseb::export_grid(dir.file("clamp.pgm"),
                    {{Tensor::full({1, 1, 4, 4}, real(1.7)), Tensor::full({1, 1, 4, 4}, real(-0.3)),
                      Tensor::full({1, 1, 4, 4}, real(0.5))}});
  const Tensor grid3 = dseb::load_pgm(dir.file("clamp.pgm"));
  CHECK(grid3.values()[0] == real(1));
  CHECK(grid3.values()[6] == real(0));

  CHECK_THROWS_AS(dseb::export_grid(dir.file("none.pgm"), {}), std::invalid_argument);
  CHECK_THROWS_AS(dseb::export_grid(dir.file("bad.gif"), {{y, x, out}}), std::invalid_argument);
  CHECK_THROWS_AS(dseb::export_grid(dir.file("mix.pgm"),
                                    {{y, x, random_image(rng, {1, 1, 5, 5})}}),
                  std::invalid_argument);
}

TEST_CASE("gradient self-checks stay under the advertised tolerances") {
  CHECK(dseb::gradcheck_first_order(1) < 1e-5);
  CHECK(dseb::gradcheck_second_order(1) < 1e-3);
}
