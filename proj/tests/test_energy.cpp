#include "dseb/energy_net.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

using namespace dseb;

namespace {

std::vector<double> tvec(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

Tensor image_tensor(std::mt19937_64& rng, const EnergyNetConfig& cfg, double lo, double hi) {
  auto v = oracle::random_vec(
      rng, static_cast<std::size_t>(cfg.input_channels) * cfg.image_side * cfg.image_side, lo, hi);
  return Tensor({1, cfg.input_channels, cfg.image_side, cfg.image_side}, {v.begin(), v.end()});
}

EnergyNetParams zeroed(EnergyNetParams p) {
  for_each_param(p, [](const std::string&, Tensor& t) { t = Tensor::zeros(t.shape()); });
  return p;
}

// The same forward computation, but built from the naive reference loops.
double reference_energy(const std::vector<double>& xv, const std::vector<double>& yv,
                        const EnergyNetParams& p) {
  const EnergyNetConfig& cfg = p.config;
  const int k = cfg.kernel, K = cfg.feature_maps, st = cfg.stride, pad = cfg.padding();

  std::vector<std::vector<double>> feats;
  std::vector<int> feat_sides;
  std::vector<double> u = xv;
  int ch = cfg.input_channels, side = cfg.image_side;
  for (const ConvLayer& layer : p.input.conv) {
    int oh = 0;
    u = oracle::relu(oracle::conv2d(u, 1, ch, side, side, tvec(layer.weight), K, k, k,
                                    tvec(layer.bias), st, pad, &oh));
    ch = K;
    side = oh;
    feats.push_back(u);
    feat_sides.push_back(side);
  }
  auto head_i = oracle::fully_connected(u, tvec(p.input.fc.weight), tvec(p.input.fc.bias),
                                        cfg.fc_dim, static_cast<int>(u.size()));

  std::vector<double> v = yv;
  ch = cfg.input_channels;
  side = cfg.image_side;
  for (std::size_t l = 0; l < p.output.conv.size(); ++l) {
    const OutputLayer& layer = p.output.conv[l];
    int oh = 0;
    auto pre = oracle::conv2d(v, 1, ch, side, side, tvec(layer.weight), K, k, k,
                              tvec(layer.bias), st, pad, &oh);
    if (l >= 1) {
      std::vector<double> zb(K, 0.0);
      auto cross = oracle::conv2d(feats[l - 1], 1, K, feat_sides[l - 1], feat_sides[l - 1],
                                  tvec(layer.cross_weight), K, k, k, zb, st, pad);
      for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += cross[i];
      int pool = 1;
      for (std::size_t i = 0; i < l; ++i) pool *= st;
      auto z = oracle::avg_downsample(yv, 1, cfg.input_channels, cfg.image_side,
                                      cfg.image_side, pool);
      auto zc = oracle::conv2d(z, 1, cfg.input_channels, side, side, tvec(layer.image_weight),
                               K, k, k, zb, st, pad);
      for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += zc[i];
    }
    v = oracle::relu(pre);
    ch = K;
    side = oh;
  }
  auto head_o = oracle::fully_connected(v, tvec(p.output.fc.weight), tvec(p.output.fc.bias),
                                        cfg.fc_dim, static_cast<int>(v.size()));

  double e = 0.0;
  for (int i = 0; i < cfg.fc_dim; ++i) e += head_i[i] + head_o[i];
  return e;
}

EnergyNetConfig tiny_config() {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 2;
  cfg.feature_maps = 2;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.image_side = 8;
  return cfg;
}

}  // namespace

TEST_CASE("config validation") {
  EnergyNetConfig cfg;
  cfg.image_side = 16;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.side_at(3) == 2);

  EnergyNetConfig bad = cfg;
  bad.image_side = 28;  // 28 is not divisible by 2^3
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.kernel = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.fc_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.image_side = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("init_params is deterministic with zero biases and scaled weights") {
  EnergyNetConfig cfg;
  cfg.image_side = 16;
  EnergyNetParams a = init_params(cfg, 99);
  EnergyNetParams b = init_params(cfg, 99);

  std::vector<std::string> names;
  for_each_param(a, [&](const std::string& name, const Tensor& t) {
    names.push_back(name);
    if (name.ends_with("bias")) {
      for (real v : t.values()) CHECK(v == 0.0);
    }
  });
  CHECK(names == std::vector<std::string>{
                     "input/conv0/weight", "input/conv0/bias", "input/conv1/weight",
                     "input/conv1/bias", "input/conv2/weight", "input/conv2/bias",
                     "input/fc/weight", "input/fc/bias", "output/conv0/weight",
                     "output/conv0/bias", "output/conv1/weight", "output/conv1/cross_weight",
                     "output/conv1/image_weight", "output/conv1/bias", "output/conv2/weight",
                     "output/conv2/cross_weight", "output/conv2/image_weight",
                     "output/conv2/bias", "output/fc/weight", "output/fc/bias"});

  std::size_t checked = 0;
  for_each_param(b, [&](const std::string& name, const Tensor& t) {
    for_each_param(a, [&](const std::string& na, const Tensor& ta) {
      if (na != name) return;
      ++checked;
      REQUIRE(ta.shape() == t.shape());
      for (std::size_t i = 0; i < t.values().size(); ++i)
        CHECK(ta.values()[i] == t.values()[i]);
    });
  });
  CHECK(checked == names.size());

  CHECK(a.input.conv[0].weight.shape() == Shape{32, 1, 5, 5});
  CHECK(a.input.conv[1].weight.shape() == Shape{32, 32, 5, 5});
  CHECK(a.input.fc.weight.shape() == Shape{1, 32 * 2 * 2});
  CHECK(a.output.conv[1].cross_weight.shape() == Shape{32, 32, 5, 5});
  CHECK(a.output.conv[1].image_weight.shape() == Shape{32, 1, 5, 5});
  CHECK(!a.output.conv[0].cross_weight.defined());
  CHECK(!a.output.conv[0].image_weight.defined());

  // Uniform on [-m, m] has variance m^2/3; the first-layer bound uses
  // fan_in = 25, so the sample variance should sit near (6/25)/3.
  const Tensor& w = a.input.conv[0].weight;
  double mean = 0.0;
  for (real v : w.values()) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (real v : w.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size() - 1);
  const double target = (6.0 / 25.0) / 3.0;
  CHECK(var > 0.8 * target);
  CHECK(var < 1.2 * target);
}

TEST_CASE("all-zero parameters produce zero features and zero energy") {
  std::mt19937_64 rng(5);
  EnergyNetConfig cfg = tiny_config();
  EnergyNetParams p = zeroed(init_params(cfg, 1));
  Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
  Tensor y = image_tensor(rng, cfg, 0.0, 1.0);

  InputTrace trace = input_path_forward(x, p);
  REQUIRE(trace.features.size() == 2);
  for (const Tensor& f : trace.features)
    for (real v : f.values()) CHECK(v == 0.0);
  for (real v : trace.fc_out.values()) CHECK(v == 0.0);
  CHECK(energy(x, y, p).item() == 0.0);

  // Heads' biases are the only nonzero parameters: they flow straight
  // through to the energy.
  EnergyNetParams pb = p;
  pb.input.fc.bias = Tensor({1}, {2.5});
  pb.output.fc.bias = Tensor({1}, {-0.75});
  CHECK(energy(x, y, pb).item() == doctest::Approx(1.75).epsilon(1e-12));
}

TEST_CASE("single identity layer passes nonnegative images through") {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 1;
  cfg.feature_maps = 1;
  cfg.kernel = 1;
  cfg.stride = 1;
  cfg.image_side = 4;
  EnergyNetParams p = zeroed(init_params(cfg, 1));
  p.input.conv[0].weight = Tensor({1, 1, 1, 1}, {1.0});

  std::mt19937_64 rng(6);
  Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
  InputTrace trace = input_path_forward(x, p);
  for (std::size_t i = 0; i < static_cast<std::size_t>(x.size()); ++i)
    CHECK(trace.features[0].values()[i] == x.values()[i]);
}

TEST_CASE("energy equals the reference-loop composition") {
  std::mt19937_64 rng(21);
  EnergyNetConfig cfg = tiny_config();
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    EnergyNetParams p = init_params(cfg, seed);
    Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
    Tensor y = image_tensor(rng, cfg, 0.0, 1.0);
    const double expect = reference_energy(tvec(x), tvec(y), p);
    const double got = energy(x, y, p).item();
    CHECK(std::abs(got - expect) <= 1e-12 * std::max(1.0, std::abs(expect)));
  }
}

TEST_CASE("with only cross-connections live the energy ignores the candidate") {
  std::mt19937_64 rng(33);
  EnergyNetConfig cfg = tiny_config();
  EnergyNetParams p = init_params(cfg, 17);
  // Kill every path by which the candidate could reach the energy: the
  // main chain of its path and the rescaled-image connections.
  for (OutputLayer& layer : p.output.conv) {
    layer.weight = Tensor::zeros(layer.weight.shape());
    if (layer.image_weight.defined())
      layer.image_weight = Tensor::zeros(layer.image_weight.shape());
  }

  Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
  Graph g;
  Tensor y = g.leaf(image_tensor(rng, cfg, 0.0, 1.0));
  Tensor e = energy(x, y, p);
  auto gy = grad(e, {y});
  for (real v : gy[0].values()) CHECK(v == 0.0);

  // And the energy still reacts to the occluded image through the
  // cross-connections.
  Tensor x2 = image_tensor(rng, cfg, 0.0, 1.0);
  CHECK(energy(x, y.detach(), p).item() != energy(x2, y.detach(), p).item());
}

TEST_CASE("energy gradient w.r.t. the candidate matches finite differences") {
  std::mt19937_64 rng(8);
  EnergyNetConfig cfg = tiny_config();
  EnergyNetParams p = init_params(cfg, 11);
  Tensor x = image_tensor(rng, cfg, 0.1, 0.9);
  Tensor y0 = image_tensor(rng, cfg, 0.1, 0.9);
  auto f = [&](const Tensor& y) { return energy(x, y, p); };
  CHECK(finite_difference_check(f, y0) < 1e-5);
}

TEST_CASE("energy gradient w.r.t. parameters matches finite differences") {
  std::mt19937_64 rng(9);
  EnergyNetConfig cfg = tiny_config();
  EnergyNetParams base = init_params(cfg, 13);
  Tensor x = image_tensor(rng, cfg, 0.1, 0.9);
  Tensor y = image_tensor(rng, cfg, 0.1, 0.9);

  auto check_tensor = [&](const std::string& target) {
    auto f = [&](const Tensor& probe) {
      EnergyNetParams p = base;
      for_each_param(p, [&](const std::string& name, Tensor& t) {
        if (name == target) t = probe;
      });
      return energy(x, y, p);
    };
    Tensor at;
    for_each_param(base, [&](const std::string& name, Tensor& t) {
      if (name == target) at = t;
    });
    REQUIRE(at.defined());
    CHECK(finite_difference_check(f, at) < 1e-5);
  };

  check_tensor("input/conv0/weight");
  check_tensor("output/conv1/cross_weight");
  check_tensor("output/conv1/image_weight");
  check_tensor("output/fc/weight");
  check_tensor("output/conv0/bias");
}

TEST_CASE("repeated evaluation is bit-identical") {
  std::mt19937_64 rng(44);
  EnergyNetConfig cfg = tiny_config();
  EnergyNetParams p = init_params(cfg, 2);
  Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
  Tensor y = image_tensor(rng, cfg, 0.0, 1.0);
  CHECK(energy(x, y, p).item() == energy(x, y, p).item());
}

TEST_CASE("attached parameters receive gradients") {
  std::mt19937_64 rng(55);
  EnergyNetConfig cfg = tiny_config();
  Graph g;
  EnergyNetParams p = attach_params(init_params(cfg, 3), g);
  Tensor x = image_tensor(rng, cfg, 0.0, 1.0);
  Tensor y = image_tensor(rng, cfg, 0.0, 1.0);
  Tensor e = energy(x, g.leaf(y), p);

  // The head bias adds straight into the energy, so its gradient is one.
  auto gb = grad(e, {p.input.fc.bias});
  CHECK(gb[0].values()[0] == 1.0);

  EnergyNetParams d = detach_params(p);
  bool any_attached = false;
  for_each_param(d, [&](const std::string&, Tensor& t) { any_attached |= t.attached(); });
  CHECK(!any_attached);
}
