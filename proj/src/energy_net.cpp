#include "dseb/energy_net.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace dseb {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

double unit_uniform(std::mt19937_64& rng) {
  // Explicit mapping instead of std::uniform_real_distribution, whose output
  // is not pinned across standard library implementations.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::vector<real> v(static_cast<std::size_t>(numel(shape)));
  for (real& x : v) x = static_cast<real>((2.0 * unit_uniform(rng) - 1.0) * bound);
  return Tensor(std::move(shape), std::move(v));
}

Tensor he_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  return uniform_tensor(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

void check_image(const char* what, const Tensor& t, const EnergyNetConfig& cfg) {
  Shape expect{1, cfg.input_channels, cfg.image_side, cfg.image_side};
  if (t.shape() != expect) {
    fail(std::string(what) + ": shape " + shape_str(t.shape()) + " does not match configured " +
         shape_str(expect));
  }
}

}  // namespace

void EnergyNetConfig::validate() const {
  if (num_conv_layers < 1) fail("config: num_conv_layers must be at least 1");
  if (feature_maps < 1) fail("config: feature_maps must be at least 1");
  if (fc_dim < 1) fail("config: fc_dim must be at least 1");
  if (stride < 1) fail("config: stride must be positive");
  if (kernel < 1 || kernel % 2 == 0) {
    fail("config: kernel must be odd and positive, got " + std::to_string(kernel));
  }
  if (input_channels != 1 && input_channels != 3) {
    fail("config: input_channels must be 1 or 3, got " + std::to_string(input_channels));
  }
  if (image_side < 1) fail("config: image_side must be set and positive");
  std::int64_t div = 1;
  for (int l = 1; l <= num_conv_layers; ++l) {
    div *= stride;
    if (image_side % div != 0) {
      fail("config: image_side " + std::to_string(image_side) + " is not divisible by stride^" +
           std::to_string(l) + " = " + std::to_string(div));
    }
  }
}

int EnergyNetConfig::side_at(int level) const {
  int side = image_side;
  for (int l = 0; l < level; ++l) side /= stride;
  return side;
}

EnergyNetParams init_params(const EnergyNetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int L = config.num_conv_layers;
  const int K = config.feature_maps;
  const int k = config.kernel;
  const std::int64_t kk = static_cast<std::int64_t>(k) * k;

  EnergyNetParams p;
  p.config = config;

  for (int l = 0; l < L; ++l) {
    const int in_ch = l == 0 ? config.input_channels : K;
    ConvLayer layer;
    layer.weight = he_uniform({K, in_ch, k, k}, in_ch * kk, rng);
    layer.bias = Tensor::zeros({K});
    p.input.conv.push_back(std::move(layer));
  }
  const std::int64_t head_in =
      static_cast<std::int64_t>(K) * config.side_at(L) * config.side_at(L);
  p.input.fc.weight = he_uniform({config.fc_dim, head_in}, head_in, rng);
  p.input.fc.bias = Tensor::zeros({config.fc_dim});

  for (int l = 0; l < L; ++l) {
    const int in_ch = l == 0 ? config.input_channels : K;
    OutputLayer layer;
    layer.weight = he_uniform({K, in_ch, k, k}, in_ch * kk, rng);
    if (l >= 1) {
      layer.cross_weight = he_uniform({K, K, k, k}, K * kk, rng);
      layer.image_weight = he_uniform({K, config.input_channels, k, k},
                                      config.input_channels * kk, rng);
    }
    layer.bias = Tensor::zeros({K});
    p.output.conv.push_back(std::move(layer));
  }
  p.output.fc.weight = he_uniform({config.fc_dim, head_in}, head_in, rng);
  p.output.fc.bias = Tensor::zeros({config.fc_dim});
  return p;
}

namespace {

template <typename Params, typename Fn>
void visit_params(Params& p, const Fn& fn) {
  for (std::size_t l = 0; l < p.input.conv.size(); ++l) {
    const std::string base = "input/conv" + std::to_string(l) + "/";
    fn(base + "weight", p.input.conv[l].weight);
    fn(base + "bias", p.input.conv[l].bias);
  }
  fn("input/fc/weight", p.input.fc.weight);
  fn("input/fc/bias", p.input.fc.bias);
  for (std::size_t l = 0; l < p.output.conv.size(); ++l) {
    const std::string base = "output/conv" + std::to_string(l) + "/";
    fn(base + "weight", p.output.conv[l].weight);
    if (l >= 1) {
      fn(base + "cross_weight", p.output.conv[l].cross_weight);
      fn(base + "image_weight", p.output.conv[l].image_weight);
    }
    fn(base + "bias", p.output.conv[l].bias);
  }
  fn("output/fc/weight", p.output.fc.weight);
  fn("output/fc/bias", p.output.fc.bias);
}

}  // namespace

void for_each_param(EnergyNetParams& params,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(params, fn);
}

void for_each_param(const EnergyNetParams& params,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_params(params, fn);
}

EnergyNetParams attach_params(const EnergyNetParams& params, Graph& g) {
  EnergyNetParams out = params;
  for_each_param(out, [&](const std::string&, Tensor& t) { t = g.leaf(t); });
  return out;
}

EnergyNetParams detach_params(const EnergyNetParams& params) {
  EnergyNetParams out = params;
  for_each_param(out, [&](const std::string&, Tensor& t) { t = t.detach(); });
  return out;
}

InputTrace input_path_forward(const Tensor& x, const EnergyNetParams& params) {
  const EnergyNetConfig& cfg = params.config;
  check_image("input_path_forward", x, cfg);
  InputTrace trace;
  Tensor u = x;
  for (const ConvLayer& layer : params.input.conv) {
    u = relu(conv2d(u, layer.weight, layer.bias, cfg.stride, cfg.padding()));
    trace.features.push_back(u);
  }
  trace.fc_out = fully_connected(u, params.input.fc.weight, params.input.fc.bias);
  return trace;
}

Tensor output_path_forward(const Tensor& y_hat, const std::vector<Tensor>& features,
                           const EnergyNetParams& params) {
  const EnergyNetConfig& cfg = params.config;
  check_image("output_path_forward", y_hat, cfg);
  if (features.size() != params.output.conv.size()) {
    fail("output_path_forward: " + std::to_string(features.size()) +
         " input-path features for " + std::to_string(params.output.conv.size()) +
         " layers");
  }
  Tensor v = y_hat;
  for (std::size_t l = 0; l < params.output.conv.size(); ++l) {
    const OutputLayer& layer = params.output.conv[l];
    Tensor pre = conv2d(v, layer.weight, layer.bias, cfg.stride, cfg.padding());
    if (l >= 1) {
      // Same-depth feature maps from the input path, and the candidate
      // itself pooled down to this depth's spatial size. Their convolutions
      // share the output of the main chain's bias, so the extra terms use a
      // zero bias here.
      Tensor zero_bias = Tensor::zeros({cfg.feature_maps});
      int pool = 1;
      for (std::size_t i = 0; i < l; ++i) pool *= cfg.stride;
      Tensor rescaled = avg_downsample(y_hat, pool);
      pre = add(pre, conv2d(features[l - 1], layer.cross_weight, zero_bias, cfg.stride,
                            cfg.padding()));
      pre = add(pre, conv2d(rescaled, layer.image_weight, zero_bias, cfg.stride,
                            cfg.padding()));
    }
    v = relu(pre);
  }
  return fully_connected(v, params.output.fc.weight, params.output.fc.bias);
}

Tensor energy(const Tensor& x, const Tensor& y_hat, const EnergyNetParams& params) {
  if (x.shape() != y_hat.shape()) {
    fail("energy: occluded image " + shape_str(x.shape()) + " and candidate " +
         shape_str(y_hat.shape()) + " differ in shape");
  }
  InputTrace trace = input_path_forward(x, params);
  Tensor head_o = output_path_forward(y_hat, trace.features, params);
  return sum_all(add(trace.fc_out, head_o));
}

}  // namespace dseb
