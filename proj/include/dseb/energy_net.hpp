// Two-path convolutional energy network. The input path processes the
// occluded image, the output path processes a candidate restoration (with
// cross-connections from the input path and skip connections from rescaled
// copies of the candidate), and the two fully-connected heads are added and
// reduced to one scalar: the energy of the pair. Lower is better.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dseb/tensor.hpp"

namespace dseb {

struct EnergyNetConfig {
  int num_conv_layers = 3;
  int feature_maps = 32;
  int kernel = 5;  // odd, so same-size padding (kernel-1)/2 is exact
  int stride = 2;
  int fc_dim = 1;
  int input_channels = 1;
  int image_side = 0;  // must be set by the caller; there is no sensible default

  // Throws invalid_argument when any invariant fails, including image_side
  // not being divisible by stride^l for every layer.
  void validate() const;

  // Spatial side after `level` strided convolutions: image_side / stride^level.
  int side_at(int level) const;

  int padding() const { return (kernel - 1) / 2; }

  bool operator==(const EnergyNetConfig&) const = default;
};

struct ConvLayer {
  Tensor weight;
  Tensor bias;
};

struct DenseLayer {
  Tensor weight;
  Tensor bias;
};

// One conv stage of the candidate-processing path. Layer 0 intentionally has
// no cross_weight and no image_weight (their tensors stay undefined): the
// first stage sees only the raw candidate.
struct OutputLayer {
  Tensor weight;        // convolves the running feature maps
  Tensor cross_weight;  // convolves the input path's features at this depth
  Tensor image_weight;  // convolves the candidate, rescaled to this depth
  Tensor bias;
};

struct InputPath {
  std::vector<ConvLayer> conv;
  DenseLayer fc;
};

struct OutputPath {
  std::vector<OutputLayer> conv;
  DenseLayer fc;
};

struct EnergyNetParams {
  EnergyNetConfig config;
  InputPath input;
  OutputPath output;
};

// Weights are uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)], biases zero,
// drawn in a fixed order so a seed pins every value.
EnergyNetParams init_params(const EnergyNetConfig& config, std::uint64_t seed);

// Visits every parameter tensor in a fixed canonical order with a stable
// name like "output/conv1/cross_weight". Gradient lists, optimizer state,
// and checkpoints all rely on this single ordering.
void for_each_param(EnergyNetParams& params,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const EnergyNetParams& params,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

// Copies with every tensor registered as a leaf of g (for differentiation
// w.r.t. the parameters) or stripped of any graph attachment.
EnergyNetParams attach_params(const EnergyNetParams& params, Graph& g);
EnergyNetParams detach_params(const EnergyNetParams& params);

struct InputTrace {
  std::vector<Tensor> features;  // one entry per conv layer, shallowest first
  Tensor fc_out;
};

// x is {1, input_channels, image_side, image_side}.
InputTrace input_path_forward(const Tensor& x, const EnergyNetParams& params);

// features must come from input_path_forward under the same config.
Tensor output_path_forward(const Tensor& y_hat, const std::vector<Tensor>& features,
                           const EnergyNetParams& params);

// E = sum of the two heads' outputs. Attached to whatever graph the inputs
// and params live on, so callers control differentiability.
Tensor energy(const Tensor& x, const Tensor& y_hat, const EnergyNetParams& params);

}  // namespace dseb
