// Outer optimization loop: differentiates the reconstruction loss through
// the unrolled inner minimization and applies Adam to the network weights.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dseb/data.hpp"
#include "dseb/energy_net.hpp"
#include "dseb/inference.hpp"
#include "dseb/tensor.hpp"

namespace dseb {

struct TrainConfig {
  int M = 1000;                 // outer steps
  real lambda = real(0.001);    // Adam learning rate
  InferenceConfig inner;        // settings of the unrolled minimization
  int batch_size = 1;
  std::uint64_t seed = 0;       // pins weight init and batch sampling
  real adam_beta1 = real(0.9);
  real adam_beta2 = real(0.999);
  real adam_eps = real(1e-8);
  bool clip_gradients = false;  // cap the joint gradient norm at 10

  void validate() const;
};

// First and second moment per parameter tensor, in for_each_param order.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;

  bool operator==(const AdamState&) const;
};

AdamState init_adam(const EnergyNetParams& params);

// Sum of absolute differences over all elements, built from recordable ops
// so it stays differentiable to any order.
Tensor l1_loss(const Tensor& prediction, const Tensor& target);

// Rescales grads in place so their joint euclidean norm is at most max_norm.
void clip_global_norm(std::vector<Tensor>& grads, real max_norm);

// Bias-corrected update, in place. grads parallels for_each_param order.
void adam_step(EnergyNetParams& params, const std::vector<Tensor>& grads, AdamState& state,
               const TrainConfig& cfg);

// d l1(minimize(x), y) / d params for one sample, differentiated through the
// whole descent trajectory. Detached, in for_each_param order. When
// loss_out is non-null it receives the loss value.
std::vector<Tensor> unrolled_gradients(const ImagePair& pair, const Tensor& mean_init,
                                       const EnergyNetParams& params,
                                       const InferenceConfig& inner, real* loss_out = nullptr);

// One Adam step on the batch-mean gradient. Returns the batch-mean loss
// (summed over pixels). A non-finite value anywhere aborts with an error
// naming the offending sample.
real outer_step(std::span<const ImagePair> batch, const Tensor& mean_init,
                EnergyNetParams& params, AdamState& state, const TrainConfig& cfg);

struct TrainReport {
  std::vector<real> loss_sum;        // batch-mean loss per outer step
  std::vector<real> loss_per_pixel;  // loss_sum / (C * S * S)
  real wall_seconds = 0;
  EnergyNetParams params;
  Tensor mean_image;  // the inference init, averaged from the ground truths
  AdamState adam;
};

// Full run: init weights from cfg.seed, sample batches with replacement,
// M outer steps. progress (when set) is called after each step.
TrainReport train(const std::vector<ImagePair>& pairs, const TrainConfig& cfg,
                  const EnergyNetConfig& net_cfg,
                  const std::function<void(int step, real loss_sum)>& progress = {});

}  // namespace dseb
