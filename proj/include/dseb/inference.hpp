// Restores an occluded image by minimizing the learned energy over the
// candidate with heavy-ball gradient descent, starting from the mean of the
// training images. With graph tracking on, the whole descent trajectory is
// recorded so the trainer can differentiate the final candidate w.r.t. the
// network parameters.

#pragma once

#include <vector>

#include "dseb/energy_net.hpp"
#include "dseb/tensor.hpp"

namespace dseb {

struct InferenceConfig {
  real alpha = real(0.01);
  real momentum = real(0.9);
  int T = 10;
  bool track_graph = false;

  void validate() const;  // alpha > 0, momentum in [0,1), T >= 0
};

struct InferenceTrace {
  std::vector<real> energies;  // T+1 values: before the first step and after each
  Tensor final;
};

// Elementwise arithmetic mean. Throws on an empty list or mixed shapes.
Tensor mean_image(const std::vector<Tensor>& images);

// Detached copy with values clamped to the valid pixel range [0, 1].
Tensor clamp01(const Tensor& t);

// T steps of m <- momentum*m + dE/dy, y <- y - alpha*m from y = init.
//
// track_graph=false runs each step on a throwaway graph and returns a
// detached result. track_graph=true records every step, including the
// gradient computations themselves, onto a caller-owned graph; at least one
// of x, init, or the parameter tensors must already be attached to it.
// A non-finite value at any step aborts with an error naming the step.
InferenceTrace minimize_energy(const Tensor& x, const EnergyNetParams& params,
                               const Tensor& init, const InferenceConfig& cfg);

// Plain descent (no momentum) with per-step halving of the step size until
// the energy does not increase (up to max_halvings, then the step is taken
// anyway). This is the monotone variant used to validate descent directions;
// the fixed-step loop above is what training unrolls.
InferenceTrace minimize_energy_backtracking(const Tensor& x, const EnergyNetParams& params,
                                            const Tensor& init, real alpha0, int steps,
                                            int max_halvings = 30);

// Runs the untracked minimization and clamps the result for image output.
Tensor inpaint(const Tensor& x, const EnergyNetParams& params, const Tensor& mean_init,
               const InferenceConfig& cfg);

}  // namespace dseb
