// Metrics, checkpoint serialization, qualitative grids, and the gradient
// self-checks behind the CLI.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dseb/data.hpp"
#include "dseb/energy_net.hpp"
#include "dseb/inference.hpp"
#include "dseb/training.hpp"

namespace dseb {

// Everything needed to resume or evaluate a model. The network config rides
// inside params; adam is present only when training state was saved.
struct Checkpoint {
  EnergyNetParams params;
  Tensor mean_image;
  std::optional<AdamState> adam;
};

// Binary format, little-endian throughout: "DSEB", format version (u16),
// precision flag (u8: 0 = 64-bit floats, 1 = 32-bit), feature flags (u8),
// the config as i32 fields, the mean image, then named parameter tensors.
// Loading widens a 32-bit file into a 64-bit build exactly; the lossy
// direction is refused.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Mean over all entries of (255*(a-b))^2, the error scale of the metrics.
real mse255(const Tensor& a, const Tensor& b);

// 10*log10(255^2 / mse255). +infinity when the images match exactly.
real psnr(const Tensor& a, const Tensor& b);
real psnr_from_mse(real mse);

struct EvalReport {
  std::vector<real> mse;        // per test image
  std::vector<real> psnr;      // per test image; +inf on exact match
  real mean_mse = 0;
  real mean_psnr = 0;          // over finite entries only
  int infinite_count = 0;      // exact reconstructions excluded from the mean
};

// Inpaints every test pair (in parallel; results are position-stable and
// independent of the thread count) and scores against the ground truth over
// the full image. composite first pastes the known pixels back over the
// reconstruction. threads <= 0 picks the hardware count.
EvalReport evaluate(const Checkpoint& ckpt, const std::vector<ImagePair>& testset,
                    const InferenceConfig& cfg, bool composite = false, int threads = 0);

// One qualitative row: ground truth, the occluded input, the reconstruction.
struct GridRow {
  Tensor truth;
  Tensor occluded;
  Tensor inpainted;
};

// Writes a 3-column image grid (one row per sample, 2-pixel white
// separators) as .png or .pgm depending on the path's extension.
void export_grid(const std::string& path, const std::vector<GridRow>& rows);

// Randomized finite-difference batteries over the op set and the full
// energy. Each returns the largest relative error it saw; the CLI compares
// against the suite tolerances (1e-5 first order, 1e-3 second order).
real gradcheck_first_order(std::uint64_t seed);
real gradcheck_second_order(std::uint64_t seed);

}  // namespace dseb
