// Dataset ingestion and occlusion protocol: IDX and image-directory loaders,
// center-block and left-half masks, and seeded train/test splitting. Pixels
// live in [0,1] everywhere in the library; byte scale appears only at the
// file boundary (and inside the PSNR metric).

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dseb/tensor.hpp"

namespace dseb {

// The mask is evaluation bookkeeping only: the model is never shown it
// (restoration is blind). 1 marks an occluded pixel, row-major over H*W,
// shared by all channels.
struct ImagePair {
  Tensor x;  // occluded image, masked pixels filled with 0
  Tensor y;  // ground truth
  std::vector<std::uint8_t> mask;
};

struct DatasetSplit {
  std::vector<ImagePair> train;
  std::vector<ImagePair> test;
  Tensor mean_image;  // over the train ground truths only
};

// IDX image container (big-endian magic 0x00000803, u32 dims, raw bytes).
// Bytes are scaled to [0,1]. A label-file magic is rejected by name.
std::vector<Tensor> load_idx(const std::string& path);

// Inverse of load_idx for grayscale {1,1,H,W} tensors of a common shape;
// exists so round trips are testable and fixtures reproducible.
void save_idx(const std::string& path, const std::vector<Tensor>& images);

// Loads every .pgm (binary P5) and .png in the directory, sorted by
// filename; other files are ignored. Images must be square and of one
// common size. channels selects grayscale (1) or color (3); PNGs are
// converted, a PGM asked to be color is an error naming the file.
std::vector<Tensor> load_image_dir(const std::string& path, int channels);

// Single-file loaders used by load_image_dir and the CLI.
Tensor load_pgm(const std::string& path);
Tensor load_png(const std::string& path, int channels);
void save_pgm(const std::string& path, const Tensor& image);
void save_png(const std::string& path, const Tensor& image);

// Centered square block covering ~fraction of the pixels: block side is
// round(side * sqrt(fraction)), offset floor((side - block)/2).
ImagePair apply_center_mask(const Tensor& y, real fraction);

// Left half: columns 0 .. side/2 - 1.
ImagePair apply_half_mask(const Tensor& y);

// Seeded shuffle; the last n_test shuffled images become the test set; the
// masker builds every ImagePair; the mean image is computed from the train
// ground truths.
DatasetSplit make_split(const std::vector<Tensor>& images, int n_test, std::uint64_t seed,
                        const std::function<ImagePair(const Tensor&)>& masker);

}  // namespace dseb
