// Small utilities shared by the module tests.

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dseb/energy_net.hpp"
#include "dseb/tensor.hpp"

namespace testutil {

// Scratch directory under the system temp root, removed on scope exit.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("dseb_test_" + std::to_string(rd()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct NamedTensor {
  std::string name;
  dseb::Tensor tensor;
};

inline std::vector<NamedTensor> param_list(const dseb::EnergyNetParams& p) {
  std::vector<NamedTensor> out;
  dseb::for_each_param(p, [&](const std::string& name, const dseb::Tensor& t) {
    out.push_back({name, t});
  });
  return out;
}

// Copy of p with one coordinate of one tensor (indexed in for_each_param
// order) shifted by delta.
inline dseb::EnergyNetParams perturb_param(const dseb::EnergyNetParams& p,
                                           std::size_t tensor_index, std::size_t coord,
                                           dseb::real delta) {
  dseb::EnergyNetParams out = p;
  std::size_t i = 0;
  dseb::for_each_param(out, [&](const std::string&, dseb::Tensor& t) {
    if (i++ != tensor_index) return;
    std::vector<dseb::real> v(t.values().begin(), t.values().end());
    v[coord] += delta;
    t = dseb::Tensor(t.shape(), std::move(v));
  });
  return out;
}

}  // namespace testutil
