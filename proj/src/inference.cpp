#include "dseb/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dseb {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

[[noreturn]] void abort_step(int step, const char* what) {
  throw std::runtime_error("minimize_energy: aborted at step " + std::to_string(step) +
                           ": " + what);
}

Tensor descend(const Tensor& y, Tensor& m, const Tensor& gy, real momentum, real alpha) {
  m = m.defined() ? add(scale(m, momentum), gy) : gy;
  return sub(y, scale(m, alpha));
}

}  // namespace

void InferenceConfig::validate() const {
  if (!(alpha > 0)) fail("inference config: alpha must be positive");
  if (!(momentum >= 0 && momentum < 1)) fail("inference config: momentum must be in [0,1)");
  if (T < 0) fail("inference config: T must be non-negative");
}

Tensor mean_image(const std::vector<Tensor>& images) {
  if (images.empty()) fail("mean_image: empty image list");
  const Shape& shape = images[0].shape();
  std::vector<real> acc(static_cast<std::size_t>(numel(shape)), real(0));
  for (const Tensor& im : images) {
    if (im.shape() != shape) {
      fail("mean_image: mixed shapes " + shape_str(shape) + " and " + shape_str(im.shape()));
    }
    std::span<const real> v = im.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  const real inv = real(1) / static_cast<real>(images.size());
  for (real& v : acc) v *= inv;
  return Tensor(shape, std::move(acc));
}

Tensor clamp01(const Tensor& t) {
  std::vector<real> v(t.values().begin(), t.values().end());
  for (real& x : v) x = std::clamp(x, real(0), real(1));
  return Tensor(t.shape(), std::move(v));
}

InferenceTrace minimize_energy(const Tensor& x, const EnergyNetParams& params,
                               const Tensor& init, const InferenceConfig& cfg) {
  cfg.validate();
  if (x.shape() != init.shape()) {
    fail("minimize_energy: occluded image " + shape_str(x.shape()) +
         " and initial candidate " + shape_str(init.shape()) + " differ in shape");
  }

  InferenceTrace trace;
  trace.energies.reserve(static_cast<std::size_t>(cfg.T) + 1);

  if (cfg.track_graph) {
    Graph* g = nullptr;
    auto consider = [&](const Tensor& t) {
      if (!t.attached()) return;
      if (g && t.graph() != g) fail("minimize_energy: inputs attached to different graphs");
      g = t.graph();
    };
    consider(x);
    consider(init);
    for_each_param(params, [&](const std::string&, const Tensor& t) { consider(t); });
    if (!g) {
      fail("minimize_energy: track_graph requires x, init, or the parameters to be "
           "attached to a caller-owned graph");
    }

    Tensor y = init.attached() ? init : g->leaf(init);
    Tensor m;
    for (int t = 0; t < cfg.T; ++t) {
      try {
        Tensor e = energy(x, y, params);
        trace.energies.push_back(e.item());
        Tensor gy = grad(e, {y}, true)[0];
        y = descend(y, m, gy, cfg.momentum, cfg.alpha);
      } catch (const std::runtime_error& err) {
        abort_step(t, err.what());
      }
    }
    {
      NoGradGuard quiet;
      trace.energies.push_back(energy(x, y, params).item());
    }
    trace.final = y;
    return trace;
  }

  const Tensor xd = x.detach();
  const EnergyNetParams pd = detach_params(params);
  Tensor y = init.detach();
  Tensor m;
  for (int t = 0; t < cfg.T; ++t) {
    try {
      Graph g;
      Tensor ya = g.leaf(y);
      Tensor e = energy(xd, ya, pd);
      trace.energies.push_back(e.item());
      Tensor gy = grad(e, {ya})[0];
      y = descend(y, m, gy, cfg.momentum, cfg.alpha);
    } catch (const std::runtime_error& err) {
      abort_step(t, err.what());
    }
  }
  try {
    trace.energies.push_back(energy(xd, y, pd).item());
  } catch (const std::runtime_error& err) {
    abort_step(cfg.T, err.what());
  }
  trace.final = y;
  return trace;
}

InferenceTrace minimize_energy_backtracking(const Tensor& x, const EnergyNetParams& params,
                                            const Tensor& init, real alpha0, int steps,
                                            int max_halvings) {
  if (!(alpha0 > 0)) fail("minimize_energy_backtracking: alpha0 must be positive");
  if (steps < 0) fail("minimize_energy_backtracking: steps must be non-negative");

  const Tensor xd = x.detach();
  const EnergyNetParams pd = detach_params(params);
  Tensor y = init.detach();

  InferenceTrace trace;
  trace.energies.reserve(static_cast<std::size_t>(steps) + 1);
  trace.energies.push_back(energy(xd, y, pd).item());

  for (int t = 0; t < steps; ++t) {
    Tensor gy;
    {
      Graph g;
      Tensor ya = g.leaf(y);
      Tensor e = energy(xd, ya, pd);
      gy = grad(e, {ya})[0];
    }
    const real current = trace.energies.back();
    real a = alpha0;
    Tensor candidate;
    real next = current;
    for (int h = 0; h <= max_halvings; ++h) {
      candidate = sub(y, scale(gy, a));
      next = energy(xd, candidate, pd).item();
      if (next <= current) break;
      a /= 2;
    }
    y = candidate;
    trace.energies.push_back(next);
  }
  trace.final = y;
  return trace;
}

Tensor inpaint(const Tensor& x, const EnergyNetParams& params, const Tensor& mean_init,
               const InferenceConfig& cfg) {
  InferenceConfig untracked = cfg;
  untracked.track_graph = false;
  InferenceTrace trace = minimize_energy(x, params, mean_init, untracked);
  return clamp01(trace.final);
}

}  // namespace dseb
