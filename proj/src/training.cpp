#include "dseb/training.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

namespace dseb {

void TrainConfig::validate() const {
  if (M < 0) throw std::invalid_argument("TrainConfig: M must be >= 0");
  if (!(lambda > 0)) throw std::invalid_argument("TrainConfig: lambda must be positive");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) {
    throw std::invalid_argument("TrainConfig: adam_beta1 must be in [0,1)");
  }
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw std::invalid_argument("TrainConfig: adam_beta2 must be in [0,1)");
  }
  if (!(adam_eps > 0)) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
  inner.validate();
}

bool AdamState::operator==(const AdamState& other) const {
  if (t != other.t || m.size() != other.m.size() || v.size() != other.v.size()) return false;
  auto same = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != b[i].shape()) return false;
      const auto av = a[i].values(), bv = b[i].values();
      for (std::size_t k = 0; k < av.size(); ++k)
        if (av[k] != bv[k]) return false;
    }
    return true;
  };
  return same(m, other.m) && same(v, other.v);
}

AdamState init_adam(const EnergyNetParams& params) {
  AdamState state;
  for_each_param(params, [&](const std::string&, const Tensor& t) {
    state.m.push_back(Tensor::zeros(t.shape()));
    state.v.push_back(Tensor::zeros(t.shape()));
  });
  return state;
}

Tensor l1_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(prediction.shape()) +
                                " vs " + shape_str(target.shape()));
  }
  // |d| = relu(d) + relu(-d), which keeps every piece differentiable again.
  const Tensor diff = sub(prediction, target);
  return sum_all(add(relu(diff), relu(neg(diff))));
}

void clip_global_norm(std::vector<Tensor>& grads, real max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  real sq = 0;
  for (const Tensor& g : grads)
    for (real v : g.values()) sq += v * v;
  const real norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const real s = max_norm / norm;
  for (Tensor& g : grads) {
    std::vector<real> v(g.values().begin(), g.values().end());
    for (real& x : v) x *= s;
    g = Tensor(g.shape(), std::move(v));
  }
}

void adam_step(EnergyNetParams& params, const std::vector<Tensor>& grads, AdamState& state,
               const TrainConfig& cfg) {
  state.t += 1;
  const real c1 = 1 - std::pow(cfg.adam_beta1, static_cast<real>(state.t));
  const real c2 = 1 - std::pow(cfg.adam_beta2, static_cast<real>(state.t));

  std::size_t i = 0;
  for_each_param(params, [&](const std::string& name, Tensor& p) {
    if (i >= grads.size()) throw std::invalid_argument("adam_step: too few gradient tensors");
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch at " + name);
    }
    const auto gv = g.values();
    std::vector<real> mv(state.m[i].values().begin(), state.m[i].values().end());
    std::vector<real> vv(state.v[i].values().begin(), state.v[i].values().end());
    std::vector<real> pv(p.values().begin(), p.values().end());
    for (std::size_t k = 0; k < gv.size(); ++k) {
      mv[k] = cfg.adam_beta1 * mv[k] + (1 - cfg.adam_beta1) * gv[k];
      vv[k] = cfg.adam_beta2 * vv[k] + (1 - cfg.adam_beta2) * gv[k] * gv[k];
      const real m_hat = mv[k] / c1;
      const real v_hat = vv[k] / c2;
      pv[k] -= cfg.lambda * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
    state.m[i] = Tensor(g.shape(), std::move(mv));
    state.v[i] = Tensor(g.shape(), std::move(vv));
    p = Tensor(p.shape(), std::move(pv));
    ++i;
  });
  if (i != grads.size()) throw std::invalid_argument("adam_step: too many gradient tensors");
}

std::vector<Tensor> unrolled_gradients(const ImagePair& pair, const Tensor& mean_init,
                                       const EnergyNetParams& params,
                                       const InferenceConfig& inner, real* loss_out) {
  InferenceConfig cfg = inner;
  cfg.track_graph = true;

  Graph g;
  const EnergyNetParams attached = attach_params(params, g);
  const InferenceTrace trace = minimize_energy(pair.x, attached, mean_init, cfg);
  const Tensor loss = l1_loss(trace.final, pair.y);
  if (loss_out != nullptr) *loss_out = loss.item();

  std::vector<Tensor> wrt;
  for_each_param(attached, [&](const std::string&, const Tensor& t) { wrt.push_back(t); });
  return grad(loss, std::span<const Tensor>(wrt));
}

real outer_step(std::span<const ImagePair> batch, const Tensor& mean_init,
                EnergyNetParams& params, AdamState& state, const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("outer_step: empty batch");

  std::vector<Tensor> acc;
  real loss_total = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    real loss = 0;
    std::vector<Tensor> grads;
    try {
      grads = unrolled_gradients(batch[s], mean_init, params, cfg.inner, &loss);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("outer_step: sample " + std::to_string(s) + ": " + e.what());
    }
    loss_total += loss;
    if (acc.empty()) {
      acc = std::move(grads);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = add(acc[i], grads[i]);
    }
  }

  const real inv = real(1) / static_cast<real>(batch.size());
  for (Tensor& g : acc) g = scale(g, inv);
  if (cfg.clip_gradients) clip_global_norm(acc, real(10));
  adam_step(params, acc, state, cfg);
  return loss_total * inv;
}

TrainReport train(const std::vector<ImagePair>& pairs, const TrainConfig& cfg,
                  const EnergyNetConfig& net_cfg,
                  const std::function<void(int step, real loss_sum)>& progress) {
  cfg.validate();
  net_cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train: no training pairs");

  std::vector<Tensor> truths;
  truths.reserve(pairs.size());
  for (const ImagePair& pair : pairs) truths.push_back(pair.y);

  TrainReport report;
  report.mean_image = mean_image(truths);
  report.params = init_params(net_cfg, cfg.seed);
  report.adam = init_adam(report.params);
  report.loss_sum.reserve(static_cast<std::size_t>(cfg.M));
  report.loss_per_pixel.reserve(static_cast<std::size_t>(cfg.M));

  const Shape& s = report.mean_image.shape();
  const real pixels = static_cast<real>(s[1] * s[2] * s[3]);

  // Distinct stream from the init draws so batch order and weights do not
  // alias when seeds collide across purposes.
  std::mt19937_64 sampler(cfg.seed ^ 0x5DEECE66DULL);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<ImagePair> batch(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.M; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch[static_cast<std::size_t>(b)] = pairs[sampler() % pairs.size()];
    }
    const real loss = outer_step(batch, report.mean_image, report.params, report.adam, cfg);
    report.loss_sum.push_back(loss);
    report.loss_per_pixel.push_back(loss / pixels);
    if (progress) progress(step, loss);
  }

  report.wall_seconds = std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace dseb
