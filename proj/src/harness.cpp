#include "dseb/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <thread>

namespace dseb {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'E', 'B'};
constexpr std::uint16_t kVersion = 1;
#ifdef DSEB_SINGLE_PRECISION
constexpr std::uint8_t kBuildPrecision = 1;
#else
constexpr std::uint8_t kBuildPrecision = 0;
#endif
constexpr std::uint8_t kFlagAdam = 0x01;

[[noreturn]] void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : path_(path) {}

  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

  void real_value(real v) {
    if constexpr (sizeof(real) == 8) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      u64(bits);
    } else {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      u32(bits);
    }
  }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void tensor(const Tensor& t) {
    const Shape& shape = t.shape();
    u32(static_cast<std::uint32_t>(shape.size()));
    for (std::int64_t d : shape) i64(d);
    const auto v = t.values();
    u64(v.size());
    for (real x : v) real_value(x);
  }

  void flush() {
    std::ofstream f(path_, std::ios::binary | std::ios::trunc);
    if (!f) io_fail("cannot open " + path_ + " for writing");
    f.write(reinterpret_cast<const char*>(bytes_.data()),
            static_cast<std::streamsize>(bytes_.size()));
    if (!f) io_fail("write to " + path_ + " failed");
  }

 private:
  std::string path_;
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& path) : path_(path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    bytes_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      io_fail(path_ + ": truncated: expected " + std::to_string(n) + " more bytes at offset " +
              std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()));
    }
  }

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }

  // file_precision 0 reads f64, 1 reads f32 (widened when real is double).
  real real_value(std::uint8_t file_precision) {
    if (file_precision == 0) {
      const std::uint64_t bits = u64();
      double d;
      std::memcpy(&d, &bits, 8);
      return static_cast<real>(d);
    }
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return static_cast<real>(f);
  }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  Tensor tensor(std::uint8_t file_precision) {
    const std::uint32_t rank = u32();
    if (rank > 8) io_fail(path_ + ": implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::int64_t expect = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = i64();
      expect *= shape[i];
    }
    const std::uint64_t count = u64();
    if (count != static_cast<std::uint64_t>(expect)) {
      io_fail(path_ + ": tensor element count " + std::to_string(count) +
              " does not match its shape " + shape_str(shape));
    }
    std::vector<real> v(count);
    for (std::uint64_t k = 0; k < count; ++k) v[k] = real_value(file_precision);
    return Tensor(shape, std::move(v));
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ckpt.params.config.validate();
  ByteWriter w(path);
  w.u8(static_cast<std::uint8_t>(kMagic[0]));
  w.u8(static_cast<std::uint8_t>(kMagic[1]));
  w.u8(static_cast<std::uint8_t>(kMagic[2]));
  w.u8(static_cast<std::uint8_t>(kMagic[3]));
  w.u16(kVersion);
  w.u8(kBuildPrecision);
  w.u8(ckpt.adam ? kFlagAdam : 0);

  const EnergyNetConfig& c = ckpt.params.config;
  w.i32(c.num_conv_layers);
  w.i32(c.feature_maps);
  w.i32(c.kernel);
  w.i32(c.stride);
  w.i32(c.fc_dim);
  w.i32(c.input_channels);
  w.i32(c.image_side);

  w.tensor(ckpt.mean_image);

  std::uint32_t count = 0;
  for_each_param(ckpt.params, [&](const std::string&, const Tensor&) { ++count; });
  w.u32(count);
  for_each_param(ckpt.params, [&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.tensor(t);
  });

  if (ckpt.adam) {
    if (ckpt.adam->m.size() != count || ckpt.adam->v.size() != count) {
      throw std::invalid_argument("save_checkpoint: optimizer state does not match parameters");
    }
    w.i64(ckpt.adam->t);
    for (const Tensor& t : ckpt.adam->m) w.tensor(t);
    for (const Tensor& t : ckpt.adam->v) w.tensor(t);
  }
  w.flush();
}

Checkpoint load_checkpoint(const std::string& path) {
  ByteReader r(path);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::memcmp(magic, kMagic, 4) != 0) {
    io_fail(path + ": not a checkpoint file (bad magic)");
  }
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    io_fail(path + ": unknown checkpoint version " + std::to_string(version) + ", expected " +
            std::to_string(kVersion));
  }
  const std::uint8_t precision = r.u8();
  if (precision > 1) io_fail(path + ": bad precision flag " + std::to_string(precision));
  if (precision == 0 && kBuildPrecision == 1) {
    io_fail(path + ": 64-bit checkpoint cannot load into a 32-bit build without loss");
  }
  const std::uint8_t flags = r.u8();

  EnergyNetConfig c;
  c.num_conv_layers = r.i32();
  c.feature_maps = r.i32();
  c.kernel = r.i32();
  c.stride = r.i32();
  c.fc_dim = r.i32();
  c.input_channels = r.i32();
  c.image_side = r.i32();
  c.validate();

  Checkpoint ckpt;
  ckpt.mean_image = r.tensor(precision);

  // Read into a correctly-shaped skeleton so name order and shapes are
  // checked against the canonical layout for this config.
  ckpt.params = init_params(c, 0);
  std::uint32_t count = 0;
  for_each_param(ckpt.params, [&](const std::string&, const Tensor&) { ++count; });
  const std::uint32_t stored = r.u32();
  if (stored != count) {
    io_fail(path + ": " + std::to_string(stored) + " parameter tensors, config needs " +
            std::to_string(count));
  }
  for_each_param(ckpt.params, [&](const std::string& name, Tensor& t) {
    const std::string got = r.str();
    if (got != name) {
      io_fail(path + ": parameter name mismatch: got '" + got + "', expected '" + name + "'");
    }
    Tensor loaded = r.tensor(precision);
    if (loaded.shape() != t.shape()) {
      io_fail(path + ": " + name + " has shape " + shape_str(loaded.shape()) + ", expected " +
              shape_str(t.shape()));
    }
    t = std::move(loaded);
  });

  if (flags & kFlagAdam) {
    AdamState adam;
    adam.t = r.i64();
    for (std::uint32_t i = 0; i < count; ++i) adam.m.push_back(r.tensor(precision));
    for (std::uint32_t i = 0; i < count; ++i) adam.v.push_back(r.tensor(precision));
    ckpt.adam = std::move(adam);
  }
  if (!r.at_end()) io_fail(path + ": trailing bytes after checkpoint payload");
  return ckpt;
}

real mse255(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mse255: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const auto av = a.values(), bv = b.values();
  real total = 0;
  for (std::size_t k = 0; k < av.size(); ++k) {
    const real d = (av[k] - bv[k]) * 255;
    total += d * d;
  }
  return total / static_cast<real>(av.size());
}

real psnr_from_mse(real mse) {
  if (mse < 0) throw std::invalid_argument("psnr_from_mse: negative error");
  if (mse == 0) return std::numeric_limits<real>::infinity();
  return 10 * std::log10(real(65025) / mse);
}

real psnr(const Tensor& a, const Tensor& b) { return psnr_from_mse(mse255(a, b)); }

EvalReport evaluate(const Checkpoint& ckpt, const std::vector<ImagePair>& testset,
                    const InferenceConfig& cfg, bool composite, int threads) {
  if (testset.empty()) throw std::invalid_argument("evaluate: empty test set");
  const Shape expect = {1, ckpt.params.config.input_channels, ckpt.params.config.image_side,
                        ckpt.params.config.image_side};
  for (std::size_t i = 0; i < testset.size(); ++i) {
    if (testset[i].x.shape() != expect) {
      throw std::invalid_argument("evaluate: test image " + std::to_string(i) + " has shape " +
                                  shape_str(testset[i].x.shape()) + ", checkpoint expects " +
                                  shape_str(expect));
    }
  }

  EvalReport report;
  report.mse.resize(testset.size());
  report.psnr.resize(testset.size());

  int n_threads = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min<int>(n_threads, static_cast<int>(testset.size()));

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next.fetch_add(1); i < testset.size(); i = next.fetch_add(1)) {
      const ImagePair& pair = testset[i];
      Tensor out = inpaint(pair.x, ckpt.params, ckpt.mean_image, cfg);
      if (composite) {
        const Shape& s = out.shape();
        const std::int64_t C = s[1], H = s[2], W = s[3];
        std::vector<real> v(out.values().begin(), out.values().end());
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t w = 0; w < W; ++w)
            if (!pair.mask[static_cast<std::size_t>(h * W + w)])
              for (std::int64_t c = 0; c < C; ++c) {
                const auto k = static_cast<std::size_t>((c * H + h) * W + w);
                v[k] = pair.y.values()[k];
              }
        out = Tensor(s, std::move(v));
      }
      report.mse[i] = mse255(out, pair.y);
      report.psnr[i] = psnr_from_mse(report.mse[i]);
    }
  };

  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  real mse_sum = 0, psnr_sum = 0;
  int finite = 0;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    mse_sum += report.mse[i];
    if (std::isinf(report.psnr[i])) {
      ++report.infinite_count;
    } else {
      psnr_sum += report.psnr[i];
      ++finite;
    }
  }
  report.mean_mse = mse_sum / static_cast<real>(testset.size());
  report.mean_psnr = finite > 0 ? psnr_sum / static_cast<real>(finite)
                                : std::numeric_limits<real>::infinity();
  return report;
}

void export_grid(const std::string& path, const std::vector<GridRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("export_grid: no rows");
  const Shape shape = rows[0].truth.shape();
  for (const GridRow& row : rows) {
    if (row.truth.shape() != shape || row.occluded.shape() != shape ||
        row.inpainted.shape() != shape) {
      throw std::invalid_argument("export_grid: mixed image shapes");
    }
  }
  const std::int64_t C = shape[1], H = shape[2], W = shape[3];
  const std::int64_t n = static_cast<std::int64_t>(rows.size());
  const std::int64_t sep = 2;
  const std::int64_t grid_h = n * H + (n - 1) * sep;
  const std::int64_t grid_w = 3 * W + 2 * sep;

  std::vector<real> canvas(static_cast<std::size_t>(C * grid_h * grid_w), real(1));
  auto paste = [&](const Tensor& im, std::int64_t row0, std::int64_t col0) {
    const auto v = im.values();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const real x = v[static_cast<std::size_t>((c * H + h) * W + w)];
          canvas[static_cast<std::size_t>((c * grid_h + row0 + h) * grid_w + col0 + w)] =
              std::clamp(x, real(0), real(1));
        }
  };
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t row0 = i * (H + sep);
    paste(rows[static_cast<std::size_t>(i)].truth, row0, 0);
    paste(rows[static_cast<std::size_t>(i)].occluded, row0, W + sep);
    paste(rows[static_cast<std::size_t>(i)].inpainted, row0, 2 * (W + sep));
  }

  const Tensor grid({1, C, grid_h, grid_w}, std::move(canvas));
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") {
    save_pgm(path, grid);
  } else if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") {
    save_png(path, grid);
  } else {
    throw std::invalid_argument("export_grid: path must end in .png or .pgm, got " + path);
  }
}

namespace {

real rel_err(real got, real want) {
  const real denom = std::max({std::abs(got), std::abs(want), real(1e-8)});
  return std::abs(got - want) / denom;
}

Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, real lo, real hi) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  std::vector<real> v(static_cast<std::size_t>(n));
  for (real& x : v) {
    const real u = static_cast<real>((rng() >> 11) * 0x1.0p-53);
    x = lo + (hi - lo) * u;
  }
  return Tensor(shape, std::move(v));
}

EnergyNetConfig check_config() {
  EnergyNetConfig cfg;
  cfg.num_conv_layers = 2;
  cfg.feature_maps = 3;
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.input_channels = 1;
  cfg.image_side = 8;
  return cfg;
}

}  // namespace

real gradcheck_first_order(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  real worst = 0;
  auto track = [&](real err) { worst = std::max(worst, err); };

  // Individual ops, each probed over every input coordinate.
  const Tensor conv_x = random_tensor(rng, {1, 2, 6, 6}, -1, 1);
  const Tensor conv_w = random_tensor(rng, {3, 2, 3, 3}, -1, 1);
  const Tensor conv_b = random_tensor(rng, {3}, -1, 1);
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(conv2d(t, conv_w, conv_b, 2, 1)); }, conv_x));
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(conv2d(conv_x, t, conv_b, 2, 1)); }, conv_w));
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(conv2d(conv_x, conv_w, t, 2, 1)); }, conv_b));

  const Tensor fc_x = random_tensor(rng, {12}, -1, 1);
  const Tensor fc_w = random_tensor(rng, {4, 12}, -1, 1);
  const Tensor fc_b = random_tensor(rng, {4}, -1, 1);
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(fully_connected(t, fc_w, fc_b)); }, fc_x));
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(fully_connected(fc_x, t, fc_b)); }, fc_w));

  const Tensor pool_x = random_tensor(rng, {1, 2, 8, 8}, -1, 1);
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(avg_downsample(t, 2)); }, pool_x));

  // relu probed away from its kink.
  const Tensor relu_x = random_tensor(rng, {1, 1, 4, 4}, real(0.2), 1);
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(relu(sub(t, Tensor::full(t.shape(), real(0.1))))); },
      relu_x));
  track(finite_difference_check(
      [&](const Tensor& t) { return sum_all(mul(t, scale(t, real(0.5)))); }, relu_x));

  // The assembled energy, w.r.t. the candidate and w.r.t. each weight tensor.
  const EnergyNetConfig cfg = check_config();
  const EnergyNetParams params = init_params(cfg, rng());
  const Tensor x = random_tensor(rng, {1, 1, 8, 8}, 0, 1);
  const Tensor y0 = random_tensor(rng, {1, 1, 8, 8}, real(0.2), real(0.8));
  track(finite_difference_check(
      [&](const Tensor& t) { return energy(x, t, params); }, y0));

  std::size_t index = 0;
  for_each_param(params, [&](const std::string&, const Tensor&) { ++index; });
  const std::size_t n_params = index;
  for (std::size_t target = 0; target < n_params; ++target) {
    // Pull the target tensor out, probe the energy as a function of it.
    Tensor probe;
    index = 0;
    for_each_param(params, [&](const std::string&, const Tensor& t) {
      if (index++ == target) probe = t;
    });
    auto with = [&](const Tensor& t) {
      EnergyNetParams p = params;
      index = 0;
      for_each_param(p, [&](const std::string&, Tensor& slot) {
        if (index++ == target) slot = t;
      });
      return energy(x, y0, p);
    };
    track(finite_difference_check(with, probe));
  }
  return worst;
}

real gradcheck_second_order(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  real worst = 0;
  const real eps = real(1e-5);

  // d/dy of <dE/dy, u> for the full energy, probed at random coordinates
  // against central differences of the inner product.
  const EnergyNetConfig cfg = check_config();
  const EnergyNetParams params = init_params(cfg, rng());
  const Tensor x = random_tensor(rng, {1, 1, 8, 8}, 0, 1);
  const Tensor y0 = random_tensor(rng, {1, 1, 8, 8}, real(0.2), real(0.8));
  const Tensor u = random_tensor(rng, {1, 1, 8, 8}, -1, 1);

  auto inner_product = [&](const Tensor& at) {
    Graph g;
    const Tensor y = g.leaf(at);
    const std::vector<Tensor> d = grad(energy(x, y, params), {y});
    return sum_all(mul(d[0], u)).item();
  };

  std::vector<Tensor> second;
  {
    Graph g;
    const Tensor y = g.leaf(y0);
    const std::vector<Tensor> d = grad(energy(x, y, params), {y}, true);
    second = grad(sum_all(mul(d[0], u)), {y});
  }

  for (int probe = 0; probe < 24; ++probe) {
    const std::size_t k = rng() % y0.values().size();
    std::vector<real> up(y0.values().begin(), y0.values().end());
    std::vector<real> dn(up);
    up[k] += eps;
    dn[k] -= eps;
    const real fd =
        (inner_product(Tensor(y0.shape(), std::move(up))) -
         inner_product(Tensor(y0.shape(), std::move(dn)))) /
        (2 * eps);
    const real got = second[0].values()[k];
    worst = std::max(worst, rel_err(got, fd));
  }

  // Same pattern for a weight tensor: d/dw of <dE/dy, u>.
  Tensor w0;
  for_each_param(params, [&](const std::string& name, const Tensor& t) {
    if (name == "output/conv0/weight") w0 = t;
  });
  auto with_w = [&](const Tensor& t) {
    EnergyNetParams p = params;
    for_each_param(p, [&](const std::string& name, Tensor& slot) {
      if (name == "output/conv0/weight") slot = t;
    });
    return p;
  };
  auto inner_product_w = [&](const Tensor& wt) {
    const EnergyNetParams p = with_w(wt);
    Graph g;
    const Tensor y = g.leaf(y0);
    const std::vector<Tensor> d = grad(energy(x, y, p), {y});
    return sum_all(mul(d[0], u)).item();
  };

  std::vector<Tensor> second_w;
  {
    Graph g;
    const EnergyNetParams p = attach_params(params, g);
    Tensor w_attached;
    for_each_param(p, [&](const std::string& name, const Tensor& t) {
      if (name == "output/conv0/weight") w_attached = t;
    });
    const Tensor y = g.leaf(y0);
    const std::vector<Tensor> d = grad(energy(x, y, p), {y}, true);
    second_w = grad(sum_all(mul(d[0], u)), {w_attached});
  }

  for (int probe = 0; probe < 24; ++probe) {
    const std::size_t k = rng() % w0.values().size();
    std::vector<real> up(w0.values().begin(), w0.values().end());
    std::vector<real> dn(up);
    up[k] += eps;
    dn[k] -= eps;
    const real fd = (inner_product_w(Tensor(w0.shape(), std::move(up))) -
                     inner_product_w(Tensor(w0.shape(), std::move(dn)))) /
                    (2 * eps);
    const real got = second_w[0].values()[k];
    worst = std::max(worst, rel_err(got, fd));
  }
  return worst;
}

}  // namespace dseb
