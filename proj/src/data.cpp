#include "dseb/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dseb/inference.hpp"  // mean_image, clamp01

namespace dseb {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }
[[noreturn]] void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) io_fail("cannot open " + path);
  std::vector<unsigned char> buf{std::istreambuf_iterator<char>(f),
                                 std::istreambuf_iterator<char>()};
  return buf;
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) io_fail("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) io_fail("write to " + path + " failed");
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

unsigned char to_byte(real v) {
  const real c = std::clamp(v, real(0), real(1));
  return static_cast<unsigned char>(std::llround(c * real(255)));
}

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x";
  for (int shift = 28; shift >= 0; shift -= 4) os << "0123456789abcdef"[(v >> shift) & 0xF];
  return os.str();
}

}  // namespace

std::vector<Tensor> load_idx(const std::string& path) {
  const std::vector<unsigned char> buf = read_file(path);
  if (buf.size() < 4) io_fail(path + ": truncated: expected at least 4 bytes, file has " +
                              std::to_string(buf.size()));
  const std::uint32_t magic = be32(buf.data());
  if (magic == kIdxLabelMagic) {
    io_fail(path + ": magic " + hex32(magic) +
            " is a label file; this loader takes image files (magic " +
            hex32(kIdxImageMagic) + ")");
  }
  if (magic != kIdxImageMagic) {
    io_fail(path + ": bad magic " + hex32(magic) + ", expected " + hex32(kIdxImageMagic));
  }
  if (buf.size() < 16) io_fail(path + ": truncated: expected 16 header bytes, file has " +
                               std::to_string(buf.size()));
  const std::uint64_t n = be32(buf.data() + 4);
  const std::uint64_t h = be32(buf.data() + 8);
  const std::uint64_t w = be32(buf.data() + 12);
  if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20) || n > (1u << 24)) {
    io_fail(path + ": implausible dimensions " + std::to_string(n) + "x" + std::to_string(h) +
            "x" + std::to_string(w));
  }
  const std::uint64_t expect = 16 + n * h * w;
  if (buf.size() != expect) {
    io_fail(path + ": truncated or padded: expected " + std::to_string(expect) +
            " bytes, file has " + std::to_string(buf.size()));
  }

  std::vector<Tensor> out;
  out.reserve(n);
  const unsigned char* p = buf.data() + 16;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<real> v(h * w);
    for (std::uint64_t k = 0; k < h * w; ++k) v[k] = static_cast<real>(p[k]) / real(255);
    p += h * w;
    out.push_back(Tensor({1, 1, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)},
                         std::move(v)));
  }
  return out;
}

void save_idx(const std::string& path, const std::vector<Tensor>& images) {
  if (images.empty()) fail("save_idx: empty image list");
  const Shape& shape = images[0].shape();
  if (shape.size() != 4 || shape[0] != 1 || shape[1] != 1) {
    fail("save_idx: expected grayscale {1,1,H,W} images, got " + shape_str(shape));
  }
  std::vector<unsigned char> out;
  out.reserve(16 + images.size() * static_cast<std::size_t>(shape[2] * shape[3]));
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(images.size()));
  put_be32(out, static_cast<std::uint32_t>(shape[2]));
  put_be32(out, static_cast<std::uint32_t>(shape[3]));
  for (const Tensor& im : images) {
    if (im.shape() != shape) {
      fail("save_idx: mixed shapes " + shape_str(shape) + " and " + shape_str(im.shape()));
    }
    for (real v : im.values()) out.push_back(to_byte(v));
  }
  write_file(path, out);
}

Tensor load_pgm(const std::string& path) {
  const std::vector<unsigned char> buf = read_file(path);
  std::size_t pos = 0;

  // Header tokens are separated by whitespace; '#' starts a comment running
  // to end of line.
  auto next_token = [&]() -> std::string {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') ++pos;
    if (start == pos) io_fail(path + ": truncated header");
    return std::string(buf.begin() + static_cast<std::ptrdiff_t>(start),
                       buf.begin() + static_cast<std::ptrdiff_t>(pos));
  };

  if (next_token() != "P5") io_fail(path + ": not a binary P5 file");
  auto parse_int = [&](const char* what) -> std::int64_t {
    const std::string tok = next_token();
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tok, &used);
      if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      io_fail(path + ": bad " + std::string(what) + " token '" + tok + "'");
    }
  };
  const std::int64_t w = parse_int("width");
  const std::int64_t h = parse_int("height");
  const std::int64_t maxval = parse_int("maxval");
  if (maxval != 255) io_fail(path + ": unsupported maxval " + std::to_string(maxval));
  if (pos >= buf.size() || !std::isspace(buf[pos])) io_fail(path + ": missing raster separator");
  ++pos;  // exactly one whitespace byte before the raster

  const std::uint64_t count = static_cast<std::uint64_t>(w) * static_cast<std::uint64_t>(h);
  if (buf.size() - pos != count) {
    io_fail(path + ": raster has " + std::to_string(buf.size() - pos) + " bytes, expected " +
            std::to_string(count));
  }
  std::vector<real> v(count);
  for (std::uint64_t i = 0; i < count; ++i)
    v[i] = static_cast<real>(buf[pos + i]) / real(255);
  return Tensor({1, 1, h, w}, std::move(v));
}

void save_pgm(const std::string& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 1) {
    fail("save_pgm: expected {1,1,H,W}, got " + shape_str(s));
  }
  std::ostringstream head;
  head << "P5\n" << s[3] << ' ' << s[2] << "\n255\n";
  const std::string header = head.str();
  std::vector<unsigned char> out(header.begin(), header.end());
  for (real v : image.values()) out.push_back(to_byte(v));
  write_file(path, out);
}

Tensor load_png(const std::string& path, int channels) {
  if (channels != 1 && channels != 3) fail("load_png: channels must be 1 or 3");
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    io_fail(path + ": " + im.message);
  }
  im.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, raw.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    io_fail(path + ": " + msg);
  }
  const std::int64_t h = im.height, w = im.width;
  std::vector<real> v(static_cast<std::size_t>(channels) * h * w);
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < h * w; ++i)
      v[static_cast<std::size_t>(c * h * w + i)] =
          static_cast<real>(raw[static_cast<std::size_t>(i * channels + c)]) / real(255);
  return Tensor({1, channels, h, w}, std::move(v));
}

void save_png(const std::string& path, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3)) {
    fail("save_png: expected {1,1|3,H,W}, got " + shape_str(s));
  }
  const int channels = static_cast<int>(s[1]);
  const std::int64_t h = s[2], w = s[3];
  std::vector<unsigned char> raw(static_cast<std::size_t>(channels) * h * w);
  std::span<const real> v = image.values();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < h * w; ++i)
      raw[static_cast<std::size_t>(i * channels + c)] =
          to_byte(v[static_cast<std::size_t>(c * h * w + i)]);

  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(w);
  im.height = static_cast<png_uint_32>(h);
  im.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, raw.data(), 0, nullptr)) {
    io_fail(path + ": " + im.message);
  }
}

std::vector<Tensor> load_image_dir(const std::string& path, int channels) {
  if (channels != 1 && channels != 3) fail("load_image_dir: channels must be 1 or 3");
  if (!fs::is_directory(path)) io_fail(path + ": not a directory");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  std::vector<Tensor> out;
  std::int64_t side = -1;
  for (const fs::path& file : files) {
    std::string ext = file.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    Tensor im;
    if (ext == ".pgm") {
      if (channels == 3) {
        io_fail(file.string() + ": grayscale PGM cannot satisfy a 3-channel load");
      }
      im = load_pgm(file.string());
    } else {
      im = load_png(file.string(), channels);
    }
    const Shape& s = im.shape();
    if (s[2] != s[3]) {
      io_fail(file.string() + ": image is " + std::to_string(s[3]) + "x" +
              std::to_string(s[2]) + ", expected square");
    }
    if (side < 0) side = s[2];
    if (s[2] != side) {
      io_fail(file.string() + ": side " + std::to_string(s[2]) +
              " does not match the first image's side " + std::to_string(side));
    }
    out.push_back(std::move(im));
  }
  return out;
}

namespace {

ImagePair masked_pair(const Tensor& y, std::vector<std::uint8_t> mask) {
  const Shape& s = y.shape();
  const std::int64_t C = s[1], H = s[2], W = s[3];
  std::vector<real> xv(y.values().begin(), y.values().end());
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w)
      if (mask[static_cast<std::size_t>(h * W + w)])
        for (std::int64_t c = 0; c < C; ++c) xv[static_cast<std::size_t>((c * H + h) * W + w)] = 0;
  ImagePair pair;
  pair.x = Tensor(s, std::move(xv));
  pair.y = y;
  pair.mask = std::move(mask);
  return pair;
}

void require_square_image(const char* op, const Tensor& y) {
  const Shape& s = y.shape();
  if (s.size() != 4 || s[0] != 1 || s[2] != s[3]) {
    fail(std::string(op) + ": expected a square {1,C,S,S} image, got " + shape_str(s));
  }
}

}  // namespace

ImagePair apply_center_mask(const Tensor& y, real fraction) {
  require_square_image("apply_center_mask", y);
  if (!(fraction >= 0 && fraction < 1)) {
    fail("apply_center_mask: fraction must be in [0,1), got " + std::to_string(fraction));
  }
  const std::int64_t side = y.shape()[2];
  const std::int64_t block =
      std::llround(static_cast<double>(side) * std::sqrt(static_cast<double>(fraction)));
  const std::int64_t off = (side - block) / 2;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(side * side), 0);
  for (std::int64_t h = off; h < off + block; ++h)
    for (std::int64_t w = off; w < off + block; ++w)
      mask[static_cast<std::size_t>(h * side + w)] = 1;
  return masked_pair(y, std::move(mask));
}

ImagePair apply_half_mask(const Tensor& y) {
  require_square_image("apply_half_mask", y);
  const std::int64_t side = y.shape()[2];
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(side * side), 0);
  for (std::int64_t h = 0; h < side; ++h)
    for (std::int64_t w = 0; w < side / 2; ++w)
      mask[static_cast<std::size_t>(h * side + w)] = 1;
  return masked_pair(y, std::move(mask));
}

DatasetSplit make_split(const std::vector<Tensor>& images, int n_test, std::uint64_t seed,
                        const std::function<ImagePair(const Tensor&)>& masker) {
  const int n = static_cast<int>(images.size());
  if (n_test < 0 || n_test >= n) {
    fail("make_split: n_test " + std::to_string(n_test) + " must be in [0, " +
         std::to_string(n) + ")");
  }

  // Explicit Fisher-Yates: std::shuffle's draw sequence is not pinned by the
  // standard, and split membership must be reproducible everywhere.
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  DatasetSplit split;
  const int n_train = n - n_test;
  std::vector<Tensor> train_truths;
  train_truths.reserve(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n; ++i) {
    const Tensor& y = images[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    if (i < n_train) {
      split.train.push_back(masker(y));
      train_truths.push_back(y);
    } else {
      split.test.push_back(masker(y));
    }
  }
  split.mean_image = mean_image(train_truths);
  return split;
}

}  // namespace dseb
