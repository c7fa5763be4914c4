// Command-line entry points: train, infer, eval, gradcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dseb/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MaskFlags {
  std::string mask = "center";
  double fraction = 0.25;
};

void add_mask_flags(CLI::App* cmd, MaskFlags& flags) {
  cmd->add_option("--mask", flags.mask, "Occlusion type: center or half-left")
      ->check(CLI::IsMember({"center", "half-left"}));
  cmd->add_option("--fraction", flags.fraction, "Masked area fraction for the center mask");
}

dseb::ImagePair apply_mask(const MaskFlags& flags, const dseb::Tensor& y) {
  if (flags.mask == "half-left") return dseb::apply_half_mask(y);
  return dseb::apply_center_mask(y, static_cast<dseb::real>(flags.fraction));
}

std::vector<dseb::Tensor> load_images(const std::string& path, int channels) {
  if (fs::is_directory(path)) return dseb::load_image_dir(path, channels);
  return dseb::load_idx(path);
}

void reject_unknown_keys(const json& section, const char* name,
                         std::initializer_list<const char*> known) {
  for (const auto& item : section.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) ok = true;
    if (!ok) {
      throw std::invalid_argument(std::string("config: unknown key \"") + item.key() +
                                  "\" in section \"" + name + "\"");
    }
  }
}

void parse_inference(const json& section, dseb::InferenceConfig& cfg) {
  reject_unknown_keys(section, "inner", {"alpha", "momentum", "T"});
  cfg.alpha = static_cast<dseb::real>(section.value("alpha", static_cast<double>(cfg.alpha)));
  cfg.momentum =
      static_cast<dseb::real>(section.value("momentum", static_cast<double>(cfg.momentum)));
  cfg.T = section.value("T", cfg.T);
}

void parse_config_file(const std::string& path, dseb::EnergyNetConfig& net,
                       dseb::TrainConfig& train) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  json root = json::parse(f);
  reject_unknown_keys(root, "(top level)", {"energy_net", "train"});

  if (root.contains("energy_net")) {
    const json& s = root["energy_net"];
    reject_unknown_keys(s, "energy_net",
                        {"num_conv_layers", "feature_maps", "kernel", "stride", "fc_dim",
                         "input_channels", "image_side"});
    net.num_conv_layers = s.value("num_conv_layers", net.num_conv_layers);
    net.feature_maps = s.value("feature_maps", net.feature_maps);
    net.kernel = s.value("kernel", net.kernel);
    net.stride = s.value("stride", net.stride);
    net.fc_dim = s.value("fc_dim", net.fc_dim);
    net.input_channels = s.value("input_channels", net.input_channels);
    net.image_side = s.value("image_side", net.image_side);
  }
  if (root.contains("train")) {
    const json& s = root["train"];
    reject_unknown_keys(s, "train",
                        {"M", "lambda", "batch_size", "seed", "adam_beta1", "adam_beta2",
                         "adam_eps", "clip_gradients", "inner"});
    train.M = s.value("M", train.M);
    train.lambda = static_cast<dseb::real>(s.value("lambda", static_cast<double>(train.lambda)));
    train.batch_size = s.value("batch_size", train.batch_size);
    train.seed = s.value("seed", train.seed);
    train.adam_beta1 =
        static_cast<dseb::real>(s.value("adam_beta1", static_cast<double>(train.adam_beta1)));
    train.adam_beta2 =
        static_cast<dseb::real>(s.value("adam_beta2", static_cast<double>(train.adam_beta2)));
    train.adam_eps =
        static_cast<dseb::real>(s.value("adam_eps", static_cast<double>(train.adam_eps)));
    train.clip_gradients = s.value("clip_gradients", train.clip_gradients);
    if (s.contains("inner")) parse_inference(s["inner"], train.inner);
  }
}

int run_train(const std::string& config_path, const std::string& data_path,
              const MaskFlags& mask, const std::string& out_path, std::uint64_t seed,
              bool seed_given, const std::string& report_path) {
  dseb::EnergyNetConfig net;
  dseb::TrainConfig cfg;
  if (!config_path.empty()) parse_config_file(config_path, net, cfg);
  if (seed_given) cfg.seed = seed;

  const std::vector<dseb::Tensor> images = load_images(data_path, net.input_channels);
  if (images.empty()) throw std::runtime_error("no images found in " + data_path);
  if (net.image_side == 0) net.image_side = static_cast<int>(images[0].shape()[2]);
  net.validate();

  std::vector<dseb::ImagePair> pairs;
  pairs.reserve(images.size());
  for (const dseb::Tensor& y : images) pairs.push_back(apply_mask(mask, y));

  std::fprintf(stderr, "training on %zu pairs, %d outer steps\n", pairs.size(), cfg.M);
  const dseb::TrainReport report =
      dseb::train(pairs, cfg, net, [&](int step, dseb::real loss) {
        if ((step + 1) % 100 == 0 || step + 1 == cfg.M) {
          std::fprintf(stderr, "step %d/%d loss %.6f\n", step + 1, cfg.M,
                       static_cast<double>(loss));
        }
      });
  std::fprintf(stderr, "finished in %.1fs\n", static_cast<double>(report.wall_seconds));

  dseb::Checkpoint ckpt;
  ckpt.params = report.params;
  ckpt.mean_image = report.mean_image;
  ckpt.adam = report.adam;
  dseb::save_checkpoint(out_path, ckpt);
  std::fprintf(stderr, "checkpoint written to %s\n", out_path.c_str());

  if (!report_path.empty()) {
    std::ofstream csv(report_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open report file " + report_path);
    csv << "step,loss_sum,loss_per_pixel\n";
    for (std::size_t i = 0; i < report.loss_sum.size(); ++i) {
      char line[96];
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", i,
                    static_cast<double>(report.loss_sum[i]),
                    static_cast<double>(report.loss_per_pixel[i]));
      csv << line;
    }
  }
  return 0;
}

int run_infer(const std::string& ckpt_path, const std::string& input_path,
              const std::string& out_path) {
  const dseb::Checkpoint ckpt = dseb::load_checkpoint(ckpt_path);
  const int channels = ckpt.params.config.input_channels;

  // A directory input maps filenames into an output directory; a single
  // image writes straight to the --out path (unless that is a directory).
  std::vector<fs::path> files;
  const bool batch = fs::is_directory(input_path);
  if (batch) {
    for (const auto& entry : fs::directory_iterator(input_path)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext == ".pgm" || ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .pgm or .png images in " + input_path);
  } else {
    files.push_back(input_path);
  }

  const bool out_is_dir = batch || fs::is_directory(out_path);
  if (out_is_dir) fs::create_directories(out_path);
  else if (fs::path(out_path).has_parent_path())
    fs::create_directories(fs::path(out_path).parent_path());

  const dseb::InferenceConfig cfg;  // stock inference settings
  for (const fs::path& file : files) {
    dseb::Tensor x;
    if (file.extension() == ".pgm") {
      x = dseb::load_pgm(file.string());
    } else {
      x = dseb::load_png(file.string(), channels);
    }
    const dseb::Shape want = {1, channels, ckpt.params.config.image_side,
                              ckpt.params.config.image_side};
    if (x.shape() != want) {
      throw std::runtime_error(file.string() + ": shape " + dseb::shape_str(x.shape()) +
                               " does not match the checkpoint's " + dseb::shape_str(want));
    }
    const dseb::Tensor out = dseb::inpaint(x, ckpt.params, ckpt.mean_image, cfg);
    const fs::path target = out_is_dir ? fs::path(out_path) / file.filename() : fs::path(out_path);
    if (target.extension() == ".pgm") {
      dseb::save_pgm(target.string(), out);
    } else {
      dseb::save_png(target.string(), out);
    }
    std::fprintf(stderr, "%s -> %s\n", file.string().c_str(), target.string().c_str());
  }
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path, const MaskFlags& mask,
             bool composite, const std::string& grid_path) {
  const dseb::Checkpoint ckpt = dseb::load_checkpoint(ckpt_path);
  const std::vector<dseb::Tensor> images =
      load_images(data_path, ckpt.params.config.input_channels);
  if (images.empty()) throw std::runtime_error("no images found in " + data_path);

  std::vector<dseb::ImagePair> testset;
  testset.reserve(images.size());
  for (const dseb::Tensor& y : images) testset.push_back(apply_mask(mask, y));

  const dseb::InferenceConfig cfg;  // stock inference settings
  const dseb::EvalReport report = dseb::evaluate(ckpt, testset, cfg, composite);

  std::printf("PSNR=%.6f\n", static_cast<double>(report.mean_psnr));
  std::printf("MSE=%.6f\n", static_cast<double>(report.mean_mse));
  if (report.infinite_count > 0) {
    std::fprintf(stderr, "%d exact reconstructions excluded from the PSNR mean\n",
                 report.infinite_count);
  }

  if (!grid_path.empty()) {
    std::vector<dseb::GridRow> rows;
    const std::size_t n = std::min<std::size_t>(8, testset.size());
    for (std::size_t i = 0; i < n; ++i) {
      const dseb::ImagePair& pair = testset[i];
      rows.push_back({pair.y, pair.x, dseb::inpaint(pair.x, ckpt.params, ckpt.mean_image, cfg)});
    }
    dseb::export_grid(grid_path, rows);
    std::fprintf(stderr, "grid written to %s\n", grid_path.c_str());
  }
  return 0;
}

int run_gradcheck(int order, std::uint64_t seed) {
  int status = 0;
  if (order == 0 || order == 1) {
    const dseb::real err = dseb::gradcheck_first_order(seed);
    std::printf("first-order max relative error: %.3e (tolerance 1e-5)\n",
                static_cast<double>(err));
    if (!(err < 1e-5)) status = 1;
  }
  if (order == 0 || order == 2) {
    const dseb::real err = dseb::gradcheck_second_order(seed);
    std::printf("second-order max relative error: %.3e (tolerance 1e-3)\n",
                static_cast<double>(err));
    if (!(err < 1e-3)) status = 1;
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-based blind inpainting: train, infer, evaluate"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string train_config, train_data, train_out, train_report;
  MaskFlags train_mask;
  std::uint64_t train_seed = 0;
  train->add_option("--config", train_config, "JSON config file");
  train->add_option("--data", train_data, "Image directory or IDX file")->required();
  add_mask_flags(train, train_mask);
  train->add_option("--out", train_out, "Checkpoint output path")->required();
  auto* seed_opt = train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--report", train_report, "Write a step,loss_sum,loss_per_pixel CSV");

  // infer
  auto* infer = app.add_subcommand("infer", "Blind-inpaint images with a checkpoint");
  std::string infer_ckpt, infer_input, infer_out;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint path")->required();
  infer->add_option("--input", infer_input, "Image file or directory")->required();
  infer->add_option("--out", infer_out, "Output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a masked dataset");
  std::string eval_ckpt, eval_data, eval_grid;
  MaskFlags eval_mask;
  bool eval_composite = false;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", eval_data, "Image directory or IDX file")->required();
  add_mask_flags(eval, eval_mask);
  eval->add_flag("--composite", eval_composite, "Paste known pixels back before scoring");
  eval->add_option("--grid", eval_grid, "Write a qualitative 3-column grid image");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference self-test");
  int gc_order = 0;
  std::uint64_t gc_seed = 1;
  gradcheck->add_option("--order", gc_order, "1 or 2 (default: both)")
      ->check(CLI::IsMember({1, 2}));
  gradcheck->add_option("--seed", gc_seed, "Probe seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return run_train(train_config, train_data, train_mask, train_out, train_seed,
                       seed_opt->count() > 0, train_report);
    }
    if (infer->parsed()) return run_infer(infer_ckpt, infer_input, infer_out);
    if (eval->parsed()) {
      return run_eval(eval_ckpt, eval_data, eval_mask, eval_composite, eval_grid);
    }
    if (gradcheck->parsed()) return run_gradcheck(gc_order, gc_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
