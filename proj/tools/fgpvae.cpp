// fgpvae: build rotated datasets, train, evaluate, generate, extrapolate and
// benchmark the factorized GP-VAE.
//
// Exit codes: 0 ok, 1 internal error, 2 configuration, 3 data, 4 numerical,
// 5 unknown digit.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fgpvae/fgpvae.hpp"

namespace fs = std::filesystem;
using fgpvae::TrainConfig;
using json = nlohmann::json;

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumerical = 4, kUnknownDigit = 5 };

struct Flags {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string mnist = "data/mnist";
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs_override;
  int digit = -1;
  std::string angles;
  std::string sizes = "25,50,100,200";
};

int threads_from_env() {
  const char* env = std::getenv("FGPVAE_THREADS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const int n = std::stoi(env, &used);
    if (used != std::string(env).size() || n < 1) throw std::invalid_argument(env);
    return n;
  } catch (const std::exception&) {
    throw fgpvae::ConfigError(std::string("FGPVAE_THREADS must be a positive integer, got '") + env + "'");
  }
}

TrainConfig load_config(const Flags& f) {
  TrainConfig cfg;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw fgpvae::ConfigError("cannot read config file " + f.config);
    std::stringstream text;
    text << in.rdbuf();
    cfg = fgpvae::parse_config(text.str());
  }
  if (f.seed) cfg.seed = *f.seed;
  if (f.epochs_override) cfg.epochs = *f.epochs_override;
  cfg.threads = threads_from_env();
  cfg.validate();
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw fgpvae::ConfigError(std::string(flag) + " is required");
}

fgpvae::RotatedDataset open_dataset(const std::string& path) {
  require(path, "--data");
  if (!fs::exists(path)) throw fgpvae::DataError("dataset not found: " + path);
  return fgpvae::load_dataset(path);
}

fgpvae::ModelParams open_checkpoint(const std::string& path) {
  require(path, "--checkpoint");
  if (!fs::exists(path)) throw fgpvae::DataError("checkpoint not found: " + path);
  return fgpvae::load_checkpoint(path);
}

std::vector<double> parse_angles(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !std::isfinite(v)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw fgpvae::ConfigError("--angles: cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw fgpvae::ConfigError("--angles: no angles given");
  return out;
}

std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw fgpvae::ConfigError("--sizes: cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw fgpvae::ConfigError("--sizes: no sizes given");
  return out;
}

json config_json(const TrainConfig& cfg) {
  json j = json::object();
  std::stringstream in(fgpvae::format_config(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

void write_manifest(const fs::path& path, const std::string& command, const TrainConfig& cfg,
                    const Flags& f, json extra = json::object()) {
  json m;
  m["command"] = command;
  m["version"] = fgpvae::kVersion;
  m["seed"] = cfg.seed;
  m["config"] = config_json(cfg);
  json flags;
  flags["config"] = f.config;
  flags["data"] = f.data;
  flags["out"] = f.out;
  flags["checkpoint"] = f.checkpoint;
  flags["mnist"] = f.mnist;
  flags["digit"] = f.digit;
  flags["angles"] = f.angles;
  flags["sizes"] = f.sizes;
  flags["threads"] = cfg.threads;
  m["flags"] = flags;
  m["results"] = std::move(extra);
  fgpvae::write_file_atomic(path, m.dump(2) + "\n");
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

// --- commands ---------------------------------------------------------------

int cmd_build_data(const Flags& f) {
  const TrainConfig cfg = load_config(f);
  require(f.out, "--out");
  const fs::path dir = f.mnist;
  const auto raws = fgpvae::load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  const auto ds = fgpvae::build_rotated_dataset(raws, cfg.build_options());
  fgpvae::save_dataset(ds, f.out);
  json res{{"images", ds.size()},
           {"train", ds.count(fgpvae::Split::Train)},
           {"test", ds.count(fgpvae::Split::Test)},
           {"extrapolation", ds.count(fgpvae::Split::Extrapolation)}};
  write_manifest(fs::path(f.out).string() + ".manifest.json", "build-data", cfg, f, res);
  std::cout << "wrote " << f.out << ": " << ds.size() << " images (" << res["train"] << " train, "
            << res["test"] << " test, " << res["extrapolation"] << " extrapolation)\n";
  return kOk;
}

int cmd_train(const Flags& f) {
  const TrainConfig cfg = load_config(f);
  const auto ds = open_dataset(f.data);
  require(f.out, "--out");
  if (cfg.rotations_per_subset > ds.num_angles) {
    throw fgpvae::ConfigError("rotations_per_subset exceeds the dataset's " + std::to_string(ds.num_angles) + " angles");
  }
  const fs::path out = f.out;
  fs::create_directories(out);
  std::optional<fgpvae::ModelParams> init;
  if (!f.checkpoint.empty()) init = open_checkpoint(f.checkpoint);

  std::vector<fgpvae::EpochMetrics> log;
  fgpvae::TrainHooks hooks;
  hooks.on_epoch = [&](const fgpvae::EpochMetrics& m, const fgpvae::ModelParams& p) {
    log.push_back(m);
    fgpvae::write_file_atomic(out / "metrics.csv", fgpvae::metrics_csv(log));
    if (m.epoch % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_epoch" << std::setw(4) << std::setfill('0') << m.epoch << ".ckpt";
      fgpvae::save_checkpoint(p, out / name.str());
    }
    if (m.epoch % 10 == 0 || m.epoch == cfg.epochs) {
      std::cerr << "epoch " << m.epoch << " elbo " << fmt(m.elbo) << " mse " << fmt(m.mse) << " multiplier "
                << fmt(m.geco_multiplier) << " seconds " << fmt(m.seconds) << "\n";
    }
  };
  const auto result = fgpvae::train(ds, cfg, hooks, init);
  fgpvae::save_checkpoint(result.params, out / "model.ckpt");
  if (log.empty()) fgpvae::write_file_atomic(out / "metrics.csv", fgpvae::metrics_csv(log));

  json res{{"epochs", cfg.epochs}};
  if (ds.count(fgpvae::Split::Test) > 0) {
    const fgpvae::Model model(result.params.config);
    const double mse = fgpvae::evaluate(model, result.params, ds);
    res["test_mse"] = mse;
    std::cout << "test_mse " << fmt(mse) << "\n";
  }
  write_manifest(out / "manifest.json", "train", cfg, f, res);
  return kOk;
}

int cmd_eval(const Flags& f) {
  const TrainConfig cfg = load_config(f);
  const auto params = open_checkpoint(f.checkpoint);
  const auto ds = open_dataset(f.data);
  const fgpvae::Model model(params.config);
  const double mse = fgpvae::evaluate(model, params, ds);
  std::cout << "test_mse " << fmt(mse) << "\n";
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_manifest(fs::path(f.out) / "manifest.json", "eval", cfg, f, {{"test_mse", mse}});
  }
  return kOk;
}

int cmd_generate(const Flags& f) {
  const TrainConfig cfg = load_config(f);
  const auto params = open_checkpoint(f.checkpoint);
  const auto ds = open_dataset(f.data);
  require(f.out, "--out");
  const auto angles = parse_angles(f.angles);
  if (f.digit < 0 || f.digit >= ds.num_digits) {
    throw fgpvae::UnknownDigitError("digit " + std::to_string(f.digit) + " is not in the dataset (0.." +
                                    std::to_string(ds.num_digits - 1) + ")");
  }
  const fgpvae::Model model(params.config);
  fgpvae::DigitSubset subset;
  for (const auto& s : fgpvae::partition_by_digit(ds)) {
    if (s.digit == f.digit) subset = s;
  }
  std::vector<std::size_t> context;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    if (subset.split[i] != fgpvae::Split::Test) context.push_back(i);
  }
  if (context.empty()) throw fgpvae::MissingContextError("digit " + std::to_string(f.digit) + " has no context images");
  const auto ctx = fgpvae::context_from(model, params, subset, context);

  const fs::path out = f.out;
  fs::create_directories(out);
  const int h = ds.height, w = ds.width;
  const auto n = static_cast<int>(angles.size());
  std::vector<double> grid(static_cast<std::size_t>(2 * h) * n * w, 0.0);
  bool any_truth = false;
  json files = json::array();
  for (int k = 0; k < n; ++k) {
    const double a = angles[static_cast<std::size_t>(k)];
    const auto img = fgpvae::generate(model, params, ctx, {f.digit, a});
    std::ostringstream name;
    name << "generated_" << std::setw(2) << std::setfill('0') << k << ".pgm";
    fgpvae::write_file_atomic(out / name.str(), fgpvae::encode_pgm(h, w, img.pixels));
    json entry{{"angle", a}, {"file", name.str()}};

    const fgpvae::Image* truth = nullptr;
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (std::abs(subset.aux[i].angle - a) < 1e-9) truth = &subset.images[i];
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto col = static_cast<std::size_t>(k * w + x);
        const auto row_len = static_cast<std::size_t>(n * w);
        if (truth) grid[static_cast<std::size_t>(y) * row_len + col] = truth->at(y, x);
        grid[static_cast<std::size_t>(h + y) * row_len + col] = img.at(y, x);
      }
    }
    if (truth) {
      any_truth = true;
      entry["mse"] = fgpvae::mean_squared_error(img, *truth);
    }
    files.push_back(entry);
  }
  if (any_truth) fgpvae::write_file_atomic(out / "grid.pgm", fgpvae::encode_pgm(2 * h, n * w, grid));
  write_manifest(out / "manifest.json", "generate", cfg, f, {{"images", files}, {"grid", any_truth}});
  std::cout << "wrote " << n << " images" << (any_truth ? " and grid.pgm" : "") << " to " << f.out << "\n";
  return kOk;
}

int cmd_extrapolate(const Flags& f) {
  const TrainConfig cfg = load_config(f);
  const auto params = open_checkpoint(f.checkpoint);
  const auto ds = open_dataset(f.data);
  const fgpvae::Model model(params.config);
  const double extra = fgpvae::extrapolate_eval(model, params, ds, cfg.context_images, cfg.seed);
  json res{{"extrapolation_mse", extra}, {"context_images", cfg.context_images}};
  std::cout << "extrapolation_mse " << fmt(extra) << "\n";
  if (ds.count(fgpvae::Split::Test) > 0) {
    const double in_digit = fgpvae::evaluate(model, params, ds);
    res["test_mse"] = in_digit;
    res["ratio"] = extra / in_digit;
    std::cout << "test_mse " << fmt(in_digit) << "\nratio " << fmt(extra / in_digit) << "\n";
  }
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_manifest(fs::path(f.out) / "manifest.json", "extrapolate", cfg, f, res);
  }
  return kOk;
}

int cmd_bench(const Flags& f) {
  TrainConfig cfg = load_config(f);
  const auto sizes = parse_sizes(f.sizes);
  require(f.out, "--out");
  cfg.epochs = f.epochs_override ? *f.epochs_override : cfg.bench_epochs;
  const fs::path dir = f.mnist;
  const auto raws = fgpvae::load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");

  std::ostringstream csv;
  csv << "P,seconds_per_epoch,mse\n" << std::setprecision(10);
  std::vector<double> xs, ys;
  json rows = json::array();
  for (int p : sizes) {
    auto opts = cfg.build_options();
    opts.num_digits = p;
    const auto ds = fgpvae::build_rotated_dataset(raws, opts);
    const auto res = fgpvae::train(ds, cfg);
    const double spe = fgpvae::median_epoch_seconds(res.metrics);
    const double mse = res.metrics.back().mse;
    csv << p << "," << spe << "," << mse << "\n";
    xs.push_back(p);
    ys.push_back(spe);
    rows.push_back({{"P", p}, {"seconds_per_epoch", spe}, {"mse", mse}});
    std::cerr << "P " << p << " seconds_per_epoch " << fmt(spe) << " mse " << fmt(mse) << "\n";
  }
  fgpvae::write_file_atomic(f.out, csv.str());
  json res{{"rows", rows}};
  if (xs.size() >= 2) {
    const auto fit = fgpvae::fit_line(xs, ys);
    res["slope"] = fit.slope;
    res["intercept"] = fit.intercept;
    res["r2"] = fit.r2;
    std::cout << "linear fit: seconds_per_epoch = " << fmt(fit.slope) << " * P + " << fmt(fit.intercept)
              << ", R^2 = " << fmt(fit.r2) << "\n";
  }
  write_manifest(fs::path(f.out).string() + ".manifest.json", "bench", cfg, f, res);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorized Gaussian-process VAE on rotated MNIST"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", fgpvae::kVersion);
  Flags f;

  auto config_opt = [&](CLI::App* c) {
    c->add_option("--config", f.config, "Config file of 'key = value' lines");
    c->add_option("--seed", f.seed, "Override the config seed");
  };
  auto* build = app.add_subcommand("build-data", "Synthesize and save the rotated dataset");
  config_opt(build);
  build->add_option("--mnist", f.mnist, "Directory with train-images-idx3-ubyte and train-labels-idx1-ubyte");
  build->add_option("--out", f.out, "Output dataset file");

  auto* train = app.add_subcommand("train", "Train a model");
  config_opt(train);
  train->add_option("--data", f.data, "Dataset file from build-data");
  train->add_option("--out", f.out, "Output directory for checkpoints, metrics.csv and manifest.json");
  train->add_option("--checkpoint", f.checkpoint, "Initialize from this checkpoint");
  train->add_option("--epochs-override", f.epochs_override, "Override the config epoch count");

  auto* eval = app.add_subcommand("eval", "Held-out angle MSE of a checkpoint");
  config_opt(eval);
  eval->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  eval->add_option("--data", f.data, "Dataset file");
  eval->add_option("--out", f.out, "Optional output directory for manifest.json");

  auto* gen = app.add_subcommand("generate", "Conditionally generate one digit at given angles");
  config_opt(gen);
  gen->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  gen->add_option("--data", f.data, "Dataset file");
  gen->add_option("--digit", f.digit, "Digit instance id");
  gen->add_option("--angles", f.angles, "Comma-separated angles in radians");
  gen->add_option("--out", f.out, "Output directory for PGM files");

  auto* extra = app.add_subcommand("extrapolate", "MSE on digits unseen in training");
  config_opt(extra);
  extra->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  extra->add_option("--data", f.data, "Dataset file");
  extra->add_option("--out", f.out, "Optional output directory for manifest.json");

  auto* bench = app.add_subcommand("bench", "Seconds per epoch as a function of P");
  config_opt(bench);
  bench->add_option("--mnist", f.mnist, "Directory with the IDX files");
  bench->add_option("--sizes", f.sizes, "Comma-separated digit counts P");
  bench->add_option("--epochs-override", f.epochs_override, "Timed epochs per size (default: bench_epochs)");
  bench->add_option("--out", f.out, "Output CSV file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*build) return cmd_build_data(f);
    if (*train) return cmd_train(f);
    if (*eval) return cmd_eval(f);
    if (*gen) return cmd_generate(f);
    if (*extra) return cmd_extrapolate(f);
    if (*bench) return cmd_bench(f);
  } catch (const fgpvae::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const fgpvae::UnknownDigitError& e) {
    std::cerr << "unknown digit: " << e.what() << "\n";
    return kUnknownDigit;
  } catch (const fgpvae::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fgpvae::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fgpvae::NonFiniteError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const fgpvae::CholeskyError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
