// Trains a small model on a handful of digits and prints held-out and
// extrapolation MSE.
//
//   fgpvae_sample [mnist_dir] [epochs]

#include <iostream>
#include <string>

#include "fgpvae/fgpvae.hpp"

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : "data/mnist";
  fgpvae::TrainConfig cfg;
  cfg.num_digits = 20;
  cfg.epochs = argc > 2 ? std::stoi(argv[2]) : 20;

  const auto raws = fgpvae::load_idx(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
  const auto ds = fgpvae::build_rotated_dataset(raws, cfg.build_options());

  fgpvae::TrainHooks hooks;
  hooks.on_epoch = [](const fgpvae::EpochMetrics& m, const fgpvae::ModelParams&) {
    std::cout << "epoch " << m.epoch << "  elbo " << m.elbo << "  mse " << m.mse << "\n";
  };
  const auto result = fgpvae::train(ds, cfg, hooks);

  const fgpvae::Model model(result.params.config);
  std::cout << "held-out angle MSE  " << fgpvae::evaluate(model, result.params, ds) << "\n"
            << "extrapolation MSE   "
            << fgpvae::extrapolate_eval(model, result.params, ds, cfg.context_images, cfg.seed) << "\n";
}
