#pragma once

#include "fgpvae/errors.hpp"
#include "fgpvae/gp.hpp"
#include "fgpvae/posterior.hpp"
#include "fgpvae/nets.hpp"
#include "fgpvae/io.hpp"
#include "fgpvae/data.hpp"
#include "fgpvae/model.hpp"
#include "fgpvae/checkpoint.hpp"
#include "fgpvae/training.hpp"

namespace fgpvae {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace fgpvae
