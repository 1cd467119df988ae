#pragma once

#include "sdcl/error.hpp"
#include "sdcl/losses.hpp"
#include "sdcl/maskops.hpp"
#include "sdcl/metrics.hpp"
#include "sdcl/mixing.hpp"
#include "sdcl/nets.hpp"
#include "sdcl/optim.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/synthdata.hpp"
#include "sdcl/tensor.hpp"
#include "sdcl/trainer.hpp"
#include "sdcl/volume.hpp"
