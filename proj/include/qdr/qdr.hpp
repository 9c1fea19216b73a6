#pragma once

#include "qdr/tensor.hpp"
#include "qdr/rng.hpp"
#include "qdr/quantsim.hpp"
#include "qdr/nn.hpp"
#include "qdr/efm.hpp"
#include "qdr/metrics.hpp"
#include "qdr/losses.hpp"
#include "qdr/dfd.hpp"
#include "qdr/lmr.hpp"
#include "qdr/optim.hpp"
#include "qdr/degrade.hpp"
#include "qdr/image_io.hpp"
#include "qdr/config.hpp"
#include "qdr/archive.hpp"
#include "qdr/trainer.hpp"
