#pragma once

// Umbrella header for the dual-path distillation segmentation toolkit.

#include "segkd/arch.hpp"
#include "segkd/autograd.hpp"
#include "segkd/complexity.hpp"
#include "segkd/config.hpp"
#include "segkd/data.hpp"
#include "segkd/errors.hpp"
#include "segkd/layers.hpp"
#include "segkd/losses.hpp"
#include "segkd/metrics.hpp"
#include "segkd/models.hpp"
#include "segkd/ops.hpp"
#include "segkd/rng.hpp"
#include "segkd/tensor.hpp"
#include "segkd/train.hpp"
