#pragma once

#include "spansr/config.hpp"
#include "spansr/dataset.hpp"
#include "spansr/gradcheck.hpp"
#include "spansr/image_io.hpp"
#include "spansr/metrics.hpp"
#include "spansr/model.hpp"
#include "spansr/nn_ops.hpp"
#include "spansr/resample.hpp"
#include "spansr/rng.hpp"
#include "spansr/tensor.hpp"
#include "spansr/train.hpp"
#include "spansr/weights.hpp"
