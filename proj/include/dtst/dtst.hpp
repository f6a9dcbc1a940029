#pragma once

// Umbrella header.

#include "dtst/error.hpp"
#include "dtst/tensor.hpp"
#include "dtst/optim.hpp"
#include "dtst/rng.hpp"
#include "dtst/backbone.hpp"
#include "dtst/selector.hpp"
#include "dtst/model.hpp"
#include "dtst/objectives.hpp"
#include "dtst/base64.hpp"
#include "dtst/data.hpp"
#include "dtst/retrieval.hpp"
#include "dtst/train.hpp"
#include "dtst/config.hpp"
#include "dtst/checkpoint.hpp"
#include "dtst/experiment.hpp"
