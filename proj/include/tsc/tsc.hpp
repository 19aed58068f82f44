// SPDX-License-Identifier: Apache-2.0
// Convenience header pulling in the whole library.
#pragma once

#include "tsc/architecture.hpp"
#include "tsc/autodiff.hpp"
#include "tsc/complexity.hpp"
#include "tsc/controllers.hpp"
#include "tsc/data.hpp"
#include "tsc/diagnostics.hpp"
#include "tsc/gradcheck.hpp"
#include "tsc/network.hpp"
#include "tsc/ode.hpp"
#include "tsc/optim.hpp"
#include "tsc/rng.hpp"
#include "tsc/serialization.hpp"
#include "tsc/stability.hpp"
#include "tsc/tensor.hpp"
#include "tsc/train.hpp"
