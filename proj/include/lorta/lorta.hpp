#pragma once

#include "lorta/adapters.hpp"
#include "lorta/bench.hpp"
#include "lorta/checkpoint.hpp"
#include "lorta/config.hpp"
#include "lorta/cp.hpp"
#include "lorta/decompose.hpp"
#include "lorta/error.hpp"
#include "lorta/matrix_csv.hpp"
#include "lorta/rng.hpp"
#include "lorta/tensor.hpp"
#include "lorta/training.hpp"
#include "lorta/transformer.hpp"

namespace lorta {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace lorta
