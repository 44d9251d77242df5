// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"
#include "fxq/inference.hpp"
#include "fxq/io.hpp"
#include "fxq/metrics.hpp"
#include "fxq/model.hpp"
#include "fxq/plan.hpp"
#include "fxq/quantizer.hpp"
#include "fxq/search.hpp"
#include "fxq/tensor.hpp"
