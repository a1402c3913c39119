// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fada/config.hpp"
#include "fada/diffusion.hpp"
#include "fada/distill.hpp"
#include "fada/errors.hpp"
#include "fada/eval.hpp"
#include "fada/io.hpp"
#include "fada/net.hpp"
#include "fada/pipeline.hpp"
#include "fada/rng.hpp"
#include "fada/schedule.hpp"
#include "fada/synthdata.hpp"
