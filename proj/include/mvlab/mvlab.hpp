#pragma once

#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/chaos.hpp"
#include "mvlab/drifts.hpp"
#include "mvlab/fbm.hpp"
#include "mvlab/metrics.hpp"
#include "mvlab/sde.hpp"
#include "mvlab/spde.hpp"
#include "mvlab/verify.hpp"
