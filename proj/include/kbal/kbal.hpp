#pragma once

#include "kbal/balance.hpp"
#include "kbal/baselines.hpp"
#include "kbal/benchmark.hpp"
#include "kbal/common.hpp"
#include "kbal/dataset.hpp"
#include "kbal/estimate.hpp"
#include "kbal/kernel.hpp"
#include "kbal/report.hpp"
#include "kbal/sim.hpp"
#include "kbal/spectral.hpp"
