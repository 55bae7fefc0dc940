#pragma once

#include "smeood/error.hpp"
#include "smeood/dataformat.hpp"
#include "smeood/scoring.hpp"
#include "smeood/metrics.hpp"
#include "smeood/losses.hpp"
#include "smeood/rng.hpp"
#include "smeood/synthbench.hpp"
#include "smeood/model.hpp"
#include "smeood/objective.hpp"
#include "smeood/gradcheck.hpp"
#include "smeood/trainer.hpp"
