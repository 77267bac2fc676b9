#pragma once

#include "vcforest/config.hpp"
#include "vcforest/data.hpp"
#include "vcforest/errors.hpp"
#include "vcforest/forest.hpp"
#include "vcforest/inference.hpp"
#include "vcforest/linalg.hpp"
#include "vcforest/model_io.hpp"
#include "vcforest/simulation.hpp"
#include "vcforest/stats.hpp"
#include "vcforest/tree.hpp"
