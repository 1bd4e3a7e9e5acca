#pragma once

#include "mjp/bench.hpp"
#include "mjp/bytes.hpp"
#include "mjp/config.hpp"
#include "mjp/data.hpp"
#include "mjp/error.hpp"
#include "mjp/features.hpp"
#include "mjp/geometry.hpp"
#include "mjp/losses.hpp"
#include "mjp/parallel.hpp"
#include "mjp/pipeline.hpp"
#include "mjp/point_cloud.hpp"
#include "mjp/predictor.hpp"
#include "mjp/projection.hpp"
#include "mjp/pruning.hpp"
#include "mjp/rng.hpp"
#include "mjp/taskproxy.hpp"
#include "mjp/viz.hpp"
#include "mjp/voxelgrid.hpp"
