#pragma once

#include "softmanifold/common.hpp"
#include "softmanifold/conductivity.hpp"
#include "softmanifold/embedding.hpp"
#include "softmanifold/evaluation.hpp"
#include "softmanifold/feature_matrix.hpp"
#include "softmanifold/fluid_graph.hpp"
#include "softmanifold/geodesic.hpp"
#include "softmanifold/manifold.hpp"
#include "softmanifold/neighborhoods.hpp"
#include "softmanifold/rng.hpp"
