#pragma once

#include "heatbem/assembly.hpp"
#include "heatbem/bench.hpp"
#include "heatbem/clustering.hpp"
#include "heatbem/error.hpp"
#include "heatbem/kernels.hpp"
#include "heatbem/lowrank.hpp"
#include "heatbem/mesh.hpp"
#include "heatbem/quadrature.hpp"
#include "heatbem/solver.hpp"
#include "heatbem/temporal.hpp"
