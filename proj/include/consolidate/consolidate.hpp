#pragma once

#include "consolidate/calibration.hpp"
#include "consolidate/checkpoint.hpp"
#include "consolidate/error.hpp"
#include "consolidate/linalg.hpp"
#include "consolidate/merge.hpp"
#include "consolidate/merge/dispatch.hpp"
#include "consolidate/merge/operators.hpp"
#include "consolidate/merge/recipe.hpp"
#include "consolidate/network.hpp"
#include "consolidate/random.hpp"
#include "consolidate/task_vectors.hpp"
#include "consolidate/tensor.hpp"
#include "consolidate/testbed.hpp"
