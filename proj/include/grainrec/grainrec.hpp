// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grainrec/ablation.hpp"
#include "grainrec/checkpoint.hpp"
#include "grainrec/config.hpp"
#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"
#include "grainrec/evaluate.hpp"
#include "grainrec/knn.hpp"
#include "grainrec/metrics.hpp"
#include "grainrec/model.hpp"
#include "grainrec/numerics/matrix.hpp"
#include "grainrec/numerics/ops.hpp"
#include "grainrec/numerics/param_store.hpp"
#include "grainrec/numerics/tape.hpp"
#include "grainrec/server.hpp"
#include "grainrec/serving.hpp"
#include "grainrec/sessiongraph.hpp"
#include "grainrec/synthetic.hpp"
#include "grainrec/training.hpp"
