#pragma once

#include "dverge/attacks.hpp"
#include "dverge/data_io.hpp"
#include "dverge/distill.hpp"
#include "dverge/diversity.hpp"
#include "dverge/eval_harness.hpp"
#include "dverge/graph.hpp"
#include "dverge/models.hpp"
#include "dverge/optim.hpp"
#include "dverge/parallel.hpp"
#include "dverge/rng.hpp"
#include "dverge/tensor.hpp"
#include "dverge/training.hpp"
