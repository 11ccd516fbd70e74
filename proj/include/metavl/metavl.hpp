#pragma once

// Everything in one include.

#include "metavl/checkpoint.hpp"
#include "metavl/config.hpp"
#include "metavl/decode.hpp"
#include "metavl/errors.hpp"
#include "metavl/experiment.hpp"
#include "metavl/harness.hpp"
#include "metavl/optim.hpp"
#include "metavl/prompt.hpp"
#include "metavl/rng.hpp"
#include "metavl/scene.hpp"
#include "metavl/tasks.hpp"
#include "metavl/tensor.hpp"
#include "metavl/training.hpp"
#include "metavl/transformer.hpp"
#include "metavl/visual.hpp"
#include "metavl/vocab.hpp"
