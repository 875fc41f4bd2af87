#pragma once

// Umbrella header for the library surface. The CLI driver lives apart in
// kercnn/cli.hpp because it drags in the flag-parsing dependency.

#include "kercnn/tensor.hpp"
#include "kercnn/tape.hpp"
#include "kercnn/ops.hpp"
#include "kercnn/lateral.hpp"
#include "kercnn/models.hpp"
#include "kercnn/data.hpp"
#include "kercnn/synth.hpp"
#include "kercnn/corruptions.hpp"
#include "kercnn/trainer.hpp"
#include "kercnn/sweep.hpp"
