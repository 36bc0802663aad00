#pragma once

// Umbrella header: the full library except the CLI layer (include
// deltavit/cli.hpp separately when building a command-line tool).

#include "deltavit/common.hpp"
#include "deltavit/tensor.hpp"
#include "deltavit/tape.hpp"
#include "deltavit/ops.hpp"
#include "deltavit/encoder.hpp"
#include "deltavit/classifier.hpp"
#include "deltavit/protocol.hpp"
#include "deltavit/synthetic.hpp"
#include "deltavit/trainer.hpp"
#include "deltavit/checkpoint.hpp"
#include "deltavit/experiment.hpp"
