#pragma once

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "eval.hpp"
#include "events.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "run_config.hpp"
#include "spiking.hpp"
#include "ssam.hpp"
#include "stfs.hpp"
#include "synthgen.hpp"
#include "tensor.hpp"
