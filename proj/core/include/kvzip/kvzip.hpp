#pragma once

#include "kvzip/config.hpp"
#include "kvzip/errors.hpp"
#include "kvzip/eval.hpp"
#include "kvzip/eviction.hpp"
#include "kvzip/flops.hpp"
#include "kvzip/forward.hpp"
#include "kvzip/io.hpp"
#include "kvzip/kv_cache.hpp"
#include "kvzip/model.hpp"
#include "kvzip/rng.hpp"
#include "kvzip/scoring.hpp"
#include "kvzip/tasks.hpp"
#include "kvzip/train.hpp"
