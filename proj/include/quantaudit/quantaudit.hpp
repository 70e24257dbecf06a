#pragma once

#include "quantaudit/audit.hpp"
#include "quantaudit/error.hpp"
#include "quantaudit/evalset.hpp"
#include "quantaudit/parallel.hpp"
#include "quantaudit/quant.hpp"
#include "quantaudit/rng.hpp"
#include "quantaudit/schedules.hpp"
#include "quantaudit/stats.hpp"
#include "quantaudit/weightstore.hpp"

#include "quantaudit/toylab/adamw.hpp"
#include "quantaudit/toylab/corpus.hpp"
#include "quantaudit/toylab/evaluator.hpp"
#include "quantaudit/toylab/fork.hpp"
#include "quantaudit/toylab/tinylm.hpp"
#include "quantaudit/toylab/train.hpp"
