#pragma once

#include "metasoft/autodiff.hpp"
#include "metasoft/backbone.hpp"
#include "metasoft/baselines.hpp"
#include "metasoft/bench.hpp"
#include "metasoft/checkpoint.hpp"
#include "metasoft/config.hpp"
#include "metasoft/consolidate.hpp"
#include "metasoft/corpus.hpp"
#include "metasoft/metalib.hpp"
#include "metasoft/numerics.hpp"
#include "metasoft/pipeline.hpp"
#include "metasoft/pretrain.hpp"
#include "metasoft/probe.hpp"
#include "metasoft/train.hpp"
