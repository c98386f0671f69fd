#pragma once

#include "lpbert/common.hpp"
#include "lpbert/kg.hpp"
#include "lpbert/text.hpp"
#include "lpbert/sampler.hpp"
#include "lpbert/encoder.hpp"
#include "lpbert/optim.hpp"
#include "lpbert/pretrain.hpp"
#include "lpbert/finetune.hpp"
#include "lpbert/evaluator.hpp"
#include "lpbert/config.hpp"
#include "lpbert/manifest.hpp"
