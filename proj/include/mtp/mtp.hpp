#pragma once

#include "mtp/batching.hpp"
#include "mtp/decoding.hpp"
#include "mtp/losses.hpp"
#include "mtp/model/config.hpp"
#include "mtp/model/model.hpp"
#include "mtp/numerics/attention_mask.hpp"
#include "mtp/numerics/gradcheck.hpp"
#include "mtp/numerics/ops.hpp"
#include "mtp/numerics/rng.hpp"
#include "mtp/numerics/tensor.hpp"
#include "mtp/sampler.hpp"
#include "mtp/training/adamw.hpp"
#include "mtp/training/checkpoint.hpp"
#include "mtp/training/corpus.hpp"
#include "mtp/training/trainer.hpp"
