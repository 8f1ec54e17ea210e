#pragma once

#include "dualgrpo/adam.hpp"
#include "dualgrpo/autodiff.hpp"
#include "dualgrpo/checkpoint.hpp"
#include "dualgrpo/config.hpp"
#include "dualgrpo/flow_decoder.hpp"
#include "dualgrpo/jsonl.hpp"
#include "dualgrpo/parallel.hpp"
#include "dualgrpo/pipeline.hpp"
#include "dualgrpo/plot.hpp"
#include "dualgrpo/random.hpp"
#include "dualgrpo/reward_env.hpp"
#include "dualgrpo/rewriter.hpp"
#include "dualgrpo/rollout.hpp"
#include "dualgrpo/sft.hpp"
#include "dualgrpo/tensor.hpp"
#include "dualgrpo/trainer.hpp"
#include "dualgrpo/vocab.hpp"
