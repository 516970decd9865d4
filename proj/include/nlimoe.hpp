#pragma once

#include "nlimoe/adam.hpp"
#include "nlimoe/checkpoint.hpp"
#include "nlimoe/commands.hpp"
#include "nlimoe/config.hpp"
#include "nlimoe/corpus.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/evaluate.hpp"
#include "nlimoe/gradcheck.hpp"
#include "nlimoe/metrics.hpp"
#include "nlimoe/model.hpp"
#include "nlimoe/moe.hpp"
#include "nlimoe/objectives.hpp"
#include "nlimoe/rng.hpp"
#include "nlimoe/stats.hpp"
#include "nlimoe/synth.hpp"
#include "nlimoe/tensor.hpp"
#include "nlimoe/trainer.hpp"
