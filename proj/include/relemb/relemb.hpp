#pragma once

#include "relemb/common.hpp"
#include "relemb/corpus.hpp"
#include "relemb/encoder.hpp"
#include "relemb/evaluation.hpp"
#include "relemb/synth.hpp"
#include "relemb/tokenizer.hpp"
#include "relemb/training.hpp"
