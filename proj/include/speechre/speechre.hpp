#pragma once

// Umbrella header: the full speech relation extraction toolkit.

#include "speechre/audio.hpp"
#include "speechre/autodiff.hpp"
#include "speechre/backbone.hpp"
#include "speechre/checkpoint.hpp"
#include "speechre/cli.hpp"
#include "speechre/codec.hpp"
#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/ensemble.hpp"
#include "speechre/evaluation.hpp"
#include "speechre/features.hpp"
#include "speechre/fft.hpp"
#include "speechre/lrph.hpp"
#include "speechre/optim.hpp"
#include "speechre/rng.hpp"
#include "speechre/schema.hpp"
#include "speechre/tensor.hpp"
#include "speechre/toy_corpus.hpp"
#include "speechre/trainer.hpp"
#include "speechre/vocab.hpp"
