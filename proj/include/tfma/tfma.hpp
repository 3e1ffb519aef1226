#pragma once

#include "tfma/backbone.hpp"
#include "tfma/checkpoint.hpp"
#include "tfma/error.hpp"
#include "tfma/evaluate.hpp"
#include "tfma/flow.hpp"
#include "tfma/image.hpp"
#include "tfma/losses.hpp"
#include "tfma/maskattn.hpp"
#include "tfma/metaembed.hpp"
#include "tfma/model.hpp"
#include "tfma/openset.hpp"
#include "tfma/ops.hpp"
#include "tfma/rng.hpp"
#include "tfma/sgd.hpp"
#include "tfma/synthdata.hpp"
#include "tfma/tape.hpp"
#include "tfma/tensor.hpp"
#include "tfma/train.hpp"
