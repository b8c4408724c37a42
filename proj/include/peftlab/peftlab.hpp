#pragma once

// Umbrella header.

#include "peftlab/autodiff.hpp"
#include "peftlab/budget.hpp"
#include "peftlab/data.hpp"
#include "peftlab/eval.hpp"
#include "peftlab/experiment.hpp"
#include "peftlab/model.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/special_tokens.hpp"
#include "peftlab/svg_plot.hpp"
#include "peftlab/train.hpp"
