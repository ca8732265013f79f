#pragma once

#include "setdet/attention.hpp"
#include "setdet/benign_space.hpp"
#include "setdet/container.hpp"
#include "setdet/errors.hpp"
#include "setdet/eval.hpp"
#include "setdet/features.hpp"
#include "setdet/matrix.hpp"
#include "setdet/metrics.hpp"
#include "setdet/model_config.hpp"
#include "setdet/probe.hpp"
#include "setdet/random.hpp"
#include "setdet/theory.hpp"
#include "setdet/toy_model.hpp"
