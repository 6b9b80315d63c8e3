#pragma once

#include "dynameta/common.hpp"
#include "dynameta/envs.hpp"
#include "dynameta/nn.hpp"
#include "dynameta/dqn_agent.hpp"
#include "dynameta/world_model.hpp"
#include "dynameta/dyna_loop.hpp"
#include "dynameta/meta.hpp"
#include "dynameta/parallel.hpp"
#include "dynameta/harness.hpp"
