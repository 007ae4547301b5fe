#pragma once

#include "wscl/buffer.hpp"
#include "wscl/config.hpp"
#include "wscl/dataset.hpp"
#include "wscl/errors.hpp"
#include "wscl/gradcheck.hpp"
#include "wscl/learners.hpp"
#include "wscl/losses.hpp"
#include "wscl/metrics.hpp"
#include "wscl/network.hpp"
#include "wscl/optimizer.hpp"
#include "wscl/random.hpp"
#include "wscl/runner.hpp"
#include "wscl/stream.hpp"
#include "wscl/tensor.hpp"
