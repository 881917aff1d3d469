// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ringattn/attention.hpp"
#include "ringattn/config.hpp"
#include "ringattn/ffn.hpp"
#include "ringattn/perf_model.hpp"
#include "ringattn/ring.hpp"
#include "ringattn/tensor.hpp"
#include "ringattn/verification.hpp"
