// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include "coda/autograd.hpp"
#include "coda/config.hpp"
#include "coda/data.hpp"
#include "coda/grad_check.hpp"
#include "coda/grad_suite.hpp"
#include "coda/harness.hpp"
#include "coda/head.hpp"
#include "coda/optim.hpp"
#include "coda/pretrain.hpp"
#include "coda/prompt.hpp"
#include "coda/random.hpp"
#include "coda/serialize.hpp"
#include "coda/tensor.hpp"
#include "coda/vit.hpp"
