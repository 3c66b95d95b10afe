// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctkd/align.hpp"
#include "ctkd/audit.hpp"
#include "ctkd/chunks.hpp"
#include "ctkd/error.hpp"
#include "ctkd/gradcheck.hpp"
#include "ctkd/hash.hpp"
#include "ctkd/losses.hpp"
#include "ctkd/projection.hpp"
#include "ctkd/training.hpp"
#include "ctkd/vocab.hpp"
