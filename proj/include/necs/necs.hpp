#pragma once

// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#include "necs/calibration.hpp"
#include "necs/cli.hpp"
#include "necs/conformal.hpp"
#include "necs/corpus.hpp"
#include "necs/datastore.hpp"
#include "necs/decoding.hpp"
#include "necs/evaluation.hpp"
#include "necs/hallucination.hpp"
#include "necs/models.hpp"
#include "necs/parallel.hpp"
#include "necs/report_io.hpp"
#include "necs/synthetic.hpp"
