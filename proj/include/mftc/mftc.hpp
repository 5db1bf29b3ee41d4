#pragma once

// Everything at once. Individual headers remain usable on their own.
#include "mftc/core.hpp"
#include "mftc/measure.hpp"
#include "mftc/model.hpp"
#include "mftc/constants.hpp"
#include "mftc/control.hpp"
#include "mftc/fbode.hpp"
#include "mftc/parallel.hpp"
#include "mftc/global.hpp"
#include "mftc/sensitivity.hpp"
#include "mftc/deriv_check.hpp"
#include "mftc/analysis.hpp"
#include "mftc/models/lq.hpp"
#include "mftc/models/nonlq.hpp"
