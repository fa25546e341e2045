#pragma once

#include "snmm/blip.hpp"
#include "snmm/config.hpp"
#include "snmm/error.hpp"
#include "snmm/estimator.hpp"
#include "snmm/frame.hpp"
#include "snmm/gof.hpp"
#include "snmm/linmodels.hpp"
#include "snmm/nuisance.hpp"
#include "snmm/panel.hpp"
#include "snmm/report.hpp"
#include "snmm/sim.hpp"
#include "snmm/terms.hpp"
