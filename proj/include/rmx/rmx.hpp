#pragma once

#include "rmx/error.hpp"
#include "rmx/util.hpp"
#include "rmx/cohort.hpp"
#include "rmx/riskmodels.hpp"
#include "rmx/survival.hpp"
#include "rmx/subgroups.hpp"
#include "rmx/fairness.hpp"
#include "rmx/explain.hpp"
#include "rmx/synth.hpp"
#include "rmx/engine.hpp"
