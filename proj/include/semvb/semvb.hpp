#pragma once

#include "semvb/common.hpp"
#include "semvb/diagnostics.hpp"
#include "semvb/distributions.hpp"
#include "semvb/gibbs.hpp"
#include "semvb/intervals.hpp"
#include "semvb/mfvb.hpp"
#include "semvb/model.hpp"
#include "semvb/parallel.hpp"
#include "semvb/random.hpp"
#include "semvb/resample.hpp"
#include "semvb/studies.hpp"
