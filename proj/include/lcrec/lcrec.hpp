#pragma once

#include "lcrec/errors.hpp"
#include "lcrec/rng.hpp"
#include "lcrec/distributions.hpp"
#include "lcrec/csv.hpp"
#include "lcrec/simcohort.hpp"
#include "lcrec/riskset.hpp"
#include "lcrec/impute.hpp"
#include "lcrec/coxfrailty.hpp"
#include "lcrec/pool_eval.hpp"
#include "lcrec/config.hpp"
#include "lcrec/svg.hpp"
