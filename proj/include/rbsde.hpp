#pragma once

#include "rbsde/error.hpp"
#include "rbsde/linalg.hpp"
#include "rbsde/tree.hpp"
#include "rbsde/skorohod.hpp"
#include "rbsde/driver.hpp"
#include "rbsde/bsde.hpp"
#include "rbsde/reflected.hpp"
#include "rbsde/priors.hpp"
#include "rbsde/lp.hpp"
#include "rbsde/market.hpp"
