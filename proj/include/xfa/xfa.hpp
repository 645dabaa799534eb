#pragma once

#include "xfa/bma.hpp"
#include "xfa/estep.hpp"
#include "xfa/init.hpp"
#include "xfa/io.hpp"
#include "xfa/metrics.hpp"
#include "xfa/mstep.hpp"
#include "xfa/prior.hpp"
#include "xfa/simulator.hpp"
#include "xfa/types.hpp"

namespace xfa {

inline constexpr const char* version = "0.1.0";

} // namespace xfa
