#pragma once

/// Convenience umbrella: the whole library in one include.

#include "situ/glob.hpp"
#include "situ/datamodel.hpp"
#include "situ/config.hpp"
#include "situ/graph.hpp"
#include "situ/transport.hpp"
#include "situ/fabric.hpp"
#include "situ/report.hpp"
#include "situ/runtime.hpp"
#include "situ/harness.hpp"
