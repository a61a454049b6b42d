#pragma once

// Umbrella header for the ProtoFed-SP simulator library.

#include "protofed/alignment.hpp"
#include "protofed/backbone.hpp"
#include "protofed/commands.hpp"
#include "protofed/config.hpp"
#include "protofed/encoder.hpp"
#include "protofed/metrics.hpp"
#include "protofed/orchestrator.hpp"
#include "protofed/privacy.hpp"
#include "protofed/prompt.hpp"
#include "protofed/rng.hpp"
#include "protofed/routing.hpp"
#include "protofed/server.hpp"
#include "protofed/theory.hpp"
#include "protofed/types.hpp"
#include "protofed/world.hpp"
