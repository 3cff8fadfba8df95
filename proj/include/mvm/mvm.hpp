#pragma once

#include "mvm/assembler.hpp"
#include "mvm/bench.hpp"
#include "mvm/image.hpp"
#include "mvm/instrument.hpp"
#include "mvm/isa.hpp"
#include "mvm/loops.hpp"
#include "mvm/node.hpp"
#include "mvm/program_codec.hpp"
#include "mvm/verifier.hpp"
#include "mvm/vm.hpp"
#include "mvm/wire.hpp"
