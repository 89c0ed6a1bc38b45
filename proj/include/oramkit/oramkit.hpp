#pragma once

#include "oramkit/analysis.hpp"
#include "oramkit/core.hpp"
#include "oramkit/cuckoo.hpp"
#include "oramkit/hier_oram.hpp"
#include "oramkit/obliv_sort.hpp"
#include "oramkit/oram.hpp"
#include "oramkit/pipeline.hpp"
#include "oramkit/sqrt_oram.hpp"
#include "oramkit/storage.hpp"
#include "oramkit/wire.hpp"
#include "oramkit/workload.hpp"
