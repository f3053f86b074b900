#pragma once

#include "arbiter/conduit.hpp"
#include "arbiter/core_model.hpp"
#include "arbiter/greedy_allocator.hpp"
#include "arbiter/oracle.hpp"
#include "arbiter/parallel_arch.hpp"
#include "arbiter/permutation.hpp"
#include "arbiter/pipeline_arch.hpp"
#include "arbiter/report.hpp"
#include "arbiter/run.hpp"
#include "arbiter/run_support.hpp"
#include "arbiter/shuffle_arch.hpp"
#include "arbiter/stress.hpp"
#include "arbiter/workload.hpp"
