#pragma once

#include "snapcache/attention.hpp"
#include "snapcache/bench.hpp"
#include "snapcache/checkpoint.hpp"
#include "snapcache/config.hpp"
#include "snapcache/error.hpp"
#include "snapcache/metrics.hpp"
#include "snapcache/numerics.hpp"
#include "snapcache/oracle.hpp"
#include "snapcache/parallel.hpp"
#include "snapcache/rng.hpp"
#include "snapcache/snapkv.hpp"
#include "snapcache/synth.hpp"
#include "snapcache/tensor.hpp"
#include "snapcache/toymodel.hpp"
#include "snapcache/verify.hpp"
