#pragma once

#include "mgavqa/compression.hpp"
#include "mgavqa/errors.hpp"
#include "mgavqa/eval.hpp"
#include "mgavqa/fusion.hpp"
#include "mgavqa/graph.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/memory.hpp"
#include "mgavqa/numerics.hpp"
#include "mgavqa/pipeline.hpp"
#include "mgavqa/rng.hpp"
#include "mgavqa/synthgen.hpp"
