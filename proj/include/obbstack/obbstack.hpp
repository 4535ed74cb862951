#pragma once

#include "obbstack/clustering.hpp"
#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/eval.hpp"
#include "obbstack/fusion.hpp"
#include "obbstack/geometry.hpp"
#include "obbstack/hash.hpp"
#include "obbstack/ingest.hpp"
#include "obbstack/metalearner.hpp"
#include "obbstack/parallel.hpp"
#include "obbstack/pipeline.hpp"
#include "obbstack/synth.hpp"
