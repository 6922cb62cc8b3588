#pragma once

#include "mugstan/attention.hpp"
#include "mugstan/checkpoint.hpp"
#include "mugstan/config.hpp"
#include "mugstan/diagnostics.hpp"
#include "mugstan/embedding_io.hpp"
#include "mugstan/encoders.hpp"
#include "mugstan/gradcheck.hpp"
#include "mugstan/harness.hpp"
#include "mugstan/layers.hpp"
#include "mugstan/model.hpp"
#include "mugstan/mug.hpp"
#include "mugstan/objectives.hpp"
#include "mugstan/ops.hpp"
#include "mugstan/optim.hpp"
#include "mugstan/report.hpp"
#include "mugstan/retrieval.hpp"
#include "mugstan/rng.hpp"
#include "mugstan/stan.hpp"
#include "mugstan/synth.hpp"
#include "mugstan/tensor.hpp"
