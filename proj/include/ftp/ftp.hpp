#pragma once

#include "ftp/core.hpp"
#include "ftp/datagen.hpp"
#include "ftp/ingest.hpp"
#include "ftp/learners.hpp"
#include "ftp/metrics.hpp"
#include "ftp/nn/checkpoint.hpp"
#include "ftp/nn/grad_check.hpp"
#include "ftp/nn/network.hpp"
#include "ftp/pipelines.hpp"
#include "ftp/sim.hpp"
