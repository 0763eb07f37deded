#pragma once

#include "glstm/checkpoint.hpp"
#include "glstm/config.hpp"
#include "glstm/experiment.hpp"
#include "glstm/gradcheck.hpp"
#include "glstm/graph.hpp"
#include "glstm/model_config.hpp"
#include "glstm/models.hpp"
#include "glstm/ops.hpp"
#include "glstm/params.hpp"
#include "glstm/probes.hpp"
#include "glstm/report.hpp"
#include "glstm/rng.hpp"
#include "glstm/tasks.hpp"
#include "glstm/tensor.hpp"
#include "glstm/train.hpp"
