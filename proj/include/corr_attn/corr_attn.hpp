#pragma once

#include "corr_attn/classifier.hpp"
#include "corr_attn/dataset.hpp"
#include "corr_attn/error.hpp"
#include "corr_attn/eval_file.hpp"
#include "corr_attn/json_io.hpp"
#include "corr_attn/session.hpp"
#include "corr_attn/stats.hpp"
#include "corr_attn/study.hpp"
#include "corr_attn/vector_math.hpp"
