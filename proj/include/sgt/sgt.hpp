#pragma once

#include "sgt/analytics.hpp"
#include "sgt/backend.hpp"
#include "sgt/bench_io.hpp"
#include "sgt/common.hpp"
#include "sgt/dpo_builder.hpp"
#include "sgt/http_backend.hpp"
#include "sgt/journal.hpp"
#include "sgt/mock_backend.hpp"
#include "sgt/pipeline.hpp"
#include "sgt/reward.hpp"
#include "sgt/sampling.hpp"
#include "sgt/sft_builder.hpp"
#include "sgt/stratify.hpp"
#include "sgt/subprocess.hpp"
#include "sgt/supplement.hpp"
#include "sgt/task.hpp"
#include "sgt/trainer.hpp"
