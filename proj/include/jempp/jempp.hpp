#pragma once

#include "jempp/tensor.hpp"
#include "jempp/rng.hpp"
#include "jempp/network.hpp"
#include "jempp/energy.hpp"
#include "jempp/sampler.hpp"
#include "jempp/data.hpp"
#include "jempp/init.hpp"
#include "jempp/buffer.hpp"
#include "jempp/eval.hpp"
#include "jempp/trainer.hpp"
#include "jempp/checkpoint.hpp"
#include "jempp/config.hpp"
#include "jempp/experiment.hpp"
