#pragma once

// Numerical core. Run-directory I/O (io.hpp, ablation.hpp, commands.hpp)
// additionally needs OpenSSL's libcrypto and is included separately.

#include "pgl/autodiff.hpp"
#include "pgl/config.hpp"
#include "pgl/data.hpp"
#include "pgl/experiment.hpp"
#include "pgl/guidance.hpp"
#include "pgl/metrics.hpp"
#include "pgl/models.hpp"
#include "pgl/ops.hpp"
#include "pgl/rng.hpp"
#include "pgl/synthesis.hpp"
#include "pgl/tape.hpp"
#include "pgl/tensor.hpp"
#include "pgl/trainer.hpp"
