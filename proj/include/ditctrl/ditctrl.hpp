#pragma once

// Umbrella header.
#include "ditctrl/attention_control.hpp"
#include "ditctrl/blending.hpp"
#include "ditctrl/config.hpp"
#include "ditctrl/error.hpp"
#include "ditctrl/latent.hpp"
#include "ditctrl/manifest.hpp"
#include "ditctrl/metrics.hpp"
#include "ditctrl/model.hpp"
#include "ditctrl/parallel.hpp"
#include "ditctrl/pipeline.hpp"
#include "ditctrl/rng.hpp"
#include "ditctrl/tensor.hpp"
#include "ditctrl/tensor_io.hpp"
