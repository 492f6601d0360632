#pragma once

// Everything except the experiment harness (which pulls in nlohmann/json).

#include "viper/bound.hpp"
#include "viper/datagen.hpp"
#include "viper/dataset.hpp"
#include "viper/errors.hpp"
#include "viper/marginal.hpp"
#include "viper/metrics.hpp"
#include "viper/specfun.hpp"
#include "viper/vbgp.hpp"
#include "viper/vblogit.hpp"
#include "viper/version.hpp"
