#pragma once

#ifndef VIPER_VERSION
#define VIPER_VERSION "0.3.0"
#endif

namespace viper {

inline constexpr const char* kVersion = VIPER_VERSION;

}  // namespace viper
