#include "vsdf/common/log.hpp"

#include <atomic>
#include <iostream>

namespace vsdf::log {

namespace {
std::atomic<Level> g_level{Level::warn};
}

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void warn(const std::string& msg) {
  if (g_level >= Level::warn) std::cerr << "warning: " << msg << '\n';
}

void info(const std::string& msg) {
  if (g_level >= Level::info) std::cerr << msg << '\n';
}

}  // namespace vsdf::log
