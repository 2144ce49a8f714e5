#pragma once
// Minimal leveled logging to stderr. The CLI raises or lowers the level.

#include <string>

namespace vsdf::log {

enum class Level { quiet = 0, warn = 1, info = 2 };

void set_level(Level level);
Level level();

void warn(const std::string& msg);
void info(const std::string& msg);

}  // namespace vsdf::log
