#include "amecam/log.hpp"

#include <atomic>
#include <iostream>

namespace amecam {

namespace {
std::atomic<LogLevel> g_level{LogLevel::Info};
}

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_info(std::string_view msg) {
  if (g_level.load() <= LogLevel::Info) std::cerr << "[info] " << msg << "\n";
}

void log_warn(std::string_view msg) {
  if (g_level.load() <= LogLevel::Warn) std::cerr << "[warn] " << msg << "\n";
}

}  // namespace amecam
