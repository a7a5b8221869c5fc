#pragma once

#include <string_view>

namespace amecam {

enum class LogLevel { Debug, Info, Warn, Error, Off };

void set_log_level(LogLevel level);
LogLevel log_level();

void log_info(std::string_view msg);
void log_warn(std::string_view msg);

}  // namespace amecam
