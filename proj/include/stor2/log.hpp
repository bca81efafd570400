#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string_view>

namespace stor2::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> level{Level::warn};
  return level;
}

inline void set_level(Level level) { threshold().store(level); }

template <class... Args>
void write(Level level, std::string_view tag, const Args&... args) {
  if (level < threshold().load()) return;
  std::ostringstream os;
  os << '[' << tag << "] ";
  (os << ... << args);
  os << '\n';
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::clog << os.str();
}

template <class... Args>
void debug(const Args&... args) { write(Level::debug, "debug", args...); }
template <class... Args>
void info(const Args&... args) { write(Level::info, "info", args...); }
template <class... Args>
void warn(const Args&... args) { write(Level::warn, "warn", args...); }

}  // namespace stor2::log
