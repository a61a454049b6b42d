#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>

namespace protofed {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Argument errors -> std::invalid_argument, state errors -> std::runtime_error.
inline void require_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_state(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

inline constexpr double kInfEpsilon = std::numeric_limits<double>::infinity();

namespace log {

enum class Level : int { error = 0, warn = 1, info = 2, debug = 3 };

// Verbosity from PROTOFED_LOG (error|warn|info|debug); default warn.
inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("PROTOFED_LOG");
    if (!env) return Level::warn;
    std::string s(env);
    if (s == "error") return Level::error;
    if (s == "info") return Level::info;
    if (s == "debug") return Level::debug;
    return Level::warn;
  }();
  return lvl;
}

inline void emit(Level lvl, const char* tag, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(level()))
    std::cerr << "[" << tag << "] " << msg << "\n";
}

inline void error(const std::string& msg) { emit(Level::error, "error", msg); }
inline void warn(const std::string& msg) { emit(Level::warn, "warn", msg); }
inline void info(const std::string& msg) { emit(Level::info, "info", msg); }
inline void debug(const std::string& msg) { emit(Level::debug, "debug", msg); }

}  // namespace log

}  // namespace protofed
