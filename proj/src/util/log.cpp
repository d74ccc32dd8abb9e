#include "dyadflow/log.hpp"

#include <iostream>
#include <mutex>

#include "json.hpp"

namespace dyadflow::log {

namespace {

std::mutex g_mutex;

void stderr_sink(Level level, std::string_view message) {
  nlohmann::json line{{"level", level_name(level)}, {"msg", message}};
  std::cerr << line.dump() << '\n';
}

Sink& current() {
  static Sink sink = stderr_sink;
  return sink;
}

}  // namespace

Sink set_sink(Sink sink) {
  std::lock_guard lock(g_mutex);
  Sink old = std::move(current());
  current() = sink ? std::move(sink) : Sink(stderr_sink);
  return old;
}

void write(Level level, std::string_view message) {
  std::lock_guard lock(g_mutex);
  current()(level, message);
}

std::string_view level_name(Level level) {
  switch (level) {
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "info";
}

}  // namespace dyadflow::log
