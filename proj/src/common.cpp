#include "ctflow/common.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace ctf {

int num_workers() {
  const char* env = std::getenv("CTF_NUM_WORKERS");
  if (env == nullptr) return 1;
  int n = std::atoi(env);
  return n > 0 ? n : 1;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  pool.reserve(count);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {
bool g_quiet = false;
bool g_json = false;
std::mutex g_log_mutex;

void emit(const char* level, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  if (g_json) {
    std::string escaped;
    escaped.reserve(msg.size());
    for (char c : msg) {
      if (c == '"' || c == '\\') escaped += '\\';
      if (c == '\n') {
        escaped += "\\n";
        continue;
      }
      escaped += c;
    }
    std::cerr << "{\"level\":\"" << level << "\",\"msg\":\"" << escaped << "\"}\n";
  } else {
    std::cerr << "[" << level << "] " << msg << "\n";
  }
}
}  // namespace

void set_log_quiet(bool quiet) { g_quiet = quiet; }
void set_log_json(bool json) { g_json = json; }

void log_info(const std::string& msg) {
  if (!g_quiet) emit("info", msg);
}

void log_warn(const std::string& msg) { emit("warn", msg); }

}  // namespace ctf
