#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <string>

namespace stg {

enum class LogLevel { error = 0, info = 1, debug = 2 };

namespace detail {
inline LogLevel& log_level() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("STG_LOG");
        if (!e) return LogLevel::error;
        if (std::strcmp(e, "debug") == 0) return LogLevel::debug;
        if (std::strcmp(e, "info") == 0) return LogLevel::info;
        return LogLevel::error;
    }();
    return lvl;
}
inline std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

inline void set_log_level(LogLevel lvl) { detail::log_level() = lvl; }

template <typename... Args>
void log_at(LogLevel lvl, const char* fmt, Args... args) {
    if (lvl > detail::log_level()) return;
    std::lock_guard<std::mutex> lock(detail::log_mutex());
    const char* tag = lvl == LogLevel::error ? "E" : lvl == LogLevel::info ? "I" : "D";
    std::fprintf(stderr, "[%s] ", tag);
    if constexpr (sizeof...(args) == 0)
        std::fputs(fmt, stderr);
    else
        std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

#define STG_ERROR(...) ::stg::log_at(::stg::LogLevel::error, __VA_ARGS__)
#define STG_INFO(...) ::stg::log_at(::stg::LogLevel::info, __VA_ARGS__)
#define STG_DEBUG(...) ::stg::log_at(::stg::LogLevel::debug, __VA_ARGS__)

}  // namespace stg
