#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <string_view>

#include "projprune/error.hpp"

namespace projprune {

// Shortest decimal string that round-trips; "inf", "-inf", "nan" for the
// non-finite values.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, std::string_view what) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    if (!s.empty() && *b == '+') ++b;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e) throw ParseError(std::string(what) + ": bad number '" + std::string(s) + "'");
    return v;
}

}  // namespace projprune
