#include "kepil/util/strings.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>

#include "kepil/errors.hpp"

namespace kepil::util {

std::string format_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

std::uint64_t parse_u64(const std::string& field, const std::string& text) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
        throw ValidationError(field + ": expected a nonnegative integer, got '" + text + "'");
    return v;
}

std::size_t parse_size(const std::string& field, const std::string& text) {
    return static_cast<std::size_t>(parse_u64(field, text));
}

double parse_double(const std::string& field, const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v))
        throw ValidationError(field + ": expected a finite number, got '" + text + "'");
    return v;
}

bool parse_bool(const std::string& field, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ValidationError(field + ": expected true or false, got '" + text + "'");
}

} // namespace kepil::util
