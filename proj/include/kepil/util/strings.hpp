#pragma once

#include <cstdint>
#include <string>

namespace kepil::util {

// Shortest text that parses back to the same double.
std::string format_double(double v);

// Strict parsers; the error message names `field` and the expected domain.
std::size_t parse_size(const std::string& field, const std::string& text);
std::uint64_t parse_u64(const std::string& field, const std::string& text);
double parse_double(const std::string& field, const std::string& text);
bool parse_bool(const std::string& field, const std::string& text);

} // namespace kepil::util
