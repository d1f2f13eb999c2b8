#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace gdkvm {

// Shortest round-trip decimal form; "nan", "inf", "-inf" for non-finite.
std::string format_number(double v);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace gdkvm
