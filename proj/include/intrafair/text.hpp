#pragma once

#include <optional>
#include <string>
#include <vector>

namespace intrafair {

/// Splits one CSV record. Supports double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line);
std::string trim(std::string s);
/// Whole-string parse; nullopt on any trailing characters.
std::optional<double> parse_double(const std::string& s);
/// Shortest representation that round-trips exactly.
std::string format_double(double v);

}  // namespace intrafair
