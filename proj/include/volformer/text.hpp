#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Small strict parsers shared by the config, CSV and CLI readers. Each returns
// false instead of throwing so callers can attach file and line context.
namespace volformer::text {

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

bool parse_u64(std::string_view s, std::uint64_t& out);
bool parse_size(std::string_view s, std::size_t& out);
bool parse_double(std::string_view s, double& out);
bool parse_bool(std::string_view s, bool& out);

// "160x160" or "64x160x160".
bool parse_dims(std::string_view s, std::vector<std::size_t>& out);
std::string format_dims(const std::vector<std::size_t>& dims);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace volformer::text
