#include "volformer/text.hpp"

#include <charconv>
#include <cmath>

#include "volformer/error.hpp"
#include "volformer/view.hpp"

namespace volformer {

std::string_view view_name(View v) {
  switch (v) {
    case View::sag:
      return "sag";
    case View::cor:
      return "cor";
    case View::ax:
      return "ax";
  }
  return "?";
}

View parse_view(std::string_view text) {
  for (View v : kAllViews)
    if (view_name(v) == text) return v;
  throw ConfigError("unknown view '" + std::string(text) + "' (expected sag, cor or ax)");
}

}  // namespace volformer

namespace volformer::text {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_u64(std::string_view s, std::uint64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

bool parse_size(std::string_view s, std::size_t& out) {
  std::uint64_t v;
  if (!parse_u64(s, v)) return false;
  out = static_cast<std::size_t>(v);
  return true;
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
}

bool parse_bool(std::string_view s, bool& out) {
  s = trim(s);
  if (s == "true" || s == "1" || s == "yes") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no") {
    out = false;
    return true;
  }
  return false;
}

bool parse_dims(std::string_view s, std::vector<std::size_t>& out) {
  out.clear();
  for (const auto& part : split(trim(s), 'x')) {
    std::size_t v;
    if (!parse_size(part, v) || v == 0) return false;
    out.push_back(v);
  }
  return !out.empty();
}

std::string format_dims(const std::vector<std::size_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace volformer::text
