#pragma once

#include <string>
#include <string_view>

namespace volformer {

// Anatomical slicing direction. Sagittal is the native acquisition plane.
enum class View { sag, cor, ax };

inline constexpr View kAllViews[] = {View::sag, View::cor, View::ax};

std::string_view view_name(View v);
// Throws ConfigError for anything but "sag", "cor" or "ax".
View parse_view(std::string_view text);

}  // namespace volformer
